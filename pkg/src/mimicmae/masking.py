"""Patch tokenization and mask-plan generation.

A mask plan partitions the token grid (the h x w grid of p x p pixel patches
the transformer and both losses operate on) into visible and masked index
sets. When the model has convolution stages, those run at grids finer than
the token grid, and the plan carries one boolean visibility grid per stage
(finest first). Every stage grid is the nearest-neighbor upsample of the
token-grid mask, so a masked token's entire footprint is masked at every
resolution and nothing about masked content can leak into visible tokens.

Three generators:
  * random:    uniform choice of visible tokens;
  * blockwise: the mask is drawn on a grid coarser than the token grid and
    upsampled, so visible/masked regions come in aligned blocks at every
    scale (the factor list that relates draw grid to token grid is the same
    one that relates token grid to the conv-stage grids);
  * focused:   visible tokens are the most salient under a teacher-provided
    per-token saliency vector.

All generators are pure functions of their inputs and the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MaskPlanError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def visible_count(n: int, visible_ratio: float) -> int:
    """Number of visible tokens; errors if either side of the split is empty."""
    if not 0.0 < visible_ratio < 1.0:
        raise MaskPlanError(f"visible_ratio must be in (0, 1), got {visible_ratio}")
    l_v = round_half_up(n * visible_ratio)
    if l_v == 0 or l_v == n:
        raise MaskPlanError(
            f"ratio {visible_ratio} with {n} tokens leaves an empty partition "
            f"(l_v={l_v})")
    return l_v


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample of a boolean grid by an integer factor."""
    if factor < 1 or int(factor) != factor:
        raise MaskPlanError(f"upsample factor must be a positive integer, got {factor}")
    m = np.asarray(mask, dtype=bool)
    return m.repeat(factor, axis=0).repeat(factor, axis=1)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Token layout of an image: h x w tokens of p x p pixels, 3 channels."""

    image_size: tuple[int, int]
    patch_size: int
    channels: int = 3

    def __post_init__(self):
        ih, iw = self.image_size
        p = self.patch_size
        if p <= 0 or ih % p or iw % p:
            raise MaskPlanError(
                f"image {ih}x{iw} not divisible by patch size {p}")

    @property
    def h(self) -> int:
        return self.image_size[0] // self.patch_size

    @property
    def w(self) -> int:
        return self.image_size[1] // self.patch_size

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class MaskPlan:
    """Visible/masked partition of token indices, plus per-stage grids.

    ``visible_ratio`` is the achieved fraction l_v / n (for the random and
    focused generators it equals the requested ratio after rounding; the
    blockwise generator rounds on its draw grid, so the achieved token-level
    ratio can differ slightly from the request).

    ``stage_masks`` are boolean visibility grids (True = visible), finest
    first, each an exact nearest-neighbor upsample of the token-grid mask.
    ``grid`` is the token grid shape when the generator knows it.
    """

    visible: np.ndarray
    masked: np.ndarray
    visible_ratio: float
    stage_masks: tuple = ()
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.int64)
        msk = np.asarray(self.masked, dtype=np.int64)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", msk)
        n = self.n
        if vis.size == 0 or msk.size == 0:
            raise MaskPlanError("plan must have at least one visible and one "
                                "masked token")
        union = np.concatenate([vis, msk])
        if (np.any(np.diff(vis) <= 0) or np.any(np.diff(msk) <= 0)
                or len(np.unique(union)) != n or union.min() != 0
                or union.max() != n - 1):
            raise MaskPlanError("visible/masked must be sorted disjoint index "
                                "lists covering 0..n-1")
        if round_half_up(n * self.visible_ratio) != vis.size:
            raise MaskPlanError(
                f"l_v={vis.size} inconsistent with n={n} at ratio "
                f"{self.visible_ratio}")
        if self.grid is not None and self.grid[0] * self.grid[1] != n:
            raise MaskPlanError(f"grid {self.grid} does not hold {n} tokens")

    @property
    def n(self) -> int:
        return self.visible.size + self.masked.size

    @property
    def l_v(self) -> int:
        return self.visible.size

    @property
    def l_m(self) -> int:
        return self.masked.size

    def token_mask(self, grid: tuple[int, int] | None = None) -> np.ndarray:
        """Boolean token grid, True where visible."""
        g = grid or self.grid
        if g is None:
            raise MaskPlanError("plan has no grid shape; pass one explicitly")
        flat = np.zeros(self.n, dtype=bool)
        flat[self.visible] = True
        return flat.reshape(g)


def _plan_from_token_mask(mask2d: np.ndarray, ratio: float,
                          stage_factors=()) -> MaskPlan:
    flat = mask2d.reshape(-1)
    visible = np.flatnonzero(flat)
    masked = np.flatnonzero(~flat)
    return MaskPlan(visible=visible, masked=masked, visible_ratio=ratio,
                    stage_masks=_stage_masks_for(mask2d, stage_factors),
                    grid=mask2d.shape)


def _stage_masks_for(token_mask: np.ndarray, stage_factors) -> tuple:
    """One grid per conv stage: stage i sits ``prod(factors[i:])`` times finer."""
    factors = tuple(int(f) for f in stage_factors)
    masks = []
    for i in range(len(factors)):
        cum = int(np.prod(factors[i:]))
        masks.append(upsample_mask(token_mask, cum))
    return tuple(masks)


# ---------------------------------------------------------------------------
# generators


def random_plan(n: int, visible_ratio: float, seed) -> MaskPlan:
    """Uniformly random visible set of size round(n * ratio)."""
    l_v = visible_count(n, visible_ratio)
    rng = np.random.default_rng(seed)
    visible = np.sort(rng.permutation(n)[:l_v])
    masked = np.setdiff1d(np.arange(n), visible, assume_unique=True)
    return MaskPlan(visible=visible, masked=masked, visible_ratio=visible_ratio)


def blockwise_plan(coarse_grid: tuple[int, int], visible_ratio: float,
                   stage_factors, seed) -> MaskPlan:
    """Draw the mask on ``coarse_grid`` and upsample to the token grid.

    The token grid is the coarse grid scaled by the product of
    ``stage_factors``; visible/masked index lists are taken there, so the
    token mask consists of aligned constant blocks. The same factors produce
    the finer conv-stage grids, keeping every resolution consistent.
    """
    factors = tuple(int(f) for f in stage_factors)
    if any(f < 1 for f in factors) or any(f != float(raw) for f, raw in
                                          zip(factors, stage_factors)):
        raise MaskPlanError(f"stage factors must be positive integers, got "
                            f"{tuple(stage_factors)}")
    hc, wc = coarse_grid
    nc = hc * wc
    l_vc = visible_count(nc, visible_ratio)
    rng = np.random.default_rng(seed)
    coarse_visible = rng.permutation(nc)[:l_vc]
    coarse = np.zeros(nc, dtype=bool)
    coarse[coarse_visible] = True
    coarse = coarse.reshape(hc, wc)

    total = int(np.prod(factors)) if factors else 1
    token_mask = upsample_mask(coarse, total)
    achieved = token_mask.sum() / token_mask.size
    return _plan_from_token_mask(token_mask, achieved, stage_factors=factors)


def focused_plan(saliency: np.ndarray, visible_ratio: float, seed=None) -> MaskPlan:
    """Visible set = indices of the largest saliency values.

    Ties break toward the lower index. ``seed`` is accepted for interface
    uniformity with the random generators but never used.
    """
    sal = np.asarray(saliency, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(sal)):
        raise MaskPlanError("saliency contains non-finite values")
    n = sal.size
    l_v = visible_count(n, visible_ratio)
    # lexsort: primary key descending saliency, secondary ascending index
    order = np.lexsort((np.arange(n), -sal))
    visible = np.sort(order[:l_v])
    masked = np.setdiff1d(np.arange(n), visible, assume_unique=True)
    return MaskPlan(visible=visible, masked=masked, visible_ratio=visible_ratio)


def focused_blockwise_plan(saliency: np.ndarray, grid: tuple[int, int],
                           visible_ratio: float, stage_factors, seed=None) -> MaskPlan:
    """Focused selection under blockwise constraints.

    Saliency is average-pooled onto the draw grid (the token grid shrunk by
    the product of the stage factors), the top cells are kept there, and the
    choice is upsampled back, so the visible set is both salient and
    block-aligned at every conv-stage resolution.
    """
    factors = tuple(int(f) for f in stage_factors)
    total = int(np.prod(factors)) if factors else 1
    h, w = grid
    if h % total or w % total:
        raise MaskPlanError(f"token grid {grid} not divisible by factor product "
                            f"{total}")
    sal = np.asarray(saliency, dtype=np.float64).reshape(h, w)
    if not np.all(np.isfinite(sal)):
        raise MaskPlanError("saliency contains non-finite values")
    hc, wc = h // total, w // total
    pooled = sal.reshape(hc, total, wc, total).mean(axis=(1, 3)).reshape(-1)
    l_vc = visible_count(hc * wc, visible_ratio)
    order = np.lexsort((np.arange(pooled.size), -pooled))
    coarse = np.zeros(pooled.size, dtype=bool)
    coarse[order[:l_vc]] = True
    token_mask = upsample_mask(coarse.reshape(hc, wc), total)
    achieved = token_mask.sum() / token_mask.size
    return _plan_from_token_mask(token_mask, achieved, stage_factors=factors)


def attach_stage_masks(plan: MaskPlan, grid: tuple[int, int],
                       stage_factors) -> MaskPlan:
    """Derive conv-stage grids for a plan from its token mask.

    Upsampling preserves the no-leakage property for any token mask, so this
    turns a random or focused plan into one the masked conv stages accept.
    """
    mask2d = plan.token_mask(grid)
    return MaskPlan(visible=plan.visible, masked=plan.masked,
                    visible_ratio=plan.visible_ratio,
                    stage_masks=_stage_masks_for(mask2d, stage_factors),
                    grid=tuple(grid))


# ---------------------------------------------------------------------------
# pixel <-> patch layout


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten an (H, W, 3) image into (n, p*p*3) patch rows.

    Row i is the raster scan (channel-last) of the patch at grid position
    (i // w, i % w).
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise MaskPlanError(f"expected (H, W, C) image, got shape {img.shape}")
    ih, iw, c = img.shape
    p = patch_size
    if ih % p or iw % p:
        raise MaskPlanError(f"image {ih}x{iw} not divisible by patch size {p}")
    h, w = ih // p, iw // p
    rows = img.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(rows.reshape(h * w, p * p * c))


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of ``patchify`` for a full set of patch rows."""
    pt = np.asarray(patches)
    p, c = grid.patch_size, grid.channels
    if pt.shape != (grid.n, grid.patch_dim):
        raise MaskPlanError(f"expected {(grid.n, grid.patch_dim)} patch rows, "
                            f"got {pt.shape}")
    img = pt.reshape(grid.h, grid.w, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(img.reshape(grid.h * p, grid.w * p, c))


def normalize_patch_rows(rows: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-row standardization: subtract mean, divide by sqrt(var + eps)."""
    mu = rows.mean(axis=-1, keepdims=True)
    var = rows.var(axis=-1, keepdims=True)
    return (rows - mu) / np.sqrt(var + eps)


@dataclass(frozen=True)
class PatchBatch:
    """Pixels of one image split according to a plan.

    Rows of ``visible_pixels`` / ``masked_pixels`` follow the sorted index
    lists in ``plan``. When ``targets_normalized`` is set, the masked rows
    (the reconstruction targets) were standardized per patch; visible rows
    are always raw pixels.
    """

    visible_pixels: np.ndarray
    masked_pixels: np.ndarray
    plan: MaskPlan
    targets_normalized: bool = False


def split_patches(image: np.ndarray, grid: PatchGrid, plan: MaskPlan,
                  normalize_targets: bool = True) -> PatchBatch:
    if plan.n != grid.n:
        raise MaskPlanError(f"plan has {plan.n} tokens but grid has {grid.n}")
    rows = patchify(image, grid.patch_size)
    masked = rows[plan.masked]
    if normalize_targets:
        masked = normalize_patch_rows(masked)
    return PatchBatch(visible_pixels=rows[plan.visible], masked_pixels=masked,
                      plan=plan, targets_normalized=normalize_targets)
