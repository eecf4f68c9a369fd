"""Training step and loop: loss placement per ablation mode, AdamW updates,
metrics, and resumable checkpoints.

Reproducibility works by deriving every random draw from (seed, step, ...)
with no carried RNG state, so a resumed run replays the exact stream an
uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ..masking import (MaskPlan, PatchGrid, attach_stage_masks, blockwise_plan,
                       focused_blockwise_plan, focused_plan, random_plan,
                       split_patches)
from ..model import ModelConfig, decode, encode, init_params, mimic_head
from ..model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..tensor import Tape, Tensor, ops
from .losses import LossBreakdown, loss_mimic, loss_reconstruct
from .optim import AdamW, clip_global_norm, lr_at


class AblationMode(str, Enum):
    MR_MAE = "mr_mae"                    # mimic on E_v + reconstruct on D_m
    LOW_ONLY = "low_only"                # reconstruction only (plain MAE)
    JOINT_AT_DECODER = "joint_at_decoder"  # both targets from decoder outputs
    MIMIC_ONLY = "mimic_only"            # mimic only (decoder still runs)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    total_steps: int = 2000
    batch_size: int = 4
    lr_max: float = 1.5e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.2     # reference setup warms up 20% of the run
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: float = 3.0
    weight_r: float = 0.5
    weight_m: float = 0.5
    full_mean: bool = False
    mode: AblationMode = AblationMode.MR_MAE
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        object.__setattr__(self, "mode", AblationMode(self.mode))

    @property
    def warmup_steps(self) -> int:
        return int(round(self.total_steps * self.warmup_frac))


@dataclass
class TrainState:
    """Everything a resumed run needs; params and moments share dtype float32."""
    step: int
    params: dict
    optimizer: AdamW
    seed: int

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, tcfg: TrainerConfig) -> "TrainState":
        params = init_params(model_cfg, seed=(tcfg.seed, 0x1A17))
        opt = AdamW(params, betas=tcfg.betas, eps=tcfg.eps,
                    weight_decay=tcfg.weight_decay)
        return cls(step=0, params=params, optimizer=opt, seed=tcfg.seed)

    def checkpoint_arrays(self) -> dict:
        arrays = {f"param/{k}": p.data for k, p in self.params.items()}
        arrays.update(self.optimizer.state_arrays())
        arrays["meta/step"] = np.asarray(float(self.step), dtype=np.float32)
        arrays["meta/seed"] = np.asarray(float(self.seed), dtype=np.float32)
        return arrays

    def save(self, path, digest: bytes) -> None:
        save_checkpoint(path, digest, self.checkpoint_arrays())

    @classmethod
    def restore(cls, path, model_cfg: ModelConfig, tcfg: TrainerConfig,
                expect_digest: bytes | None = None) -> "TrainState":
        digest, arrays = load_checkpoint(path)
        if expect_digest is not None and digest != expect_digest:
            raise CheckpointError(
                f"checkpoint config digest {digest.hex()[:12]} does not match "
                f"current config {expect_digest.hex()[:12]}")
        state = cls.fresh(model_cfg, tcfg)
        for k, p in state.params.items():
            rec = arrays.get(f"param/{k}")
            if rec is None or rec.shape != p.data.shape:
                raise CheckpointError(f"checkpoint missing or misshapen param {k}")
            p.data = np.array(rec)
        step = int(arrays["meta/step"])
        state.optimizer.load_state_arrays(arrays, t=step)
        state.step = step
        state.seed = int(arrays["meta/seed"])
        return state


def plan_for(model_cfg: ModelConfig, seed, saliency=None) -> MaskPlan:
    """Draw a mask plan according to the config's masking mode.

    Conv stages always get their finer grids attached; blockwise drawing uses
    the conv-stage factors when present, otherwise a single factor of 2.
    """
    grid = (model_cfg.grid_h, model_cfg.grid_w)
    factors = model_cfg.stage_factors
    mode = model_cfg.masking_mode
    if mode == "random":
        plan = random_plan(model_cfg.num_tokens, model_cfg.visible_ratio, seed)
        return attach_stage_masks(plan, grid, factors)
    if mode == "blockwise":
        draw_factors = factors if factors else (2,)
        total = int(np.prod(draw_factors))
        if grid[0] % total or grid[1] % total:
            raise ValueError(f"token grid {grid} not divisible by blockwise "
                             f"factor product {total}")
        coarse = (grid[0] // total, grid[1] // total)
        return blockwise_plan(coarse, model_cfg.visible_ratio, draw_factors, seed)
    if mode == "focused":
        if saliency is None:
            raise ValueError("focused masking requires teacher saliency")
        if factors:
            return focused_blockwise_plan(saliency, grid,
                                          model_cfg.visible_ratio, factors, seed)
        plan = focused_plan(saliency, model_cfg.visible_ratio, seed)
        return attach_stage_masks(plan, grid, ())
    raise ValueError(f"unknown masking mode {mode}")


def _needs_teacher(model_cfg: ModelConfig, mode: AblationMode) -> bool:
    return mode != AblationMode.LOW_ONLY or model_cfg.masking_mode == "focused"


def train_step(images: np.ndarray, image_ids, state: TrainState, teacher,
               model_cfg: ModelConfig, tcfg: TrainerConfig) -> LossBreakdown:
    """One optimization step over a batch; advances ``state`` in place.

    Per image: draw a plan, run encoder (and decoder), place the losses per
    the ablation mode, average over the batch, backward, clip, AdamW update.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    mode = tcfg.mode
    step = state.step + 1
    grid = PatchGrid((model_cfg.image_size, model_cfg.image_size),
                     model_cfg.patch_size)
    dtype = next(iter(state.params.values())).data.dtype
    use_teacher = _needs_teacher(model_cfg, mode)
    if use_teacher and teacher is None:
        raise ValueError(f"mode {mode.value} with masking "
                         f"{model_cfg.masking_mode} requires a teacher")

    b = len(images)
    r_terms: list[Tensor] = []
    m_terms: list[Tensor] = []
    detached_r = []

    with Tape() as tape:
        for i in range(b):
            img = images[i]
            signal = (teacher.signal_for(int(image_ids[i]), img)
                      if use_teacher else None)
            plan = plan_for(model_cfg, (state.seed, step, i, 0x91A),
                            saliency=None if signal is None else signal.saliency)
            batch = split_patches(img, grid, plan,
                                  normalize_targets=model_cfg.per_patch_norm)
            enc = encode(img, plan, model_cfg, state.params)

            if mode != AblationMode.LOW_ONLY:
                feats = signal.features.astype(dtype)
                if mode == AblationMode.JOINT_AT_DECODER:
                    dec = decode(enc, plan, model_cfg, state.params,
                                 want_feature_head=True)
                    m_terms.append(loss_mimic(dec.feature_m,
                                              Tensor(feats[plan.masked]),
                                              full_mean=tcfg.full_mean))
                else:
                    dec = decode(enc, plan, model_cfg, state.params)
                    m_terms.append(loss_mimic(mimic_head(enc.e_v, state.params),
                                              Tensor(feats[plan.visible]),
                                              full_mean=tcfg.full_mean))
            else:
                dec = decode(enc, plan, model_cfg, state.params)

            targets = Tensor(batch.masked_pixels.astype(dtype))
            r_loss = loss_reconstruct(dec.d_m, targets, full_mean=tcfg.full_mean)
            if mode == AblationMode.MIMIC_ONLY:
                detached_r.append(float(r_loss.data))  # reported, not trained on
            else:
                r_terms.append(r_loss)

        def batch_mean(terms):
            acc = terms[0]
            for t in terms[1:]:
                acc = ops.add(acc, t)
            return ops.scale(acc, 1.0 / b)

        l_r_t = batch_mean(r_terms) if r_terms else None
        l_m_t = batch_mean(m_terms) if m_terms else None
        if l_r_t is not None and l_m_t is not None:
            total_t = ops.add(ops.scale(l_r_t, tcfg.weight_r),
                              ops.scale(l_m_t, tcfg.weight_m))
        elif l_r_t is not None:
            total_t = ops.scale(l_r_t, tcfg.weight_r)
        else:
            total_t = ops.scale(l_m_t, tcfg.weight_m)

    l_r = float(l_r_t.data) if l_r_t is not None else \
        (float(np.mean(detached_r)) if detached_r else 0.0)
    l_m = float(l_m_t.data) if l_m_t is not None else 0.0
    weight_r = tcfg.weight_r if r_terms else 0.0
    weight_m = tcfg.weight_m if m_terms else 0.0

    if not np.isfinite(float(total_t.data)):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: l_r={l_r} l_m={l_m} "
            f"(mode {mode.value})")

    tape.backward(total_t)
    grad_norm = clip_global_norm(state.params, tcfg.clip_norm)
    if not np.isfinite(grad_norm):
        raise TrainingDiverged(
            f"non-finite gradient norm at step {step}: l_r={l_r} l_m={l_m} "
            f"grad_norm={grad_norm} (mode {mode.value})")
    lr = lr_at(step, tcfg.total_steps, lr_max=tcfg.lr_max, lr_min=tcfg.lr_min,
               warmup_steps=tcfg.warmup_steps)
    state.optimizer.step(lr)
    state.step = step
    return LossBreakdown.build(l_r=l_r, l_m=l_m, grad_norm=grad_norm,
                               weight_r=weight_r, weight_m=weight_m)


METRICS_HEADER = ["step", "lr", "loss_total", "loss_r", "loss_m",
                  "grad_norm", "seconds"]


class MetricsWriter:
    """CSV metrics, one flushed row per step.

    In deterministic mode the seconds column is written as 0 so rerun and
    resume streams compare byte-identical; wall time is not reproducible.
    """

    def __init__(self, path, deterministic: bool, append: bool = False):
        exists = Path(path).exists()
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        self.deterministic = deterministic
        if not (append and exists):
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def write(self, step: int, lr: float, breakdown: LossBreakdown,
              seconds: float) -> None:
        secs = 0.0 if self.deterministic else seconds
        self._writer.writerow([step, f"{lr:.10g}", f"{breakdown.total:.10g}",
                               f"{breakdown.l_r:.10g}", f"{breakdown.l_m:.10g}",
                               f"{breakdown.grad_norm:.10g}", f"{secs:.6f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_training(model_cfg: ModelConfig, tcfg: TrainerConfig,
                 images: np.ndarray, image_ids, teacher, out_dir,
                 digest: bytes = b"", resume_path=None,
                 log=None) -> TrainState:
    """Train to ``tcfg.total_steps``, writing metrics and checkpoints.

    Batches are drawn per step from (seed, step), so interrupting after any
    checkpoint and resuming replays the identical remainder of the run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_path is not None:
        state = TrainState.restore(resume_path, model_cfg, tcfg,
                                   expect_digest=digest)
    else:
        state = TrainState.fresh(model_cfg, tcfg)
    metrics = MetricsWriter(out / "metrics.csv", tcfg.deterministic,
                            append=state.step > 0)
    n = len(images)
    take = min(tcfg.batch_size, n)
    try:
        while state.step < tcfg.total_steps:
            step = state.step + 1
            rng = np.random.default_rng((state.seed, step, 0xBA7C))
            batch_idx = rng.choice(n, size=take, replace=False)
            t0 = time.perf_counter()
            breakdown = train_step(images[batch_idx],
                                   np.asarray(image_ids)[batch_idx],
                                   state, teacher, model_cfg, tcfg)
            seconds = time.perf_counter() - t0
            lr = lr_at(step, tcfg.total_steps, lr_max=tcfg.lr_max,
                       lr_min=tcfg.lr_min, warmup_steps=tcfg.warmup_steps)
            metrics.write(step, lr, breakdown, seconds)
            if log and (step % 100 == 0 or step == 1):
                log(f"step {step}/{tcfg.total_steps} total={breakdown.total:.4f} "
                    f"l_r={breakdown.l_r:.4f} l_m={breakdown.l_m:.4f}")
            if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                state.save(out / f"checkpoint-{step:06d}.mrmc", digest)
        state.save(out / "checkpoint-final.mrmc", digest)
    finally:
        metrics.close()
    return state
