"""Frozen teachers that supply per-patch target features and saliency.

Two desk-scale stand-ins for a large pretrained encoder share one ViT body
with a [CLS] token: a frozen-random instance (exercises the mechanism only)
and one trained as a small supervised classifier on the toy dataset (its
pre-head patch features carry enough semantics to test that mimicking them
helps). Patch features are taken after the final layernorm; saliency is the
last layer's [CLS]-to-patch attention, averaged over heads and renormalized
to sum to one.

Teachers are frozen: no call here ever records onto a gradient tape, and
repeated calls on the same image are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..masking import patchify
from ..model import layers
from ..model.pos_embed import sincos_2d
from ..tensor import Tensor, ops


class TeacherError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherSignal:
    """All-token target features plus a per-token saliency distribution."""
    features: np.ndarray   # (n, dim) float32
    saliency: np.ndarray   # (n,) float32, non-negative, sums to 1

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise TeacherError("teacher features contain non-finite values")
        s = self.saliency
        if s.ndim != 1 or s.shape[0] != self.features.shape[0]:
            raise TeacherError(f"saliency shape {s.shape} does not match "
                               f"{self.features.shape[0]} tokens")
        if np.any(s < 0) or abs(float(s.sum()) - 1.0) > 1e-6:
            raise TeacherError("saliency must be a distribution over tokens")


@dataclass(frozen=True)
class TeacherConfig:
    image_size: int = 32
    patch_size: int = 4        # must match the student token grid
    dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 8
    mlp_ratio: int = 4
    l2_normalize: bool = False  # optional per-token feature normalization

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def init_teacher_params(cfg: TeacherConfig, seed) -> dict:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    layers.add_affine(params, rng, "patch_embed", cfg.patch_dim, cfg.dim,
                      np.float32)
    layers.param(params, "cls_token",
                 layers.trunc_normal(rng, (1, cfg.dim), dtype=np.float32))
    for l in range(1, cfg.depth + 1):
        layers.add_block(params, rng, f"blk{l}", cfg.dim, cfg.mlp_ratio, np.float32)
    layers.add_layernorm(params, "norm", cfg.dim, np.float32)
    layers.add_affine(params, rng, "head", cfg.dim, cfg.num_classes, np.float32)
    return params


class ViTTeacher:
    """Small ViT with a [CLS] token; frozen once handed out as a teacher."""

    def __init__(self, cfg: TeacherConfig, params: dict):
        self.cfg = cfg
        self.params = params
        g = cfg.grid
        pos = np.zeros((cfg.num_tokens + 1, cfg.dim), dtype=np.float32)
        pos[1:] = sincos_2d(cfg.dim, g[0], g[1]).astype(np.float32)
        self._pos = pos

    @classmethod
    def random(cls, cfg: TeacherConfig, seed) -> "ViTTeacher":
        t = cls(cfg, init_teacher_params(cfg, seed))
        t.freeze()
        return t

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    @property
    def feature_dim(self) -> int:
        return self.cfg.dim

    def _check_image(self, image: np.ndarray) -> None:
        s = self.cfg.image_size
        if image.shape != (s, s, 3):
            raise TeacherError(f"teacher expects {(s, s, 3)} images, got "
                               f"{image.shape} (grid mismatch)")

    def forward(self, image: np.ndarray, want_attention: bool = False):
        """Tokens through the ViT body.

        Returns (normed tokens (n+1, dim) Tensor, last-layer attention probs
        (heads, n+1, n+1) array or None). Token 0 is [CLS].
        """
        self._check_image(image)
        rows = patchify(image, self.cfg.patch_size).astype(np.float32)
        x = layers.affine(Tensor(rows), self.params, "patch_embed")
        cls = self.params["cls_token"]
        n = self.cfg.num_tokens
        x = ops.add(ops.scatter_rows(x, np.arange(1, n + 1), n + 1),
                    ops.scatter_rows(cls, [0], n + 1))
        x = ops.add(x, Tensor(self._pos))
        last_probs = None
        for l in range(1, self.cfg.depth + 1):
            want = want_attention and l == self.cfg.depth
            x, probs = layers.block(x, self.params, f"blk{l}", self.cfg.heads, want)
            if want:
                last_probs = probs
        return layers.layernorm(x, self.params, "norm"), last_probs

    def logits(self, image: np.ndarray) -> Tensor:
        """Classifier logits from the [CLS] token (used while training it)."""
        tokens, _ = self.forward(image)
        return layers.affine(ops.gather_rows(tokens, [0]), self.params, "head")

    def signal_for(self, image_id, image: np.ndarray) -> TeacherSignal:
        """TeacherSignal for one image; ``image_id`` is ignored in-process."""
        if not self.frozen:
            raise TeacherError("teacher must be frozen before providing targets")
        tokens, probs = self.forward(image, want_attention=True)
        feats = tokens.data[1:].astype(np.float32)
        if self.cfg.l2_normalize:
            feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True),
                                       1e-12)
        sal = probs[:, 0, 1:].mean(axis=0)
        sal = (sal / sal.sum()).astype(np.float32)
        return TeacherSignal(features=np.ascontiguousarray(feats), saliency=sal)


def teacher_forward(image: np.ndarray, teacher, image_id=None) -> TeacherSignal:
    """Uniform entry point over in-process and file-backed teachers."""
    return teacher.signal_for(image_id, image)


def train_toy_teacher(images: np.ndarray, labels: np.ndarray, cfg: TeacherConfig,
                      steps: int = 2000, batch_size: int = 32,
                      lr_max: float = 1e-3, seed=0,
                      log_every: int = 0) -> ViTTeacher:
    """Supervised training of the teacher ViT on the toy dataset, then freeze.

    Returns the frozen teacher; its pre-head patch features become the mimic
    targets.
    """
    from ..tensor import Tape
    from ..trainer.optim import AdamW, lr_at

    teacher = ViTTeacher(cfg, init_teacher_params(cfg, seed))
    opt = AdamW(teacher.params, weight_decay=0.05)
    n_img = images.shape[0]
    eye = np.eye(cfg.num_classes, dtype=np.float32)

    for step in range(1, steps + 1):
        rng = np.random.default_rng((seed, step, 0x7EA))
        batch = rng.choice(n_img, size=min(batch_size, n_img), replace=False)
        lr = lr_at(step, steps, lr_max=lr_max, warmup_steps=max(1, steps // 10))
        with Tape() as tape:
            total = None
            for i in batch:
                row = teacher.logits(images[i])
                term = ops.softmax_xent(row, Tensor(eye[int(labels[i])][None, :]))
                total = term if total is None else ops.add(total, term)
            loss = ops.scale(total, 1.0 / len(batch))
        tape.backward(loss)
        opt.step(lr)
        if log_every and step % log_every == 0:
            print(f"teacher step {step}: loss {loss.item():.4f}")
    teacher.freeze()
    return teacher


def teacher_accuracy(teacher: ViTTeacher, images: np.ndarray,
                     labels: np.ndarray) -> float:
    correct = 0
    for i in range(images.shape[0]):
        pred = int(np.argmax(teacher.logits(images[i]).data))
        correct += pred == int(labels[i])
    return correct / images.shape[0]
