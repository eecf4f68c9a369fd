"""AdamW with decoupled weight decay, warmup + cosine schedule, norm clipping."""

from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, total_steps: int, lr_max: float = 1.5e-4,
          lr_min: float = 0.0, warmup_steps: int | None = None,
          warmup_frac: float = 0.2) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay to lr_min.

    lr(0) = 0, lr(warmup_steps) = lr_max, lr(total_steps and beyond) = lr_min;
    the cosine-phase midpoint sits exactly at (lr_max + lr_min) / 2.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    if warmup_steps is None:
        warmup_steps = int(round(total_steps * warmup_frac))
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_max * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.requires_grad and p.grad is not None:
            g = p.grad
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm. Scaling is out-of-place because sibling
    parameters may share a gradient buffer after backward.
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.requires_grad and p.grad is not None:
                p.grad = p.grad * factor
    return norm


class AdamW:
    """Decoupled weight decay Adam over a flat parameter dict.

    Decay multiplies each parameter by (1 - lr * weight_decay) directly; it
    never flows through the moment estimates. Moments are bias-corrected, so
    the very first step from zero moments is lr * g / (|g| + eps) per
    coordinate.
    """

    def __init__(self, params: dict, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()
                  if p.requires_grad}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()
                  if p.requires_grad}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name in self.m:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = np.array(arrays[f"adam_m/{name}"],
                                    dtype=self.m[name].dtype)
            self.v[name] = np.array(arrays[f"adam_v/{name}"],
                                    dtype=self.v[name].dtype)
