"""The two training losses and their bookkeeping.

Reconstruction: squared Frobenius distance between predicted and target
masked-patch pixels, divided by the number of masked tokens. Mimic: the same
form between projected visible representations and teacher features, divided
by the number of visible tokens. Both normalize by token count only, exactly
as the loss definitions read; set ``full_mean`` to divide by element count
instead (an experiment knob, off by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ShapeError, Tensor, ops


@dataclass(frozen=True)
class LossBreakdown:
    """One step's losses; ``total`` is always the stated weighted sum."""
    l_r: float
    l_m: float
    total: float
    weight_r: float
    weight_m: float
    grad_norm: float = 0.0

    def __post_init__(self):
        vals = (self.l_r, self.l_m, self.total, self.grad_norm)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite loss breakdown: {vals}")

    @classmethod
    def build(cls, l_r: float, l_m: float, weight_r: float, weight_m: float,
              grad_norm: float = 0.0) -> "LossBreakdown":
        return cls(l_r=l_r, l_m=l_m, total=weight_r * l_r + weight_m * l_m,
                   weight_r=weight_r, weight_m=weight_m, grad_norm=grad_norm)


def _token_normalized_sq(pred: Tensor, target: Tensor, name: str,
                         full_mean: bool) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: prediction {pred.shape} vs target "
                         f"{target.shape}")
    if pred.ndim != 2:
        raise ShapeError(f"{name}: expected (tokens, dim), got {pred.shape}")
    if target.requires_grad:
        raise ShapeError(f"{name}: targets must not require grad")
    denom = pred.size if full_mean else pred.shape[0]
    return ops.scale(ops.sum_sq(ops.sub(pred, target)), 1.0 / denom)


def loss_reconstruct(d_m: Tensor, targets: Tensor,
                     full_mean: bool = False) -> Tensor:
    """(1/l_m) * sum((D_m - I_m)^2) over masked-token pixel rows."""
    return _token_normalized_sq(d_m, targets, "loss_reconstruct", full_mean)


def loss_mimic(projected: Tensor, f_v: Tensor, full_mean: bool = False) -> Tensor:
    """(1/l_v) * sum((L(E_v) - F_v)^2) over visible-token feature rows."""
    return _token_normalized_sq(projected, f_v, "loss_mimic", full_mean)
