"""Finite-difference verification of tape gradients.

This is the test oracle for all model math: central differences
(f(x+h) - f(x-h)) / 2h per coordinate against the gradient the tape computes.
Run it at float64; at float32 the subtraction noise swamps the signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, TapeError, Tensor

DEFAULT_STEP = 1e-5

# Below this magnitude the relative error is meaningless; compare absolutely.
_ABS_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    tolerance: float
    num_coords: int
    worst_coord: tuple = ()
    failures: list = field(default_factory=list)  # (coord, analytic, numeric, err)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max_error={self.max_error:.3e} "
                f"(tol={self.tolerance:.1e}, {self.num_coords} coords, "
                f"worst at {self.worst_coord})")


def _coord_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom <= _ABS_FLOOR:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               tolerance: float = 1e-4, step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` at ``point`` with
    central finite differences, coordinate by coordinate.

    ``f`` must be deterministic. Raises on non-finite values, identifying the
    offending coordinate.
    """
    x = Tensor(point.data.astype(np.float64, copy=True), requires_grad=True)

    with Tape() as tape:
        out = f(x)
    if out.data.ndim != 0:
        raise TapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise FloatingPointError("grad_check: f(point) is not finite")

    if out.tape is tape:
        tape.backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    else:
        # f ignored its input (constant function): gradient is exactly zero.
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(Tensor(x.data)).item()
        flat[i] = orig - step
        f_minus = f(Tensor(x.data)).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
        if not np.isfinite(numeric[i]):
            coord = np.unravel_index(i, x.data.shape)
            raise FloatingPointError(
                f"grad_check: non-finite finite difference at coordinate {coord}")

    analytic_flat = analytic.reshape(-1)
    if not np.all(np.isfinite(analytic_flat)):
        bad = int(np.flatnonzero(~np.isfinite(analytic_flat))[0])
        coord = np.unravel_index(bad, x.data.shape)
        raise FloatingPointError(f"grad_check: non-finite gradient at coordinate {coord}")

    report = GradCheckReport(passed=True, max_error=0.0, tolerance=tolerance,
                             num_coords=flat.size)
    for i in range(flat.size):
        err = _coord_error(analytic_flat[i], numeric[i])
        coord = tuple(int(c) for c in np.unravel_index(i, x.data.shape))
        if err > report.max_error:
            report.max_error = err
            report.worst_coord = coord
        if err > tolerance:
            report.failures.append((coord, float(analytic_flat[i]),
                                    float(numeric[i]), float(err)))
    report.passed = not report.failures
    return report
