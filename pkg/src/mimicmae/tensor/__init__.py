from .tensor import ShapeError, Tape, TapeError, Tensor, active_tape, backward
from . import ops
from .ops import forward_op, OP_REGISTRY
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError", "active_tape", "backward",
    "ops", "forward_op", "OP_REGISTRY", "grad_check", "GradCheckReport",
]
