"""Dense tensors with reverse-mode automatic differentiation.

The design is a flat tape: every differentiable operation appends one record
(inputs, output, backward rule) to the currently active ``Tape``. The backward
pass walks the records once, in reverse order, accumulating gradients into the
requires-grad leaves. There is no graph object beyond the tape itself.

Precision policy: float32 for training runs, float64 for gradient tests
(finite differences are unreliable at 32 bit). Ops never change dtype; mixing
dtypes in a binary op is an error.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot accept."""


class TapeError(RuntimeError):
    """Raised on tape misuse (backward twice, loss not on a tape, ...)."""


class Tensor:
    """A dense n-d array that can participate in gradient recording.

    ``data`` is always a C-contiguous numpy array. ``grad`` is populated by
    ``Tape.backward`` for requires-grad leaves only; intermediate results do
    not keep their gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        # Logically row-major; intermediate results may be lazy views (ops
        # force contiguity wherever the layout matters).
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same buffer with recording severed."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class TapeRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


# Stack so tapes can nest (grad checks inside a training context, etc.).
_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable operations for one backward pass.

    Lifecycle is one tape per training step: record the forward under
    ``with Tape() as tape``, call ``tape.backward(loss)`` once, discard.
    A second backward on the same tape raises ``TapeError`` (double backward
    is unsupported; the training scheme only needs first-order gradients).
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        output.requires_grad = True
        output.tape = self
        self.records.append(TapeRecord(name, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad leaf on this tape.

        Leaves reachable from ``loss`` get their accumulated gradient;
        recorded leaves not reachable from it get exact zeros.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.data.ndim != 0:
            raise TapeError(f"backward() requires a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        # Backward rules must never mutate the gradient they are handed, so
        # accumulation can stay copy-free (a + b allocates a new array).
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        produced = {id(rec.output) for rec in self.records}

        for rec in reversed(self.records):
            out_grad = grads.pop(id(rec.output), None)
            if out_grad is None:
                continue
            input_grads = rec.backward_fn(out_grad)
            for inp, g in zip(rec.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(
                        f"backward of {rec.name}: gradient shape {g.shape} "
                        f"!= input shape {inp.data.shape}")
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g

        # Assign leaf gradients as fresh arrays the caller may mutate;
        # untouched recorded leaves get exact zeros.
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    g = grads.get(id(inp))
                    inp.grad = (np.zeros_like(inp.data) if g is None
                                else np.array(g, dtype=inp.data.dtype))


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced ``loss``."""
    if loss.tape is None:
        raise TapeError("loss is not attached to a tape (was it recorded?)")
    loss.tape.backward(loss)
