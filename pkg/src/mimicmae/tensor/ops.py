"""Differentiable operator set.

Every primitive validates shapes, computes its forward with numpy, and (when
an input requires grad and a tape is active) records a backward rule. The
public functions are the API the model is written against; ``forward_op``
dispatches by name over the same registry, which the gradient-check suite
iterates to cover every op.

Conventions kept deliberately narrow:
  - no broadcasting except bias-add of a 1-d vector over leading dims;
  - matmul operands must have equal leading (stack) dims;
  - softmax / layernorm act over the last axis;
  - gelu is the tanh approximation; layernorm epsilon defaults to 1e-6.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, active_tape

LAYERNORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _result(name, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, inputs, out, backward_fn)
    return out


def _check_same_dtype(name, first, *rest):
    d = first.data.dtype
    for t in rest:
        if t.data.dtype != d:
            raise ShapeError(f"{name}: mixed dtypes {d} and {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-d bias over the last axis."""
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))

        def bwd(g):
            return g, g.sum(axis=lead) if lead else g
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} (bias-add needs "
                         f"trailing dims to match)")
    return _result("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result("mul", (a, b), a.data * b.data,
                   lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not a tensor; no gradient for it)."""
    c = a.data.dtype.type(factor)
    return _result("scale", (a,), a.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra / layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; >2-d operands are stacks with equal leading dims."""
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} x {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} differ")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)) if need_a else None,
                np.matmul(np.swapaxes(a.data, -1, -2), g) if need_b else None)

    return _result("matmul", (a, b), np.matmul(a.data, b.data), bwd)


def transpose(a: Tensor, perm: tuple) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: perm {perm} invalid for shape {a.shape}")
    inv = tuple(int(i) for i in np.argsort(perm))
    return _result("transpose", (a,), a.data.transpose(perm),
                   lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result("reshape", (a,), out,
                   lambda g: (np.ascontiguousarray(g).reshape(a.data.shape),))


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows along axis 0 (repeated indices allowed)."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got {idx.shape}")
    if a.ndim < 1:
        raise ShapeError("gather_rows: input must have a leading row axis")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    unique = len(np.unique(idx)) == idx.size

    def bwd(g):
        full = np.zeros_like(a.data)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result("gather_rows", (a,), a.data[idx], bwd)


def scatter_rows(a: Tensor, index, num_rows: int) -> Tensor:
    """Place rows of ``a`` at ``index`` within ``num_rows`` zero-filled rows."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size != a.shape[0]:
        raise ShapeError(f"scatter_rows: index shape {idx.shape} does not match "
                         f"{a.shape[0]} input rows")
    if len(np.unique(idx)) != idx.size:
        raise ShapeError("scatter_rows: duplicate indices")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + a.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return _result("scatter_rows", (a,), out, lambda g: (g[idx].copy(),))


def tile_rows(v: Tensor, count: int) -> Tensor:
    """Repeat a 1-d vector as ``count`` rows (e.g. a shared mask token)."""
    if v.ndim != 1:
        raise ShapeError(f"tile_rows: expected 1-d vector, got {v.shape}")
    if count < 1:
        raise ShapeError(f"tile_rows: count must be positive, got {count}")
    out = np.tile(v.data, (count, 1))
    return _result("tile_rows", (v,), out, lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# nonlinearities / normalization


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (rows sum to one)."""
    if a.ndim < 1:
        raise ShapeError("softmax: input must have at least one axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _result("softmax", (a,), y, bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dy,)

    return _result("gelu", (a,), y, bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply affine scale and shift.

    A constant row normalizes to zeros (up to the epsilon in the variance),
    so the output there is just ``beta``.
    """
    _check_same_dtype("layernorm", x, gamma, beta)
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine params {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g.copy()
        return dx, dgamma, dbeta

    return _result("layernorm", (x, gamma, beta), y, bwd)


# ---------------------------------------------------------------------------
# reductions


def mean(a: Tensor) -> Tensor:
    """Mean over all elements (scalar output)."""
    n = a.size
    if n == 0:
        raise ShapeError("mean: empty tensor")

    def bwd(g):
        return (np.full_like(a.data, g / n),)

    return _result("mean", (a,), np.asarray(a.data.mean(), dtype=a.data.dtype), bwd)


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared elements (scalar output)."""
    return _result("sum_sq", (a,), np.asarray((a.data ** 2).sum(), dtype=a.data.dtype),
                   lambda g: (2.0 * g * a.data,))


def softmax_xent(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean cross-entropy between softmaxed logit rows and one-hot targets.

    Targets never receive gradient (they are labels, not parameters).
    """
    _check_same_dtype("softmax_xent", logits, onehot)
    if logits.ndim != 2 or logits.shape != onehot.shape:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs targets "
                         f"{onehot.shape}, expected matching 2-d")
    if onehot.requires_grad:
        raise ShapeError("softmax_xent: targets must not require grad")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    out = -(onehot.data * logp).sum() / n

    def bwd(g):
        p = np.exp(logp)
        return (g * (p - onehot.data) / n, None)

    return _result("softmax_xent", (logits, onehot),
                   np.asarray(out, dtype=logits.data.dtype), bwd)


# ---------------------------------------------------------------------------
# convolution via im2col (channel-last layout)


def _conv_out_dim(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold (H, W, C) into (out_h*out_w, kh*kw*C) patch rows."""
    if x.ndim != 3:
        raise ShapeError(f"im2col: expected (H, W, C), got {x.shape}")
    h, w, c = x.shape
    oh = _conv_out_dim(h, kh, stride, pad)
    ow = _conv_out_dim(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"im2col: kernel {kh}x{kw} too large for input {x.shape}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                     # (oh, ow, C, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * c)

    def bwd(g):
        gw = g.reshape(oh, ow, kh, kw, c)
        gp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                gp[i:i + oh * stride:stride, j:j + ow * stride:stride] += gw[:, :, i, j]
        return (gp[pad:pad + h, pad:pad + w] if pad else gp,)

    return _result("im2col", (x,), np.ascontiguousarray(cols), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, kh: int, kw: int,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution on (H, W, C_in), weight flattened to (kh*kw*C_in, C_out).

    Composed of im2col + matmul + bias-add so the backward pass reuses those
    ops' gradients rather than a bespoke convolution rule.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d: expected (H, W, C), got {x.shape}")
    c_in = x.shape[2]
    if weight.ndim != 2 or weight.shape[0] != kh * kw * c_in:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match "
                         f"kernel {kh}x{kw}x{c_in}")
    c_out = weight.shape[1]
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} channels")
    oh = _conv_out_dim(x.shape[0], kh, stride, pad)
    ow = _conv_out_dim(x.shape[1], kw, stride, pad)
    cols = im2col(x, kh, kw, stride=stride, pad=pad)
    out = add(matmul(cols, weight), bias)
    return reshape(out, (oh, ow, c_out))


# ---------------------------------------------------------------------------
# dispatch registry

OP_REGISTRY = {
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["factor"]),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs["perm"]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "gather_rows": lambda inputs, attrs: gather_rows(inputs[0], attrs["index"]),
    "scatter_rows": lambda inputs, attrs: scatter_rows(
        inputs[0], attrs["index"], attrs["num_rows"]),
    "tile_rows": lambda inputs, attrs: tile_rows(inputs[0], attrs["count"]),
    "softmax": lambda inputs, attrs: softmax(inputs[0]),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "layernorm": lambda inputs, attrs: layernorm(
        *inputs, eps=attrs.get("eps", LAYERNORM_EPS)),
    "mean": lambda inputs, attrs: mean(inputs[0]),
    "sum_sq": lambda inputs, attrs: sum_sq(inputs[0]),
    "softmax_xent": lambda inputs, attrs: softmax_xent(*inputs),
    "im2col": lambda inputs, attrs: im2col(
        inputs[0], attrs["kh"], attrs["kw"],
        stride=attrs.get("stride", 1), pad=attrs.get("pad", 0)),
    "conv2d": lambda inputs, attrs: conv2d(
        *inputs, kh=attrs["kh"], kw=attrs["kw"],
        stride=attrs.get("stride", 1), pad=attrs.get("pad", 0)),
}


def forward_op(name: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch an op by name. Unknown names raise KeyError."""
    if name not in OP_REGISTRY:
        raise KeyError(f"unknown op {name!r}; registered: {sorted(OP_REGISTRY)}")
    return OP_REGISTRY[name](list(inputs), attrs or {})
