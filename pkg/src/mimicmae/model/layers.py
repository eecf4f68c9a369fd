"""Shared transformer building blocks over the tensor core.

Used by both the student network and the teacher ViT. Parameters live in a
flat dict (name -> Tensor); functions take the dict plus a name prefix.
"""

from __future__ import annotations

import math

import numpy as np

from ..tensor import Tensor, ops


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def param(params: dict, name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter {name}")
    params[name] = Tensor(value, requires_grad=True)


def add_affine(params: dict, rng, name: str, d_in: int, d_out: int, dtype) -> None:
    param(params, f"{name}/w", trunc_normal(rng, (d_in, d_out), dtype=dtype))
    param(params, f"{name}/b", np.zeros(d_out, dtype=dtype))


def add_layernorm(params: dict, name: str, dim: int, dtype) -> None:
    param(params, f"{name}/g", np.ones(dim, dtype=dtype))
    param(params, f"{name}/b", np.zeros(dim, dtype=dtype))


def add_block(params: dict, rng, prefix: str, dim: int, mlp_ratio: int, dtype) -> None:
    add_layernorm(params, f"{prefix}/ln1", dim, dtype)
    add_affine(params, rng, f"{prefix}/qkv", dim, 3 * dim, dtype)
    add_affine(params, rng, f"{prefix}/proj", dim, dim, dtype)
    add_layernorm(params, f"{prefix}/ln2", dim, dtype)
    add_affine(params, rng, f"{prefix}/mlp1", dim, mlp_ratio * dim, dtype)
    add_affine(params, rng, f"{prefix}/mlp2", mlp_ratio * dim, dim, dtype)


def affine(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.add(ops.matmul(x, params[f"{name}/w"]), params[f"{name}/b"])


def layernorm(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.layernorm(x, params[f"{name}/g"], params[f"{name}/b"])


def attention(x: Tensor, params: dict, prefix: str, heads: int,
              want_probs: bool = False):
    """Multi-head self-attention over a (tokens, dim) sequence.

    Returns (output, probs) where probs is the (heads, T, T) softmax matrix
    as a plain array when requested (for visualization; never differentiated).
    """
    t, dim = x.shape
    hd = dim // heads
    qkv = affine(x, params, f"{prefix}/qkv")                      # (T, 3C)
    qkv = ops.transpose(ops.reshape(qkv, (t, 3, heads, hd)), (1, 2, 0, 3))
    q = ops.reshape(ops.gather_rows(qkv, [0]), (heads, t, hd))
    k = ops.reshape(ops.gather_rows(qkv, [1]), (heads, t, hd))
    v = ops.reshape(ops.gather_rows(qkv, [2]), (heads, t, hd))
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))),
                       1.0 / math.sqrt(hd))
    probs = ops.softmax(logits)                                   # (heads, T, T)
    out = ops.matmul(probs, v)                                    # (heads, T, hd)
    out = ops.reshape(ops.transpose(out, (1, 0, 2)), (t, dim))
    out = affine(out, params, f"{prefix}/proj")
    return out, (probs.data.copy() if want_probs else None)


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    return affine(ops.gelu(affine(x, params, f"{prefix}/mlp1")),
                  params, f"{prefix}/mlp2")


def block(x: Tensor, params: dict, prefix: str, heads: int,
          want_probs: bool = False):
    """Pre-norm transformer block; returns (output, attention probs or None)."""
    attn_out, probs = attention(layernorm(x, params, f"{prefix}/ln1"),
                                params, prefix, heads, want_probs)
    h = ops.add(x, attn_out)
    out = ops.add(h, mlp(layernorm(h, params, f"{prefix}/ln2"), params, prefix))
    return out, probs
