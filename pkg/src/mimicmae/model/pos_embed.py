"""Fixed 2-d sinusoidal position embeddings (no learned positions anywhere)."""

from __future__ import annotations

import numpy as np


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    """Interleaved sin/cos features of frequency-scaled positions."""
    assert dim % 2 == 0, "1-d sincos needs an even dim"
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, h: int, w: int) -> np.ndarray:
    """(h*w, dim) table: half the channels encode the row, half the column.

    Row order matches token order (row-major over the grid).
    """
    assert dim % 4 == 0, "2-d sincos needs dim divisible by 4"
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    emb_y = sincos_1d(dim // 2, ys.reshape(-1))
    emb_x = sincos_1d(dim // 2, xs.reshape(-1))
    return np.concatenate([emb_y, emb_x], axis=1)
