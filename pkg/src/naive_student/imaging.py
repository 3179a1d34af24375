"""Deterministic bilinear resampling.

Resizing is separable and expressed as two small interpolation matrices, so
that ``resize(x) = Rh @ x @ Rw.T`` per channel. Output sample ``i`` reads the
source at the half-pixel-centered position

    src = (i + 0.5) * in_size / out_size - 0.5

clamped to ``[0, in_size - 1]``, and blends ``floor(src)`` and its right
neighbour with weight ``src - floor(src)``. The same matrices are used by the
network's upsampling layer, so its gradient is just the transposed product.
"""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _interp_matrix_cached(out_size: int, in_size: int) -> np.ndarray:
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    mat.setflags(write=False)
    return mat


def interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Return the ``(out_size, in_size)`` bilinear interpolation matrix."""
    if out_size < 1 or in_size < 1:
        raise ValueError(f"sizes must be positive, got {out_size} and {in_size}")
    return _interp_matrix_cached(int(out_size), int(in_size))


def resize_bilinear(x: np.ndarray, size) -> np.ndarray:
    """Bilinearly resize the two leading axes of ``x`` to ``size = (H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    out_h, out_w = size
    in_h, in_w = x.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return x.copy()
    rh = interp_matrix(out_h, in_h)
    rw = interp_matrix(out_w, in_w)
    c = int(np.prod(x.shape[2:], dtype=np.intp))
    rows = (rh @ x.reshape(in_h, in_w * c)).reshape(out_h, in_w, c)
    out = np.matmul(rw, rows)
    return out.reshape((out_h, out_w) + x.shape[2:])


def resize_nearest(x: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize of the two leading axes (for label grids)."""
    x = np.asarray(x)
    out_h, out_w = size
    in_h, in_w = x.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.intp), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.intp), in_w - 1)
    return x[rows][:, cols]


def scaled_size(shape, scale: float):
    """``(round(H * scale), round(W * scale))`` with round-half-to-even."""
    h, w = shape[:2]
    return int(round(h * scale)), int(round(w * scale))


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[:, ::-1])
