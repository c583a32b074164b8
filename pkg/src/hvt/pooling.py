"""Token-axis pooling: output lengths and window index tables."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import PoolingError
from .tensor import Tensor, window_max


def pooled_length(n: int, k: int = 3, s: int = 2, pad: int = 0) -> int:
    """Output length of a 1D pooling window: ``floor((n + 2*pad - k) / s) + 1``."""
    if n < 1 or k < 1 or s < 1 or pad < 0:
        raise PoolingError(f"invalid pooling arguments n={n} k={k} s={s} pad={pad}")
    if n + 2 * pad < k:
        raise PoolingError(f"sequence of {n} tokens (pad {pad}) is shorter than kernel {k}")
    return (n + 2 * pad - k) // s + 1


def pooled_length_2d(n: int, k: int = 3, s: int = 2, pad: int = 0) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise PoolingError(f"2D pooling needs a square token count, got {n}")
    return pooled_length(side, k, s, pad) ** 2


@lru_cache(maxsize=256)
def windows_1d(n: int, k: int, s: int, pad: int) -> np.ndarray:
    """Source indexes for each output position, ``-1`` marking padding."""
    n_out = pooled_length(n, k, s, pad)
    start = np.arange(n_out)[:, None] * s - pad
    idx = start + np.arange(k)[None, :]
    idx[(idx < 0) | (idx >= n)] = -1
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=256)
def windows_2d(n: int, k: int, s: int, pad: int) -> np.ndarray:
    """Windows over a row-major ``sqrt(n) x sqrt(n)`` grid, flattened to tokens."""
    side = math.isqrt(n)
    if side * side != n:
        raise PoolingError(f"2D pooling needs a square token count, got {n}")
    w = windows_1d(side, k, s, pad)
    rows = w[:, None, :, None]
    cols = w[None, :, None, :]
    flat = rows * side + cols
    flat = np.where((rows < 0) | (cols < 0), -1, flat)
    out = flat.reshape(len(w) * len(w), k * k)
    out.setflags(write=False)
    return out


def pool_tokens_2d(x: Tensor, k: int = 3, s: int = 2, pad: int = 0) -> Tensor:
    """2D max pooling of a square token grid; input ``(..., n, D)``."""
    return window_max(x, windows_2d(x.shape[-2], k, s, pad))
