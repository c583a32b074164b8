"""Token-map export and minimal binary PGM/PPM I/O."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError


def interpolate_tokens(x: np.ndarray, length: int) -> np.ndarray:
    """Linear 1D resampling of ``(n, D)`` tokens to ``length`` rows, endpoints aligned."""
    n = x.shape[0]
    if n == length:
        return x.copy()
    if n == 1:
        return np.repeat(x, length, axis=0)
    src = np.linspace(0.0, n - 1, length)
    grid = np.arange(n)
    return np.stack([np.interp(src, grid, x[:, c]) for c in range(x.shape[1])], axis=1)


def token_map_export(x: np.ndarray, original_len: int,
                     channels: Optional[Sequence[int]] = None) -> np.ndarray:
    """Per-channel 2D maps of a token sequence, each min-max scaled to [0, 1].

    The sequence is stretched back to ``original_len`` tokens and reshaped
    row-major to a square grid. Returns ``(len(channels), side, side)``.
    """
    x = np.asarray(x, dtype=np.float64)
    side = math.isqrt(original_len)
    if side * side != original_len:
        raise ConfigError(f"original length {original_len} is not a perfect square")
    if x.shape[0] > original_len:
        raise ConfigError(f"{x.shape[0]} tokens exceed the original length {original_len}")
    channels = range(x.shape[1]) if channels is None else channels
    full = interpolate_tokens(x, original_len)
    maps = []
    for c in channels:
        if not 0 <= c < x.shape[1]:
            raise ConfigError(f"channel {c} out of range for {x.shape[1]} channels")
        m = full[:, c].reshape(side, side)
        lo, hi = m.min(), m.max()
        maps.append((m - lo) / (hi - lo) if hi > lo else np.zeros_like(m))
    return np.stack(maps) if maps else np.zeros((0, side, side))


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from a [0, 1] float map."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) into an ``(H, W, C)`` uint8 array."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(buf[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 is supported")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos + 1)
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} pixel bytes, found {data.size}")
    return data.reshape(h, w, c).copy()
