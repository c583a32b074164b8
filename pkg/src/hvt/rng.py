"""Seeded random streams.

Every consumer draws from its own Philox (counter-based) stream, derived
from the run seed by a fixed stream id, so adding draws in one place never
shifts another.
"""

from __future__ import annotations

import numpy as np

STREAM_DATA = 0
STREAM_INIT = 1
STREAM_TRAIN = 2


def make_rng(seed: int, stream: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's full state."""
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": v.dtype.str, "values": [int(x) for x in v.ravel()]}
        if isinstance(v, np.integer):
            return int(v)
        return v
    return plain(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    def arrays(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["values"], dtype=np.dtype(v["__array__"]))
            return {k: arrays(x) for k, x in v.items()}
        return v
    st = arrays(state)
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)
