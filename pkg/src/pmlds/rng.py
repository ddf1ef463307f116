"""Deterministic random-stream management.

Every stochastic component draws from a generator obtained through
:func:`seeded_stream`.  Streams are addressed by the root seed plus an integer
path (mapped onto ``SeedSequence`` spawn keys), so identical ``(seed, path)``
always reproduces identical draws, distinct paths are statistically
independent, and no component's consumption pattern can perturb another's.
"""
from __future__ import annotations

import numpy as np

__all__ = ["seeded_stream"]

_UINT64_MAX = 2**64 - 1


def seeded_stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *path)``.

    Parameters
    ----------
    seed:
        Root seed, a non-negative integer fitting in 64 bits.
    path:
        Zero or more non-negative integers naming a sub-stream
        (e.g. ``(purpose, block_index)``).
    """
    seed = int(seed)
    if not 0 <= seed <= _UINT64_MAX:
        raise ValueError(f"seed must be a uint64, got {seed}")
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError(f"stream path entries must be non-negative, got {key}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
