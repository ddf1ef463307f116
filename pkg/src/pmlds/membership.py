"""Logistic-normal membership map.

The membership driver zhat in R^M is pushed onto the interior of the simplex by

    z_m = (exp(zhat_m) + 1/M) / (sum_n exp(zhat_n) + 1)

The map is evaluated with the common factor e^{-c}, c = max(max_m zhat_m, 0),
pulled out of numerator and denominator — algebraically identical (the map is
not shift-invariant, so this is a guard, not a reparametrization) but immune to
exp overflow for any finite input.
"""
from __future__ import annotations

import numpy as np

__all__ = ["to_simplex"]


def to_simplex(zhat: np.ndarray) -> np.ndarray:
    """Map driver values (..., M) to strictly positive simplex weights (..., M)."""
    zhat = np.asarray(zhat, dtype=float)
    if zhat.ndim == 0:
        raise ValueError("zhat must have at least one axis (the membership axis)")
    m = zhat.shape[-1]
    c = np.maximum(np.max(zhat, axis=-1, keepdims=True), 0.0)
    expz = np.exp(zhat - c)
    base = np.exp(-c)
    return (expz + base / m) / (np.sum(expz, axis=-1, keepdims=True) + base)
