"""Batched small-matrix kernels.

The particle filter factorizes one tiny (M*K x M*K) SPD matrix per particle per
step.  numpy's batched ``linalg`` carries per-call overhead that dominates at
these sizes, so the Cholesky and the triangular solves are hand-rolled: python
loops run over the (small) matrix dimension while every operation is vectorized
across the batch.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericalError

__all__ = [
    "chol_batched",
    "solve_lower_batched",
    "solve_upper_batched",
    "logdet_from_chol",
]


def chol_batched(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a batch of SPD matrices, shape (..., n, n)."""
    n = a.shape[-1]
    L = np.zeros_like(a)
    for j in range(n):
        pivot = a[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        if not np.all(pivot > 0.0):
            bad = float(np.min(pivot))
            raise NumericalError(
                f"batched Cholesky hit a non-positive pivot ({bad:.3e}) at column {j}"
            )
        piv = np.sqrt(pivot)
        L[..., j, j] = piv
        if j + 1 < n:
            off = a[..., j + 1 :, j] - np.einsum(
                "...ik,...k->...i", L[..., j + 1 :, :j], L[..., j, :j]
            )
            L[..., j + 1 :, j] = off / piv[..., None]
    return L


def solve_lower_batched(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b with L batched lower-triangular, b of shape (..., n)."""
    n = b.shape[-1]
    x = np.zeros_like(b)
    for i in range(n):
        acc = b[..., i]
        if i:
            acc = acc - np.einsum("...k,...k->...", L[..., i, :i], x[..., :i])
        x[..., i] = acc / L[..., i, i]
    return x


def solve_upper_batched(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L^T x = b with L batched lower-triangular, b of shape (..., n)."""
    n = b.shape[-1]
    x = np.zeros_like(b)
    for i in reversed(range(n)):
        acc = b[..., i]
        if i + 1 < n:
            acc = acc - np.einsum("...k,...k->...", L[..., i + 1 :, i], x[..., i + 1 :])
        x[..., i] = acc / L[..., i, i]
    return x


def logdet_from_chol(L: np.ndarray) -> np.ndarray:
    """log det(A) for A = L L^T, from the batched lower factor."""
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
