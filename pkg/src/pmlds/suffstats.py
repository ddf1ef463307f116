"""Monte Carlo sufficient statistics for the online EM step.

All statistics are expectations over smoothed latent trajectories of
block-level sums; the online update blends consecutive blocks' statistics with
the decreasing gain gamma_k = k**(-a).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError
from .membership import to_simplex
from .smc import SmoothedPaths

__all__ = [
    "OuSuffStats",
    "EmissionSuffStats",
    "SuffStats",
    "gamma_schedule",
    "blend",
    "blend_at",
]


def gamma_schedule(k: int, a: float) -> float:
    """Blending gain gamma_k = k**(-a); k is 1-based so gamma_1 = 1."""
    if k < 1:
        raise ConfigError(f"iteration index must be >= 1, got {k}")
    return float(k) ** (-a)


@dataclass(frozen=True)
class OuSuffStats:
    """Expected OU statistics of one block of length L (dimension n).

    phi1 =  E x_1                      phi2 = E x_1 x_1^T
    phi3 =  E sum_{t=2}^L x_{t-1}      phi4 = E sum (x_t - x_{t-1})
    phi5 =  E sum x_{t-1} x_{t-1}^T    phi6 = E sum (x_t - x_{t-1}) x_{t-1}^T
    phi7 =  E sum (x_t - x_{t-1})(x_t - x_{t-1})^T
    """

    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    phi4: np.ndarray
    phi5: np.ndarray
    phi6: np.ndarray
    phi7: np.ndarray
    block_len: int

    @classmethod
    def from_paths(cls, x: np.ndarray, block_len: int | None = None) -> "OuSuffStats":
        """Monte Carlo averages from trajectories of shape (n_draws, L, n)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1] < 2:
            raise DataError(f"paths must be (n_draws, L>=2, n), got shape {x.shape}")
        n_draws = x.shape[0]
        first = x[:, 0, :]
        dx = np.diff(x, axis=1)
        prev = x[:, :-1, :]
        return cls(
            phi1=first.mean(axis=0),
            phi2=first.T @ first / n_draws,
            phi3=prev.sum(axis=1).mean(axis=0),
            phi4=dx.sum(axis=1).mean(axis=0),
            phi5=np.einsum("nti,ntj->ij", prev, prev) / n_draws,
            phi6=np.einsum("nti,ntj->ij", dx, prev) / n_draws,
            phi7=np.einsum("nti,ntj->ij", dx, dx) / n_draws,
            block_len=block_len if block_len is not None else x.shape[1],
        )

    def blend_with(self, new: "OuSuffStats", gamma: float) -> "OuSuffStats":
        if self.block_len != new.block_len:
            raise ConfigError("cannot blend statistics of different block lengths")
        g, h = gamma, 1.0 - gamma
        return OuSuffStats(
            *(h * getattr(self, f) + g * getattr(new, f) for f in _PHI_FIELDS),
            block_len=self.block_len,
        )


_PHI_FIELDS = ("phi1", "phi2", "phi3", "phi4", "phi5", "phi6", "phi7")


@dataclass(frozen=True)
class EmissionSuffStats:
    """Expected emission statistics of one block.

    With s_t the membership-scaled stacked state (z repeated per expert block
    times X): A = E sum_t y_t s_t^T (d, M*K); B = E sum_t s_t s_t^T (M*K, M*K);
    ysq_j = sum_t y_{t,j}^2 (data-only, no expectation needed).
    """

    A: np.ndarray
    B: np.ndarray
    ysq: np.ndarray
    block_len: int

    @classmethod
    def from_paths(
        cls, z: np.ndarray, x: np.ndarray, ys: np.ndarray
    ) -> "EmissionSuffStats":
        """z (n_draws, L, M) simplex weights, x (n_draws, L, M*K), ys (L, d)."""
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        ys = np.asarray(ys, dtype=float)
        n_draws, el, m = z.shape
        k = x.shape[-1] // m
        if x.shape != (n_draws, el, m * k) or ys.shape[0] != el:
            raise DataError("inconsistent shapes for emission statistics")
        scaled = (np.repeat(z, k, axis=-1) * x).reshape(n_draws * el, m * k)
        a = ys.T @ scaled.reshape(n_draws, el, m * k).mean(axis=0)
        b = scaled.T @ scaled / n_draws
        return cls(A=a, B=0.5 * (b + b.T), ysq=np.sum(ys * ys, axis=0), block_len=el)

    def blend_with(self, new: "EmissionSuffStats", gamma: float) -> "EmissionSuffStats":
        if self.block_len != new.block_len:
            raise ConfigError("cannot blend statistics of different block lengths")
        g, h = gamma, 1.0 - gamma
        return EmissionSuffStats(
            A=h * self.A + g * new.A,
            B=h * self.B + g * new.B,
            ysq=h * self.ysq + g * new.ysq,
            block_len=self.block_len,
        )


@dataclass(frozen=True)
class SuffStats:
    """Bundle of all blended statistics: per-expert OU, driver OU, emission."""

    ou_x: tuple
    ou_z: OuSuffStats
    emission: EmissionSuffStats
    block_len: int

    @classmethod
    def from_smoothed(
        cls, paths: SmoothedPaths, ys: np.ndarray, config: ModelConfig
    ) -> "SuffStats":
        ys = np.asarray(ys, dtype=float)
        m, k = config.M, config.K
        ou_x = tuple(
            OuSuffStats.from_paths(paths.X[:, :, j * k : (j + 1) * k]) for j in range(m)
        )
        ou_z = OuSuffStats.from_paths(paths.zhat)
        emission = EmissionSuffStats.from_paths(to_simplex(paths.zhat), paths.X, ys)
        return cls(ou_x, ou_z, emission, block_len=paths.X.shape[1])


def blend(prev: SuffStats | None, new: SuffStats, k: int, gamma_exponent: float) -> SuffStats:
    """Online blend Phi_k = (1 - gamma_k) Phi_{k-1} + gamma_k Phi_block.

    At k = 1 (or with no previous statistics) the new block is taken whole.
    """
    return blend_at(prev, new, gamma_schedule(k, gamma_exponent))


def blend_at(prev: SuffStats | None, new: SuffStats, gamma: float) -> SuffStats:
    """Convex blend with an explicit step size instead of the k^-a schedule."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"blend step size must lie in [0, 1], got {gamma!r}")
    if prev is None or gamma >= 1.0:
        return new
    if gamma == 0.0:
        return prev
    if prev.block_len != new.block_len:
        raise ConfigError("cannot blend statistics of different block lengths")
    return SuffStats(
        ou_x=tuple(p.blend_with(q, gamma) for p, q in zip(prev.ou_x, new.ou_x)),
        ou_z=prev.ou_z.blend_with(new.ou_z, gamma),
        emission=prev.emission.blend_with(new.emission, gamma),
        block_len=prev.block_len,
    )
