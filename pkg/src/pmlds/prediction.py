"""Predictive-posterior sampling and one-step-ahead scoring.

Both operations start from a filtering cloud: draws select a particle by
weight, then push the latent pair (zhat, X) forward through exact OU
transitions.  The resulting law of future observables is a weighted mixture of
Gaussians; everything here summarizes it by plain Monte Carlo.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .emission import emission_mean, log_likelihood
from .errors import ConfigError, DataError, DegenerateCloudError
from .membership import to_simplex
from .ou import sample_transition
from .params import StaticParams
from .smc import ParticleCloud

__all__ = ["PredictiveSummary", "predict", "one_step_pred_loglik", "DEFAULT_LEVELS"]

DEFAULT_LEVELS = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-step marginal summary of the predictive posterior over observables.

    ``mean`` averages the noise-free emission mean over draws; ``quantiles``
    are empirical per-coordinate quantiles of draws *with* emission noise, so
    bands reflect the full observation law.
    """

    horizon: int
    mean: np.ndarray  # (T, d)
    quantiles: dict[float, np.ndarray]  # level -> (T, d)
    samples_kept: int

    def band_width(self, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
        """Mean over coordinates of the (lo, hi) band width at each step, (T,)."""
        return np.mean(self.quantiles[hi] - self.quantiles[lo], axis=1)


def _select_particles(
    cloud: ParticleCloud, n_draws: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    w = cloud.weights()
    if not np.all(np.isfinite(w)):
        raise DegenerateCloudError("cloud weights are not finite")
    idx = rng.choice(len(cloud), size=n_draws, p=w)
    return cloud.zhat[idx].copy(), cloud.X[idx].copy()


def _propagate(
    statics: StaticParams, zhat: np.ndarray, x: np.ndarray, dt: float, rng
) -> tuple[np.ndarray, np.ndarray]:
    # Draw order per step: membership driver first, then each expert in turn.
    zhat = sample_transition(statics.ou_z, zhat, dt, rng)
    k = statics.K
    for m, ou in enumerate(statics.ou_x):
        x[:, m * k : (m + 1) * k] = sample_transition(ou, x[:, m * k : (m + 1) * k], dt, rng)
    return zhat, x


def predict(
    cloud: ParticleCloud,
    statics: StaticParams,
    horizon: int,
    dt: float,
    rng: np.random.Generator,
    n_draws: int = 500,
    levels: tuple[float, ...] = DEFAULT_LEVELS,
) -> PredictiveSummary:
    """Monte Carlo predictive posterior over the next ``horizon`` observations.

    Memory is O(horizon * d): quantiles and means are reduced step by step
    rather than materializing all draws.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    levels = tuple(float(l) for l in levels)
    if any(not 0.0 < l < 1.0 for l in levels):
        raise ConfigError(f"quantile levels must lie in (0, 1), got {levels}")
    d = statics.d
    zhat, x = _select_particles(cloud, n_draws, rng)
    mean = np.empty((horizon, d))
    quants = {l: np.empty((horizon, d)) for l in levels}
    sig = np.sqrt(statics.sigma2)
    for t in range(horizon):
        zhat, x = _propagate(statics, zhat, x, dt, rng)
        mu = emission_mean(statics, to_simplex(zhat), x)  # (n_draws, d)
        mean[t] = mu.mean(axis=0)
        noisy = mu + rng.standard_normal(mu.shape) * sig
        q = np.quantile(noisy, levels, axis=0)
        for i, l in enumerate(levels):
            quants[l][t] = q[i]
    return PredictiveSummary(horizon=horizon, mean=mean, quantiles=quants, samples_kept=n_draws)


def one_step_pred_loglik(
    cloud: ParticleCloud,
    y_next: np.ndarray,
    statics: StaticParams,
    dt: float,
    rng: np.random.Generator,
    n_draws: int = 500,
) -> float:
    """log (1/n) sum_i p(y_next | propagated particle i), computed in log space.

    Returns -inf with a warning when every propagated draw underflows.
    """
    y_next = np.asarray(y_next, dtype=float)
    if y_next.shape != (statics.d,):
        raise DataError(f"observation must have shape ({statics.d},), got {y_next.shape}")
    zhat, x = _select_particles(cloud, n_draws, rng)
    zhat, x = _propagate(statics, zhat, x, dt, rng)
    logliks = log_likelihood(y_next, statics, to_simplex(zhat), x)
    out = float(logsumexp(logliks) - np.log(n_draws))
    if np.isneginf(out):
        warnings.warn(
            "all predictive draws underflowed; observation lies far outside the "
            "predictive posterior",
            RuntimeWarning,
            stacklevel=2,
        )
    return out
