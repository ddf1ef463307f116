"""Mixed-membership linear-Gaussian emission.

    y_t = sum_m z_{m,t} P(m) x_t(m) + v_t,   v_t ~ N(0, diag(sigma2))

which is y_t = W_t X_t + v_t with W_t = [z_1 P(1) ... z_M P(M)] of shape
(d, M*K) and X_t the stacked expert states.  The heavy paths never materialize
W_t per particle; they scale the stacked state by the memberships instead.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .params import StaticParams

__all__ = ["assemble_w", "emission_mean", "log_likelihood", "sample_observation"]

_LOG_2PI = math.log(2.0 * math.pi)


def _check_z(z: np.ndarray, m: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != m:
        raise ConfigError(f"membership vector has length {z.shape[-1]}, expected {m}")
    return z


def assemble_w(statics: StaticParams, z: np.ndarray) -> np.ndarray:
    """Explicit observation matrix W = [z_1 P(1) ... z_M P(M)], shape (d, M*K).

    Reference implementation for a single membership vector; the filter and
    prediction paths use the membership-scaled-state form instead.
    """
    z = _check_z(z, statics.M).reshape(-1)
    return np.concatenate([z[m] * statics.P[m] for m in range(statics.M)], axis=1)


def _scaled_state(z: np.ndarray, x: np.ndarray, m: int, k: int) -> np.ndarray:
    # (..., M*K): each expert block of x multiplied by its membership weight
    return (z[..., :, None] * x.reshape(x.shape[:-1] + (m, k))).reshape(x.shape)


def emission_mean(statics: StaticParams, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Noise-free emission mean W X for batched z (..., M) and x (..., M*K)."""
    z = _check_z(z, statics.M)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != statics.M * statics.K:
        raise ConfigError(
            f"state vector has length {x.shape[-1]}, expected {statics.M * statics.K}"
        )
    return _scaled_state(z, x, statics.M, statics.K) @ statics.p_full().T


def log_likelihood(
    y: np.ndarray, statics: StaticParams, z: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """Gaussian observation log-density log N(y; W X, diag(sigma2)).

    Batches broadcast: the result shape is the broadcast of the leading axes
    of ``z``/``x`` against those of ``y``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != statics.d:
        raise ConfigError(f"observation has length {y.shape[-1]}, expected {statics.d}")
    resid = y - emission_mean(statics, z, x)
    quad = np.sum(resid * resid / statics.sigma2, axis=-1)
    logdet = float(np.sum(np.log(statics.sigma2)))
    return -0.5 * (statics.d * _LOG_2PI + logdet + quad)


def sample_observation(
    statics: StaticParams, z: np.ndarray, x: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw y ~ N(W X, diag(sigma2)); batched like :func:`emission_mean`."""
    mean = emission_mean(statics, z, x)
    return mean + rng.standard_normal(mean.shape) * np.sqrt(statics.sigma2)
