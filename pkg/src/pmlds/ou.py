"""Exact discretization of the Ornstein-Uhlenbeck process.

For dx = -b (x - q) dt + S^{1/2} dW the time-delta transition is Gaussian with

    mean(x)  = x - (1 - e^{-b dt}) (x - q)
    cov      = (1 - e^{-2 b dt}) / (2 b) * S

and the stationary law is N(q, S / (2 b)).  Everything here uses these closed
forms; there is deliberately no Euler-Maruyama path anywhere in the package.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .params import Gaussian, OuParams, sym_sqrt

__all__ = [
    "stationary",
    "transition",
    "transition_cov",
    "sample_transition",
    "sample_stationary",
    "log_transition_density",
    "log_stationary_density",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not (math.isfinite(dt) and dt >= 0.0):
        raise ConfigError(f"dt must be a finite non-negative real, got {dt!r}")
    return dt


def stationary(params: OuParams) -> Gaussian:
    """Stationary law N(q, S/(2b))."""
    return Gaussian(params.q, params.S / (2.0 * params.b))


def transition_cov(params: OuParams, dt: float) -> np.ndarray:
    """Exact transition covariance (1 - e^{-2 b dt}) / (2 b) * S."""
    dt = _check_dt(dt)
    lam = -math.expm1(-2.0 * params.b * dt) / (2.0 * params.b)
    return lam * params.S


def transition(params: OuParams, x: np.ndarray, dt: float) -> Gaussian:
    """Exact one-step transition law from state ``x`` over time ``dt``.

    ``dt = 0`` degenerates to a point mass at ``x`` (zero covariance).
    """
    dt = _check_dt(dt)
    x = np.asarray(x, dtype=float).reshape(-1)
    eps = -math.expm1(-params.b * dt)  # 1 - e^{-b dt}
    return Gaussian(x - eps * (x - params.q), transition_cov(params, dt))


def sample_transition(
    params: OuParams, x: np.ndarray, dt: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw exact transition samples; ``x`` may be a batch of shape (..., n)."""
    dt = _check_dt(dt)
    x = np.asarray(x, dtype=float)
    a = math.exp(-params.b * dt)
    mean = a * x + (1.0 - a) * params.q
    root = sym_sqrt(transition_cov(params, dt), "transition covariance")
    noise = rng.standard_normal(x.shape)
    return mean + noise @ root.T


def sample_stationary(
    params: OuParams, rng: np.random.Generator, size: int | tuple = ()
) -> np.ndarray:
    """Draw from the stationary law, output shape ``(*size, n)``."""
    if isinstance(size, int):
        size = (size,)
    root = sym_sqrt(params.S / (2.0 * params.b), "stationary covariance")
    noise = rng.standard_normal(tuple(size) + (params.dim,))
    return params.q + noise @ root.T


def _gauss_logpdf(resid: np.ndarray, cov: np.ndarray) -> np.ndarray:
    cf = scipy.linalg.cho_factor(cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    sol = scipy.linalg.cho_solve(cf, resid.reshape(-1, resid.shape[-1]).T)
    quad = np.sum(resid.reshape(-1, resid.shape[-1]).T * sol, axis=0).reshape(resid.shape[:-1])
    return -0.5 * (resid.shape[-1] * _LOG_2PI + logdet + quad)


def log_transition_density(
    params: OuParams, x_next: np.ndarray, x_prev: np.ndarray, dt: float
) -> np.ndarray:
    """Exact transition log-density; batches broadcast over leading axes."""
    dt = _check_dt(dt)
    if dt == 0.0:
        raise ConfigError("transition density is degenerate at dt = 0")
    x_next = np.asarray(x_next, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    a = math.exp(-params.b * dt)
    resid = x_next - (a * x_prev + (1.0 - a) * params.q)
    return _gauss_logpdf(resid, transition_cov(params, dt))


def log_stationary_density(params: OuParams, x: np.ndarray) -> np.ndarray:
    """Stationary log-density; batches broadcast over leading axes."""
    x = np.asarray(x, dtype=float)
    return _gauss_logpdf(x - params.q, params.S / (2.0 * params.b))
