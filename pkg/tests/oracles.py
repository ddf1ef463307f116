"""Independent reference implementations used to gate the library's numerics.

Everything here is deliberately naive — dense linear algebra, explicit loops,
scalar formulas — so that agreement with the library is meaningful.  Nothing
in this file imports from pmlds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


# ---------------------------------------------------------------------------
# linear-Gaussian state space: Kalman filter and RTS smoother


@dataclass
class Lgssm:
    """x_t = A x_{t-1} + c + w,  w ~ N(0, Q);  y_t = H x_t + v,  v ~ N(0, R)."""

    A: np.ndarray  # (n, n)
    c: np.ndarray  # (n,)
    Q: np.ndarray  # (n, n)
    H: np.ndarray  # (d, n)
    R: np.ndarray  # (d, d)
    mu0: np.ndarray  # (n,)
    S0: np.ndarray  # (n, n)


def kalman_filter(model: Lgssm, ys: np.ndarray):
    """Returns (filtered means, filtered covs, one-step predictive logliks)."""
    n = model.mu0.shape[0]
    T = ys.shape[0]
    means = np.zeros((T, n))
    covs = np.zeros((T, n, n))
    logliks = np.zeros(T)
    mu_pred, s_pred = model.mu0, model.S0
    for t in range(T):
        # update
        s_obs = model.H @ s_pred @ model.H.T + model.R
        resid = ys[t] - model.H @ mu_pred
        sol = np.linalg.solve(s_obs, resid)
        gain = s_pred @ model.H.T @ np.linalg.inv(s_obs)
        mu = mu_pred + gain @ resid
        cov = s_pred - gain @ model.H @ s_pred
        sign, logdet = np.linalg.slogdet(s_obs)
        logliks[t] = -0.5 * (ys.shape[1] * math.log(2 * math.pi) + logdet + resid @ sol)
        means[t], covs[t] = mu, 0.5 * (cov + cov.T)
        # predict
        mu_pred = model.A @ mu + model.c
        s_pred = model.A @ cov @ model.A.T + model.Q
    return means, covs, logliks


def rts_smoother(model: Lgssm, means: np.ndarray, covs: np.ndarray):
    """Backward pass; returns (smoothed means, smoothed covs)."""
    T = means.shape[0]
    sm = means.copy()
    sc = covs.copy()
    for t in range(T - 2, -1, -1):
        s_pred = model.A @ covs[t] @ model.A.T + model.Q
        gain = covs[t] @ model.A.T @ np.linalg.inv(s_pred)
        mu_pred = model.A @ means[t] + model.c
        sm[t] = means[t] + gain @ (sm[t + 1] - mu_pred)
        sc[t] = covs[t] + gain @ (sc[t + 1] - s_pred) @ gain.T
        sc[t] = 0.5 * (sc[t] + sc[t].T)
    return sm, sc


# ---------------------------------------------------------------------------
# scalar OU helpers


def ou_decay(b: float, dt: float) -> float:
    return math.exp(-b * dt)


def ou_step_var(b: float, s: float, dt: float) -> float:
    return (1.0 - math.exp(-2.0 * b * dt)) / (2.0 * b) * s


def quadrature_marginal_mean(
    prior_mean: float, prior_var: float, coeff: float, y: np.ndarray, sigma2: np.ndarray,
    n_grid: int = 40001,
) -> float:
    """∫ N(x; m, v) · Π_j N(y_j; coeff_j x, σ_j²) dx by trapezoid rule.

    ``coeff`` may be scalar (d=1) or a length-d vector of emission
    coefficients; the integrand support is covered to ±12 posterior sds.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    coeff = np.broadcast_to(np.asarray(coeff, dtype=float), y.shape)
    # posterior moments to center the grid
    prec = 1.0 / prior_var + np.sum(coeff * coeff / sigma2)
    mean_post = (prior_mean / prior_var + np.sum(coeff * y / sigma2)) / prec
    sd = math.sqrt(1.0 / prec)
    lo = min(mean_post - 12 * sd, prior_mean - 12 * math.sqrt(prior_var))
    hi = max(mean_post + 12 * sd, prior_mean + 12 * math.sqrt(prior_var))
    xs = np.linspace(lo, hi, n_grid)
    log_prior = -0.5 * math.log(2 * math.pi * prior_var) - (xs - prior_mean) ** 2 / (2 * prior_var)
    log_lik = np.zeros_like(xs)
    for j in range(y.shape[0]):
        log_lik += (
            -0.5 * math.log(2 * math.pi * sigma2[j])
            - (y[j] - coeff[j] * xs) ** 2 / (2 * sigma2[j])
        )
    vals = np.exp(log_prior + log_lik)
    return float(np.trapezoid(vals, xs))


# ---------------------------------------------------------------------------
# sufficient statistics: naive double loops


def naive_ou_stats(paths: np.ndarray) -> dict:
    """paths (n_draws, L, n): plain-python averages of the seven statistics."""
    n_draws, L, n = paths.shape
    phi1 = np.zeros(n)
    phi2 = np.zeros((n, n))
    phi3 = np.zeros(n)
    phi4 = np.zeros(n)
    phi5 = np.zeros((n, n))
    phi6 = np.zeros((n, n))
    phi7 = np.zeros((n, n))
    for i in range(n_draws):
        phi1 += paths[i, 0]
        phi2 += np.outer(paths[i, 0], paths[i, 0])
        for t in range(1, L):
            prev = paths[i, t - 1]
            diff = paths[i, t] - prev
            phi3 += prev
            phi4 += diff
            phi5 += np.outer(prev, prev)
            phi6 += np.outer(diff, prev)
            phi7 += np.outer(diff, diff)
    return {
        "phi1": phi1 / n_draws,
        "phi2": phi2 / n_draws,
        "phi3": phi3 / n_draws,
        "phi4": phi4 / n_draws,
        "phi5": phi5 / n_draws,
        "phi6": phi6 / n_draws,
        "phi7": phi7 / n_draws,
    }


def naive_emission_stats(z: np.ndarray, x: np.ndarray, ys: np.ndarray) -> dict:
    """z (n, L, M), x (n, L, M*K), ys (L, d): loops over everything."""
    n_draws, L, m = z.shape
    mk = x.shape[-1]
    k = mk // m
    d = ys.shape[1]
    a = np.zeros((d, mk))
    b = np.zeros((mk, mk))
    for i in range(n_draws):
        for t in range(L):
            scaled = np.repeat(z[i, t], k) * x[i, t]
            a += np.outer(ys[t], scaled)
            b += np.outer(scaled, scaled)
    return {"A": a / n_draws, "B": b / n_draws, "ysq": (ys**2).sum(axis=0)}


def exact_stationary_ou_stats(b: float, q, S, dt: float, L: int) -> dict:
    """Exact expectations of the seven statistics under the stationary law.

    For a stationary OU with decay a = e^{-b dt} and stationary covariance
    V = S/(2b): E[x_t x_t^T] = V + qq^T, E[x_t x_{t-1}^T] = aV + qq^T.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = q.shape[0]
    a = math.exp(-b * dt)
    V = S / (2.0 * b)
    qq = np.outer(q, q)
    second = V + qq  # E[x x^T], any t
    cross = a * V + qq  # E[x_t x_{t-1}^T]
    return {
        "phi1": q.copy(),
        "phi2": second.copy(),
        "phi3": (L - 1) * q,
        "phi4": np.zeros(n),
        "phi5": (L - 1) * second,
        "phi6": (L - 1) * (cross - second),
        "phi7": (L - 1) * (2.0 * second - cross - cross.T),
    }


# ---------------------------------------------------------------------------
# M-step oracles (K = 1 scalar forms)


def q_hat_scalar(stats: dict, L: int, b: float, q: float, s: float, dt: float) -> float:
    """Expected OU log-density from scalar statistics, written out longhand."""
    a = math.exp(-b * dt)
    eps = 1.0 - a
    lam = (1.0 - a * a) / (2.0 * b)
    p1 = float(np.ravel(stats["phi1"])[0])
    p2 = float(np.ravel(stats["phi2"])[0])
    p3 = float(np.ravel(stats["phi3"])[0])
    p4 = float(np.ravel(stats["phi4"])[0])
    p5 = float(np.ravel(stats["phi5"])[0])
    p6 = float(np.ravel(stats["phi6"])[0])
    p7 = float(np.ravel(stats["phi7"])[0])
    # stationary term: x1 ~ N(q, s/(2b))
    e_sq1 = p2 - 2.0 * p1 * q + q * q
    out = -0.5 * math.log(2 * math.pi * s / (2 * b)) - (b / s) * e_sq1
    # transitions: x_t - a x_{t-1} - eps q = diff + eps (x_{t-1} - q)
    e_res = p7 + 2.0 * eps * (p6 - p4 * q) + eps * eps * (p5 - 2.0 * p3 * q + (L - 1) * q * q)
    out += -0.5 * (L - 1) * math.log(2 * math.pi * lam * s) - e_res / (2.0 * lam * s)
    return out


def maximize_q_hat_scalar(stats: dict, L: int, dt: float, x0=(0.5, 0.0, 1.0)):
    """Derivative-free maximization of q_hat_scalar over (b, q, s)."""

    def neg(theta):
        log_b, q, log_s = theta
        return -q_hat_scalar(stats, L, math.exp(log_b), q, math.exp(log_s), dt)

    res = minimize(
        neg,
        x0=np.array([math.log(x0[0]), x0[1], math.log(x0[2])]),
        method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000, "maxfev": 20000},
    )
    log_b, q, log_s = res.x
    return math.exp(log_b), q, math.exp(log_s)


def naive_projection_rows(a: np.ndarray, b: np.ndarray, prior_variance) -> np.ndarray:
    """Row-by-row solve of P_j = A_j (B + I/v)^{-1} with dense inverses."""
    mk = b.shape[0]
    reg = b.copy()
    if prior_variance is not None:
        reg = reg + np.eye(mk) / prior_variance
    out = np.zeros_like(a)
    for j in range(a.shape[0]):
        out[j] = np.linalg.solve(reg.T, a[j])
    return out


def naive_sigmas(a, b, ysq, p_full, L: int) -> np.ndarray:
    d = a.shape[0]
    out = np.zeros(d)
    for j in range(d):
        out[j] = (ysq[j] - 2.0 * a[j] @ p_full[j] + p_full[j] @ b @ p_full[j]) / L
    return np.maximum(out, 1e-12)
