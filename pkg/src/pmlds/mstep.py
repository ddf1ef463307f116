"""M-step parameter updates from blended sufficient statistics.

OU parameters maximize the expected complete-data log-density

    Q(b, q, S) = -(L/2) ln|S| + (n/2) ln(2b) - ((L-1)n/2) ln lam
                 - b tr(S^{-1} H) - tr(S^{-1} G) / (2 lam)   (+ constants)

with eps = 1 - e^{-b dt}, lam = (1 - e^{-2 b dt})/(2b) = eps (2 - eps)/(2b),

    H(q)      = phi2 - phi1 q^T - q phi1^T + q q^T
    J(q)      = phi6 - phi4 q^T
    kap(q)    = phi5 - phi3 q^T - q phi3^T + (L-1) q q^T
    G(q, eps) = phi7 + eps (J + J^T) + eps^2 kap

via cyclic exact coordinate maximization: closed form in q given b, closed form
in S given (b, q), and a bounded 1-D maximization over ln b.  Every sweep is an
exact coordinate argmax, so Q never decreases.

The projection update solves ridge-regularized normal equations once for all d
rows; observation variances follow in closed form with a floor of 1e-12.
"""
from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from .errors import ConfigError, FixedPointError, NumericalError
from .params import OuParams
from .suffstats import EmissionSuffStats, OuSuffStats

__all__ = [
    "VAR_FLOOR",
    "PROJECTION_PRIOR_VARIANCE",
    "q_hat_ou",
    "update_ou_params",
    "q_hat_emission",
    "update_projections",
    "update_sigmas",
    "enforcement_counts",
]

VAR_FLOOR = 1e-12
PROJECTION_PRIOR_VARIANCE = 100.0
_B_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)

# Times the OU update had to force its output back inside the parameter space
# (rate at the floor, diffusion nudged onto the PD cone).  Callers diff this
# across an update to report enforcement events.
_ENFORCEMENTS = {"b_floor": 0, "s_repair": 0}


def enforcement_counts() -> dict:
    """Cumulative constraint-enforcement events since import, by kind."""
    return dict(_ENFORCEMENTS)


def _eps_lam(b: float, dt: float) -> tuple[float, float]:
    eps = -math.expm1(-b * dt)
    return eps, eps * (2.0 - eps) / (2.0 * b)


def _h_of_q(stats: OuSuffStats, q: np.ndarray) -> np.ndarray:
    return stats.phi2 - np.outer(stats.phi1, q) - np.outer(q, stats.phi1) + np.outer(q, q)


def _g_parts(stats: OuSuffStats, q: np.ndarray):
    el = stats.block_len
    j = stats.phi6 - np.outer(stats.phi4, q)
    kap = (
        stats.phi5
        - np.outer(stats.phi3, q)
        - np.outer(q, stats.phi3)
        + (el - 1) * np.outer(q, q)
    )
    return j + j.T, kap


def q_hat_ou(stats: OuSuffStats, b: float, q: np.ndarray, S: np.ndarray, dt: float) -> float:
    """Expected complete-data OU log-density at (b, q, S), constants included."""
    n = stats.phi1.shape[0]
    el = stats.block_len
    q = np.asarray(q, dtype=float).reshape(n)
    eps, lam = _eps_lam(float(b), dt)
    jsym, kap = _g_parts(stats, q)
    g = stats.phi7 + eps * jsym + eps * eps * kap
    h = _h_of_q(stats, q)
    cf = scipy.linalg.cho_factor(S, lower=True)
    ld_s = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    tr_h = float(np.trace(scipy.linalg.cho_solve(cf, h)))
    tr_g = float(np.trace(scipy.linalg.cho_solve(cf, g)))
    return (
        -0.5 * el * n * _LOG_2PI
        - 0.5 * el * ld_s
        + 0.5 * n * math.log(2.0 * b)
        - 0.5 * (el - 1) * n * math.log(lam)
        - b * tr_h
        - tr_g / (2.0 * lam)
    )


def _update_q(stats: OuSuffStats, b: float, dt: float) -> np.ndarray:
    el = stats.block_len
    eps, lam = _eps_lam(b, dt)
    num = 2.0 * b * stats.phi1 + (eps / lam) * (stats.phi4 + eps * stats.phi3)
    den = 2.0 * b + eps * eps * (el - 1) / lam
    return num / den


def _update_s(stats: OuSuffStats, b: float, q: np.ndarray, dt: float) -> np.ndarray:
    el = stats.block_len
    eps, lam = _eps_lam(b, dt)
    jsym, kap = _g_parts(stats, q)
    g = stats.phi7 + eps * jsym + eps * eps * kap
    s = (2.0 * b * _h_of_q(stats, q) + g / lam) / el
    return 0.5 * (s + s.T)


def _update_b(
    stats: OuSuffStats, q: np.ndarray, S: np.ndarray, dt: float, b_hi: float, b_prev: float
) -> float:
    # Precompute the traces so the 1-D search works on scalars only.
    n = stats.phi1.shape[0]
    el = stats.block_len
    cf = scipy.linalg.cho_factor(S, lower=True)
    jsym, kap = _g_parts(stats, q)
    tr_h = float(np.trace(scipy.linalg.cho_solve(cf, _h_of_q(stats, q))))
    tr_7 = float(np.trace(scipy.linalg.cho_solve(cf, stats.phi7)))
    tr_j = float(np.trace(scipy.linalg.cho_solve(cf, jsym)))
    tr_k = float(np.trace(scipy.linalg.cho_solve(cf, kap)))

    def neg_q(log_b: float) -> float:
        b = math.exp(log_b)
        eps, lam = _eps_lam(b, dt)
        val = (
            0.5 * n * math.log(2.0 * b)
            - 0.5 * (el - 1) * n * math.log(lam)
            - b * tr_h
            - (tr_7 + eps * tr_j + eps * eps * tr_k) / (2.0 * lam)
        )
        return -val

    res = minimize_scalar(
        neg_q,
        bounds=(math.log(_B_FLOOR), math.log(b_hi)),
        method="bounded",
        options={"xatol": 1e-12},
    )
    # The bounded search terminates within ~sqrt(eps)*|log b| of the optimum,
    # so near a fixed point it returns values dithering in a ~1e-7 relative
    # band.  Keep the previous rate unless the candidate improves its own 1-D
    # slice by more than evaluation noise: ascent stays monotone and the
    # iteration reaches an exact fixed point instead of wandering inside the
    # optimizer's tolerance floor.
    prev_val = neg_q(math.log(b_prev))
    if neg_q(float(res.x)) < prev_val - 1e-12 * (1.0 + abs(prev_val)):
        return math.exp(float(res.x))
    return b_prev


def update_ou_params(
    stats: OuSuffStats,
    dt: float,
    init: OuParams | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> OuParams:
    """Maximize the expected OU log-density by fixed-point iteration.

    Each sweep is an exact coordinate argmax — closed form in q given b,
    closed form in S given (b, q), bounded 1-D search over ln b — so the
    objective never decreases.  With ``init`` (the previous parameters during
    online EM) the sweep starts from the current rate and the result is the
    stationary point reachable from there, which keeps successive online
    estimates continuous instead of teleporting between near-tied optima.

    Without ``init``, and as a rescue when the warm-started sweep stalls, the
    rate comes from maximizing the exact profile g(b) = max_{q,S} Q(b, q, S):
    for fixed b the joint optimum over (q, S) is closed-form (the location
    update does not involve S), so g is a genuine one-dimensional function
    and a bounded search on ln b locates its maximizer directly — including
    boundary-ridge cases (white-noise-like statistics push b toward the fast
    corner, unit-root statistics toward the floor) where coordinate ascent
    crawls.  Cyclic sweeps then verify the fixed point.

    Raises :class:`FixedPointError` carrying the last iterate if no sweep
    stabilizes to ``tol`` (relative) within the iteration budget.
    """
    dt = float(dt)
    if not (math.isfinite(dt) and dt > 0):
        raise ConfigError(f"dt must be positive, got {dt!r}")
    n = stats.phi1.shape[0]
    b_hi = 700.0 / dt  # e^{-b dt} underflows beyond; effectively instantaneous mixing

    def profile(log_b: float) -> float:
        b_try = math.exp(log_b)
        q_try = _update_q(stats, b_try, dt)
        s_try = _update_s(stats, b_try, q_try, dt)
        try:
            return q_hat_ou(stats, b_try, q_try, s_try, dt)
        except (NumericalError, np.linalg.LinAlgError):
            return -math.inf  # S(b) left the PD cone: steer the search away

    def profile_argmax() -> float:
        res = minimize_scalar(
            lambda t: -profile(t),
            bounds=(math.log(_B_FLOOR), math.log(b_hi)),
            method="bounded",
            options={"xatol": 1e-10},
        )
        return math.exp(float(res.x))

    if init is not None:
        b = min(max(float(init.b), _B_FLOOR), b_hi)
        rescued = False
    else:
        b = profile_argmax()
        rescued = True

    last = None
    sweeps_left = max_iter
    while sweeps_left > 0:
        sweeps_left -= 1
        q_new = _update_q(stats, b, dt)
        s_new = _update_s(stats, b, q_new, dt)
        try:
            np.linalg.cholesky(s_new)
        except np.linalg.LinAlgError:
            # MC rank deficiency: clip the spectrum onto the PD cone before
            # continuing (counted; the ascent property does not survive this).
            _ENFORCEMENTS["s_repair"] += 1
            if not np.all(np.isfinite(s_new)):
                raise NumericalError(
                    "diffusion update produced non-finite entries; "
                    "statistics are degenerate"
                )
            evals, evecs = np.linalg.eigh(s_new)
            fl = 1e-12 * max(float(np.abs(evals).max()), 1.0)
            s_new = (evecs * np.maximum(evals, fl)) @ evecs.T
            s_new = 0.5 * (s_new + s_new.T)
        b_new = _update_b(stats, q_new, s_new, dt, b_hi, b)
        scale_q = max(float(np.abs(q_new).max()), 1.0)
        scale_s = max(float(np.abs(s_new).max()), 1e-300)
        delta = max(
            abs(b_new - b) / max(b_new, _B_FLOOR),
            float(np.abs(q_new - last.q).max()) / scale_q if last else np.inf,
            float(np.abs(s_new - last.S).max()) / scale_s if last else np.inf,
        )
        last = OuParams(b_new, q_new, s_new)
        b = b_new
        if delta < tol:
            if b_new <= _B_FLOOR * (1.0 + 1e-6):
                _ENFORCEMENTS["b_floor"] += 1
                warnings.warn(
                    f"OU rate driven to the floor {_B_FLOOR}; data carry no mean reversion",
                    RuntimeWarning,
                    stacklevel=2,
                )
            return last
        if sweeps_left == 0 and not rescued:
            # Warm-started ascent stalled (ridge case): jump to the profile
            # maximizer — g(b*) >= g(b) >= Q at the current iterate, so the
            # ascent stays monotone — and verify from there.
            rescued = True
            b_star = profile_argmax()
            if profile(math.log(b_star)) > profile(math.log(b)):
                b = b_star
            last = None
            sweeps_left = max_iter
    raise FixedPointError(
        f"OU parameter update did not stabilize within {max_iter} sweeps",
        last_iterate=last,
    )


# ---------------------------------------------------------------------------
# emission updates


def q_hat_emission(stats: EmissionSuffStats, p, sigma2: np.ndarray) -> float:
    """Expected complete-data emission log-density, constants included."""
    p_full = _as_p_full(p)
    el = stats.block_len
    d = stats.A.shape[0]
    quad = (
        stats.ysq
        - 2.0 * np.einsum("da,da->d", stats.A, p_full)
        + np.einsum("da,ab,db->d", p_full, stats.B, p_full)
    )
    return float(
        -0.5 * el * (d * _LOG_2PI + np.sum(np.log(sigma2))) - 0.5 * np.sum(quad / sigma2)
    )


def update_projections(
    stats: EmissionSuffStats,
    prior_variance: float | None = PROJECTION_PRIOR_VARIANCE,
    n_experts: int | None = None,
) -> tuple:
    """Rowwise ridge solution P_j = A_j (B + I/prior_variance)^{-1} for all d rows.

    One factorization is shared by all rows; the (d, M*K) solution is unstacked
    into M (d, K) matrices (``n_experts`` defaults to treating the whole row as
    a single expert block... it must be supplied when M > 1).
    ``prior_variance=None`` drops the regularizer (maximum likelihood); a
    singular B then raises.
    """
    b = stats.B
    if prior_variance is not None:
        if not (math.isfinite(prior_variance) and prior_variance > 0):
            raise ConfigError(f"prior_variance must be positive, got {prior_variance!r}")
        b = b + np.eye(b.shape[0]) / prior_variance
    try:
        cf = scipy.linalg.cho_factor(b, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            "emission second-moment matrix is singular; pass a finite prior_variance "
            "to regularize the projection update"
        ) from exc
    p_full = scipy.linalg.cho_solve(cf, stats.A.T).T
    m = 1 if n_experts is None else int(n_experts)
    if m < 1 or p_full.shape[1] % m:
        raise ConfigError(f"cannot split {p_full.shape[1]} state columns into {m} experts")
    return tuple(np.split(p_full, m, axis=1))


def _as_p_full(p) -> np.ndarray:
    if isinstance(p, (tuple, list)):
        return np.concatenate([np.asarray(pm, dtype=float) for pm in p], axis=1)
    return np.asarray(p, dtype=float)


def update_sigmas(
    stats: EmissionSuffStats, p, ell_total: float | None = None
) -> np.ndarray:
    """Closed-form noise variances, floored at 1e-12.

    ``p`` is the projection set (tuple of per-expert matrices or the assembled
    (d, M*K) array).  Uses the unregularized second moment; the effective
    observation count defaults to the block length, which is the scale the
    blended statistics live on.
    """
    p_full = _as_p_full(p)
    if ell_total is None:
        ell_total = stats.block_len
    if not ell_total > 0:
        raise ConfigError(f"effective count must be positive, got {ell_total!r}")
    quad = (
        stats.ysq
        - 2.0 * np.einsum("da,da->d", stats.A, p_full)
        + np.einsum("da,ab,db->d", p_full, stats.B, p_full)
    )
    return np.maximum(quad / ell_total, VAR_FLOOR)
