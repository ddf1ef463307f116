"""Online EM over blocks of observations.

Each iteration consumes one block of L observations: run the particle filter,
draw smoothed trajectories backward, form Monte Carlo sufficient statistics,
blend them into the running statistics with gain gamma_k = k**(-a), and
maximize the blended objective in closed form (plus a 1-D search for the OU
rates).  Blocks are treated as independent — the filter restarts from the
stationary prior at every block boundary — so the objective is the split-data
likelihood rather than the full one.

Randomness is drawn from per-purpose streams keyed by (seed, stream, block):
restarting a fit from a checkpoint at block k reproduces the original run
bit for bit.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .config import ModelConfig
from .errors import DataError
from .membership import to_simplex
from .emission import emission_mean
from .mstep import (
    PROJECTION_PRIOR_VARIANCE,
    VAR_FLOOR,
    enforcement_counts,
    update_ou_params,
    update_projections,
    update_sigmas,
)
from .params import OuParams, StaticParams
from .rng import seeded_stream
from .smc import backward_smooth, build_context, run_filter
from .suffstats import SuffStats, blend_at, gamma_schedule

__all__ = [
    "STREAM_INIT",
    "STREAM_FILTER",
    "STREAM_SMOOTHER",
    "STREAM_PREDICT",
    "STREAM_DATA",
    "STREAM_SCORE",
    "BlockDiagnostics",
    "EmState",
    "init_statics",
    "init_state",
    "plug_in_fit",
    "em_iteration",
    "run_em",
]

# RNG stream labels; (seed, stream, block_index) addresses every draw.
STREAM_INIT = 0
STREAM_FILTER = 1
STREAM_SMOOTHER = 2
STREAM_PREDICT = 3
STREAM_DATA = 4
STREAM_SCORE = 5


@dataclass(frozen=True)
class BlockDiagnostics:
    """Per-block record of evidence, fit, and sampler health.

    ``per_obs_loglik`` is the split-data marginal evidence per observation
    (all Gaussian constants included).  ``per_obs_fit_loglik`` is the plug-in
    emission log-density of the data under the smoothed trajectories with the
    2*pi constant dropped — the training curve that levels off at
    -(d/2)(ln sigma^2 + 1) when the noise floor is reached.  Both are computed
    with the parameters *before* the update, i.e. the ones that produced the
    particle approximation.
    """

    block: int
    gamma: float
    log_evidence: float
    per_obs_loglik: float
    per_obs_fit_loglik: float
    min_ess: float
    n_resampled: int
    n_enforcements: int  # parameter-space repairs during this block's M-step


@dataclass(frozen=True)
class EmState:
    """Everything the next iteration needs: parameters, blended statistics, count."""

    config: ModelConfig
    statics: StaticParams
    stats: SuffStats | None = None
    block_count: int = 0


def _autocov_rates(yc: np.ndarray, dt: float) -> np.ndarray:
    """Two decay rates from a 2-exponential fit to the autocovariance trace.

    Candidate rate pairs come from a log grid; each pair is scored by least
    squares over log-spaced lags.  Returned sorted, slow first.
    """
    t_len = yc.shape[0]
    tau_max = min(t_len // 4, 400)
    taus = np.unique(np.geomspace(1, tau_max, 30).astype(int))
    trace = np.empty(taus.shape[0])
    for i, tau in enumerate(taus):
        c = yc[:-tau].T @ yc[tau:] / (t_len - tau)  # (d, d)
        trace[i] = np.trace(c)
    grid = np.geomspace(0.5 / (taus[-1] * dt), 3.0 / dt, 24)
    best = None
    for idx in itertools.combinations(range(grid.shape[0]), 2):
        basis = np.exp(-np.outer(taus * dt, grid[list(idx)]))  # (n_lags, 2)
        coef, *_ = np.linalg.lstsq(basis, trace, rcond=None)
        if np.any(coef <= 0):
            continue
        sse = float(np.sum((trace - basis @ coef) ** 2))
        if best is None or sse < best[0]:
            best = (sse, grid[list(idx)])
    if best is None:
        return np.array([0.5 / (taus[-1] * dt), 1.0 / dt])
    return np.sort(best[1])


def _two_lobe_moments(ys, lab, m0, m1):
    """Second moments used by the saturation demixer, all in-span.

    ``e_d`` is the lobe separation axis, ``f`` the in-span direction
    orthogonal to it; membership wiggle is invisible along ``f``, so the
    within-class variances there are pure expert-channel power plus noise.
    """
    e_d = m0 - m1
    e_d = e_d / np.linalg.norm(e_d)
    u0 = m0 / np.linalg.norm(m0)
    f = u0 - (u0 @ e_d) * e_d
    if np.linalg.norm(f) < 1e-8:
        u1 = m1 / np.linalg.norm(m1)
        f = u1 - (u1 @ e_d) * e_d
        if np.linalg.norm(f) < 1e-8:
            return None
    f = f / np.linalg.norm(f)
    var_psi = np.empty(2)
    var_t = np.empty(2)
    for c, ml in ((0, m0), (1, m1)):
        dev = ys[lab == c] - ml  # (n_c, d)
        var_psi[c] = float(np.var(dev @ f))
        var_t[c] = float(np.var(dev @ e_d))
    return {"e_d": e_d, "f": f, "var_psi": var_psi, "var_t": var_t}


def _demix_lobe_means(etas, m0, m1):
    """Invert m_c = E[z|class c] * (q P) mixing of the two class means.

    ``etas[c]`` is the mean weight of class ``c``'s dominant expert within
    that class; the returned vectors are the per-expert level-projection
    products q_m P_m.
    """
    e0, e1 = etas
    det = e0 + e1 - 1.0
    if det < 0.05:
        return None
    a1 = (e1 * m0 - (1.0 - e0) * m1) / det
    a2 = (e0 * m1 - (1.0 - e1) * m0) / det
    if np.linalg.norm(a1) < 1e-9 or np.linalg.norm(a2) < 1e-9:
        return None
    return a1, a2


def _channel_powers(etas, a1, a2, mom, sig_scalar):
    """Per-expert emission power alpha_m = |P_m|^2 Var(x_m) from the in-span
    within-class variances.  The membership variance enters only through the
    separation-axis variance and is re-estimated alongside."""
    e0, e1 = etas
    u1, u2 = a1 / np.linalg.norm(a1), a2 / np.linalg.norm(a2)
    w2 = float((a1 - a2) @ (a1 - a2))
    g = np.array([float(u1 @ mom["f"]), float(u2 @ mom["f"])])
    h = np.array([float(u1 @ mom["e_d"]), float(u2 @ mom["e_d"])])
    zc = np.array([[e0, 1.0 - e0], [1.0 - e1, e1]])  # E[z_m | class c]
    v_z = np.clip(mom["var_t"] / w2, 0.0, 0.25)
    alpha = np.full(2, 1.0)
    for _ in range(4):
        k2 = zc**2 + v_z[:, None]  # E[z_m^2 | class c]
        amat = k2 * (g**2)[None, :]
        rhs = np.maximum(mom["var_psi"] - sig_scalar, 1e-12)
        try:
            alpha = np.linalg.solve(amat, rhs)
        except np.linalg.LinAlgError:
            return None
        alpha = np.maximum(alpha, 1e-12)
        x_part = (k2 * (h**2)[None, :]) @ alpha
        v_z = np.clip((mom["var_t"] - x_part - sig_scalar) / w2, 0.0, 0.25)
    return alpha


def _saturation_readout(a1, a2, alpha, ys, lab):
    """Class-conditional mean memberships from per-frame channel coefficients.

    Projecting each frame onto the two channel directions and rescaling by the
    level estimates gives z_m x_m / q_m, whose conditional mean is E[z_m | c]
    to first order in the state fluctuations.
    """
    pn = np.sqrt(alpha)
    p_mat = np.stack(
        [a1 / np.linalg.norm(a1) * pn[0], a2 / np.linalg.norm(a2) * pn[1]], axis=1
    )  # (d, 2)
    q_vec = np.array([np.linalg.norm(a1) / pn[0], np.linalg.norm(a2) / pn[1]])
    coef = (np.linalg.pinv(p_mat) @ ys.T).T  # (T, 2)
    r = coef / q_vec[None, :]
    den = r[:, 0] + r[:, 1]
    ok = np.abs(den) > 1e-9
    zprox = np.clip(r[ok, 0] / den[ok], 0.0, 1.0)
    lab_ok = lab[ok]
    if not np.any(lab_ok == 0) or not np.any(lab_ok == 1):
        return None
    e0 = float(np.clip(np.mean(zprox[lab_ok == 0]), 0.55, 0.995))
    e1 = float(np.clip(np.mean(1.0 - zprox[lab_ok == 1]), 0.55, 0.995))
    return e0, e1


def _two_lobe_init(ys: np.ndarray, dt: float, rng: np.random.Generator):
    """Moment-matched starting parameters for the two-expert scalar model.

    When the memberships saturate, the series occupies two lobes.  The lobe
    means mix the per-expert level vectors q_m P_m through the mean
    memberships; a neutral saturation guess is corrected twice by reading the
    conditional memberships back off the data (one-step estimator — iterating
    to a fixed point lets small geometry-coupled biases compound).  Expert
    variances are fixed at their stationary value, so the returned member of
    the scale family (c P, q/c, S/c^2) is the unit-variance one.

    Returns None when the sample shows no usable two-lobe structure; the
    caller then falls back to the generic scheme.
    """
    t_len, d = ys.shape
    mu = ys.mean(axis=0)
    yc = ys - mu

    rates = _autocov_rates(yc, dt)

    # split along the top-2 principal plane, then relabel on the lobe axis
    cov = yc.T @ yc / t_len
    _, evec = np.linalg.eigh(cov)
    plane = yc @ evec[:, -2:]  # (T, 2)
    best = None
    for _ in range(6):
        cents = plane[rng.choice(t_len, 2, replace=False)]
        lab = np.zeros(t_len, dtype=int)
        for _ in range(40):
            lab = np.argmin(
                ((plane[:, None] - cents[None]) ** 2).sum(axis=2), axis=1
            )
            if not np.any(lab == 0) or not np.any(lab == 1):
                break
            new = np.stack([plane[lab == j].mean(axis=0) for j in (0, 1)])
            if np.allclose(new, cents):
                break
            cents = new
        if not np.any(lab == 0) or not np.any(lab == 1):
            continue
        sse = float(np.sum((plane - cents[lab]) ** 2))
        if best is None or sse < best[0]:
            best = (sse, lab.copy())
    if best is None:
        return None
    _, lab = best
    m0 = ys[lab == 0].mean(axis=0)
    m1 = ys[lab == 1].mean(axis=0)
    e_d = m0 - m1
    nd = np.linalg.norm(e_d)
    if nd < 1e-9:
        return None
    t_all = yc @ (e_d / nd)
    mid = 0.5 * (np.mean(t_all[lab == 0]) + np.mean(t_all[lab == 1]))
    lab = np.where(t_all > mid, 0, 1)
    if min(np.sum(lab == 0), np.sum(lab == 1)) < 50:
        return None
    m0 = ys[lab == 0].mean(axis=0)
    m1 = ys[lab == 1].mean(axis=0)

    # the lobes must separate beyond the within-class spread per coordinate
    within = 0.5 * (ys[lab == 0].var(axis=0).sum() + ys[lab == 1].var(axis=0).sum())
    if float((m0 - m1) @ (m0 - m1)) < 4.0 * within / d:
        return None

    # noise level from the residual outside the lobe-mean span
    qmat, _ = np.linalg.qr(np.stack([m0, m1], axis=1))
    resid = yc - (yc @ qmat) @ qmat.T
    sig_scalar = float(resid.var()) * d / (d - 2)
    sigma2 = np.full(d, sig_scalar)

    mom = _two_lobe_moments(ys, lab, m0, m1)
    if mom is None:
        return None

    etas = (0.75, 0.75)
    final = None
    for _ in range(2):
        parts = _demix_lobe_means(etas, m0, m1)
        if parts is None:
            break
        alpha = _channel_powers(etas, *parts, mom, sig_scalar)
        if alpha is None:
            break
        final = (*parts, alpha)
        readout = _saturation_readout(*parts, alpha, ys, lab)
        if readout is None:
            break
        etas = readout
    if final is None:
        return None
    parts = _demix_lobe_means(etas, m0, m1)
    if parts is not None:
        alpha = _channel_powers(etas, *parts, mom, sig_scalar)
        if alpha is not None:
            final = (*parts, alpha)
    a1, a2, alpha = final

    pn = np.sqrt(alpha)
    u1, u2 = a1 / np.linalg.norm(a1), a2 / np.linalg.norm(a2)
    p_list = [u1[:, None] * pn[0], u2[:, None] * pn[1]]
    q_list = [
        float(np.linalg.norm(a1) / pn[0]),
        float(np.linalg.norm(a2) / pn[1]),
    ]

    # rate pairing: the class whose own-mean projection decorrelates slower
    # hosts the slow expert
    lag1 = np.empty(2)
    for c, ml in ((0, m0), (1, m1)):
        idx = np.where(lab == c)[0]
        keep = idx[:-1][np.diff(idx) == 1]
        if keep.shape[0] < 10:
            return None
        um = ml / np.linalg.norm(ml)
        r0 = (ys[keep] - ml) @ um
        r1 = (ys[keep + 1] - ml) @ um
        if r0.std() < 1e-12 or r1.std() < 1e-12:
            return None
        lag1[c] = float(np.corrcoef(r0, r1)[0, 1])
    if not np.all(np.isfinite(lag1)):
        return None
    if lag1[0] >= lag1[1]:
        b_list = [float(rates[0]), float(rates[1])]
    else:
        b_list = [float(rates[1]), float(rates[0])]

    values = np.concatenate([p_list[0].ravel(), p_list[1].ravel(), q_list, b_list, sigma2])
    if not np.all(np.isfinite(values)):
        return None
    return b_list, p_list, q_list, sigma2


def init_statics(config: ModelConfig, y_sample: np.ndarray | None = None) -> StaticParams:
    """Data-scaled starting parameters.

    For the two-expert scalar model with a long enough sample, parameters are
    moment-matched to the two-lobe structure of the data (lobe means give
    projection directions and levels, within-lobe variances give projection
    norms and decay rates); see ``_two_lobe_init``.  Expert variances start at
    their stationary value, S = 2b.

    Otherwise: expert rates span two decades (geomspace 0.05..2) so slow and
    fast modes both have a nearby attractor; levels start at zero with unit
    diffusion.  Projections are drawn with per-coordinate variance
    var(y_j)/(M K) so the initial emission variance matches the data scale,
    and observation noise starts at 10% of the data variance.  Coordinates
    with zero sample variance (e.g. pinned boundary nodes) get exactly zero
    projection rows and a floored noise variance, which the updates then
    preserve.
    """
    rng = seeded_stream(config.seed, STREAM_INIT)
    m, k, d = config.M, config.K, config.d
    if y_sample is None:
        var_y = np.ones(d)
    else:
        y_sample = np.asarray(y_sample, dtype=float)
        if y_sample.ndim != 2 or y_sample.shape[1] != d:
            raise DataError(
                f"initialization sample must have shape (T, {d}), got {y_sample.shape}"
            )
        var_y = y_sample.var(axis=0)
    if (
        y_sample is not None
        and m == 2
        and k == 1
        and d >= 3
        and y_sample.shape[0] >= 1000
    ):
        fit = _two_lobe_init(y_sample, config.dt, rng)
        if fit is not None:
            b_list, p_list, q_list, sigma2 = fit
            ou_x = tuple(
                OuParams(b, np.array([q]), 2.0 * b * np.eye(1))
                for b, q in zip(b_list, q_list)
            )
            return StaticParams(
                ou_x=ou_x,
                ou_z=OuParams(1.0, np.zeros(m), np.eye(m)),
                P=tuple(np.asarray(p) for p in p_list),
                sigma2=np.maximum(sigma2, VAR_FLOOR),
            )
    rates = np.geomspace(0.05, 2.0, m)
    ou_x = tuple(OuParams(float(b), np.zeros(k), np.eye(k)) for b in rates)
    ou_z = OuParams(1.0, np.zeros(m), np.eye(m))
    p_full = rng.standard_normal((d, m * k)) * np.sqrt(var_y / (m * k))[:, None]
    sigma2 = np.maximum(0.1 * var_y, VAR_FLOOR)
    return StaticParams(
        ou_x=ou_x,
        ou_z=ou_z,
        P=tuple(np.split(p_full, m, axis=1)),
        sigma2=sigma2,
    )


def init_state(config: ModelConfig, y_sample: np.ndarray | None = None) -> EmState:
    return EmState(config=config, statics=init_statics(config, y_sample))


def plug_in_fit(statics: StaticParams, paths, ys: np.ndarray) -> float:
    """Per-observation emission log-density over smoothed draws, no 2*pi term.

    Averages -(1/2) sum_j [ln sigma_j^2 + (y_j - (W X)_j)^2 / sigma_j^2] over
    draws and times.
    """
    ys = np.asarray(ys, dtype=float)
    mean = emission_mean(statics, to_simplex(paths.zhat), paths.X)  # (n, L, d)
    quad = np.mean(np.sum((ys - mean) ** 2 / statics.sigma2, axis=-1))
    return float(-0.5 * (np.sum(np.log(statics.sigma2)) + quad))


def em_iteration(
    state: EmState,
    y_block: np.ndarray,
    *,
    n_draws: int | None = None,
    prior_variance: float | None = PROJECTION_PRIOR_VARIANCE,
    gamma_override: float | None = None,
) -> tuple[EmState, BlockDiagnostics]:
    """One E/M cycle on a single block of exactly L observations.

    ``gamma_override`` replaces the k**(-a) gain (1.0 turns the update into a
    plain batch M-step on this block's statistics).  Warm-starts every OU
    search at the previous parameters.
    """
    config = state.config
    y_block = np.asarray(y_block, dtype=float)
    if y_block.shape != (config.L, config.d):
        raise DataError(
            f"block must have shape (L, d) = {(config.L, config.d)}, got {y_block.shape}"
        )
    k = state.block_count + 1
    ctx = build_context(state.statics, config)
    result = run_filter(y_block, ctx, config, seeded_stream(config.seed, STREAM_FILTER, k))
    paths = backward_smooth(
        result.clouds, ctx, config, seeded_stream(config.seed, STREAM_SMOOTHER, k), n_draws
    )
    fit = plug_in_fit(state.statics, paths, y_block)

    gamma = gamma_schedule(k, config.gamma_exponent) if gamma_override is None else float(gamma_override)
    blended = blend_at(state.stats, SuffStats.from_smoothed(paths, y_block, config), gamma)
    if blended is state.stats:
        # zero gain: the statistics and hence every M-step output are
        # unchanged — skip the solves rather than recompute them
        diag = BlockDiagnostics(
            block=k,
            gamma=gamma,
            log_evidence=result.log_evidence,
            per_obs_loglik=result.log_evidence / config.L,
            per_obs_fit_loglik=fit,
            min_ess=float(result.ess.min()),
            n_resampled=result.n_resampled,
            n_enforcements=0,
        )
        return replace(state, block_count=k), diag

    repairs_before = sum(enforcement_counts().values())
    ou_x = tuple(
        update_ou_params(blended.ou_x[m], config.dt, init=state.statics.ou_x[m])
        for m in range(config.M)
    )
    ou_z = update_ou_params(blended.ou_z, config.dt, init=state.statics.ou_z)
    p = update_projections(blended.emission, prior_variance, n_experts=config.M)
    sigma2 = update_sigmas(blended.emission, p)
    statics = StaticParams(ou_x=ou_x, ou_z=ou_z, P=p, sigma2=sigma2)
    diag = BlockDiagnostics(
        block=k,
        gamma=gamma,
        log_evidence=result.log_evidence,
        per_obs_loglik=result.log_evidence / config.L,
        per_obs_fit_loglik=fit,
        min_ess=float(result.ess.min()),
        n_resampled=result.n_resampled,
        n_enforcements=sum(enforcement_counts().values()) - repairs_before,
    )
    return replace(state, statics=statics, stats=blended, block_count=k), diag


def run_em(
    ys: np.ndarray,
    config: ModelConfig,
    *,
    init: StaticParams | None = None,
    n_draws: int | None = None,
    prior_variance: float | None = PROJECTION_PRIOR_VARIANCE,
    callback=None,
) -> tuple[EmState, list[BlockDiagnostics]]:
    """Consume ``ys`` (T, d) in consecutive blocks of L; return final state.

    A trailing remainder of fewer than L observations is dropped with a
    warning.  ``callback(state, diag)`` fires after every block with the
    already-updated state.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.ndim != 2 or ys.shape[1] != config.d:
        raise DataError(f"series must have shape (T, {config.d}), got {ys.shape}")
    n_blocks, remainder = divmod(ys.shape[0], config.L)
    if n_blocks == 0:
        raise DataError(
            f"series of length {ys.shape[0]} is shorter than one block (L={config.L})"
        )
    if remainder:
        warnings.warn(
            f"dropping {remainder} trailing observations that do not fill a block",
            RuntimeWarning,
            stacklevel=2,
        )
    state = EmState(config=config, statics=init) if init is not None else init_state(config, ys)
    history: list[BlockDiagnostics] = []
    for j in range(n_blocks):
        state, diag = em_iteration(
            state,
            ys[j * config.L : (j + 1) * config.L],
            n_draws=n_draws,
            prior_variance=prior_variance,
        )
        history.append(diag)
        if callback is not None:
            callback(state, diag)
    return state, history
