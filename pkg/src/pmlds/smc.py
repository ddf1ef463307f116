"""Sequential Monte Carlo over the joint latent state (X_t, zhat_t).

The proposal is locally optimal: zhat_t is drawn from its transition prior and
X_t from the exact Gaussian conditional

    N( S̄ (S_X^{-1} mu_t + W_t^T Sigma^{-1} y_t),  S̄ ),
    S̄ = (S_X^{-1} + W_t^T Sigma^{-1} W_t)^{-1}

with S_X the block-diagonal of per-expert transition covariances and mu_t the
stacked transition means.  The incremental weight is the conditional evidence

    u_t = |S̄|^{1/2} exp( ½ mūᵀ S̄^{-1} mū − ½ muᵀ S_X^{-1} mu )

implemented in log form with Cholesky log-determinants and triangular solves;
no explicit covariance inverse is ever formed per particle.  u_t omits a
particle-independent factor (2π)^{-d/2}|Sigma|^{-1/2}|S_X|^{-1/2}e^{-½ yᵀΣ⁻¹y};
that constant is restored when accumulating the per-step log-evidence so the
increments sum to a proper log-likelihood estimate.

W_t^T Sigma^{-1} W_t has the block structure [z_n z_m P(n)ᵀ Σ⁻¹ P(m)]_{nm}, so
the d-dimensional work is done once per step (not per particle): the filter
precomputes G = P_fullᵀ Σ⁻¹ P_full per parameter set and h_t = P_fullᵀ Σ⁻¹ y_t
per step, then scales blocks by memberships.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .config import ModelConfig
from .errors import ConfigError, DataError, DegenerateCloudError
from .linalg import chol_batched, logdet_from_chol, solve_lower_batched, solve_upper_batched
from .membership import to_simplex
from .params import Gaussian, LatentState, OuParams, StaticParams

__all__ = [
    "Particle",
    "ParticleCloud",
    "FilterContext",
    "StepInfo",
    "FilterResult",
    "SmoothedPaths",
    "build_context",
    "init_cloud",
    "filter_step",
    "run_filter",
    "ess",
    "resample",
    "backward_smooth",
    "optimal_proposal",
    "log_incremental_weight",
    "log_evidence_constant",
]

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Particle:
    """One weighted latent trajectory (possibly a single state)."""

    trajectory: tuple
    log_weight: float


@dataclass
class ParticleCloud:
    """A weighted particle ensemble at one time point.

    Arrays are particle-major: ``X`` is (N, M*K), ``zhat`` is (N, M) and
    ``log_w`` is (N,).  When ``normalized`` the weights sum to one (checked to
    1e-10 at construction).
    """

    X: np.ndarray
    zhat: np.ndarray
    log_w: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.zhat = np.asarray(self.zhat, dtype=float)
        self.log_w = np.asarray(self.log_w, dtype=float)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.zhat.ndim != 2 or self.zhat.shape[0] != n:
            raise ConfigError("cloud arrays must be (N, M*K) and (N, M)")
        if self.log_w.shape != (n,):
            raise ConfigError("log_w must be one weight per particle")
        if self.normalized:
            total = float(np.exp(logsumexp(self.log_w)))
            if not math.isfinite(total) or abs(total - 1.0) > 1e-10:
                raise ConfigError(
                    f"normalized cloud weights sum to {total!r}, expected 1 within 1e-10"
                )

    def __len__(self) -> int:
        return self.X.shape[0]

    def weights(self) -> np.ndarray:
        """Normalized weights as probabilities."""
        return np.exp(self.log_w - logsumexp(self.log_w))

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w * w))

    @property
    def particles(self) -> list:
        """Object view: one :class:`Particle` per row (single-state trajectory)."""
        return [
            Particle((LatentState(self.X[i], self.zhat[i]),), float(self.log_w[i]))
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class StepInfo:
    """Diagnostics for one filter step."""

    ess: float
    resampled: bool
    log_evidence_increment: float
    snapshot: ParticleCloud  # posterior (pre-resample) cloud at this step


@dataclass(frozen=True)
class FilterResult:
    clouds: list          # per-step posterior (pre-resample) clouds
    ess: np.ndarray       # (T,)
    log_evidence_increments: np.ndarray  # (T,), additive constants included
    n_resampled: int

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_evidence_increments))

    @property
    def final_cloud(self) -> ParticleCloud:
        return self.clouds[-1]


@dataclass(frozen=True)
class SmoothedPaths:
    """Backward-simulation draws: equally weighted joint trajectories."""

    X: np.ndarray     # (n_draws, L, M*K)
    zhat: np.ndarray  # (n_draws, L, M)

    @property
    def n_draws(self) -> int:
        return self.X.shape[0]

    def expert_states(self, k: int) -> np.ndarray:
        """View of the per-expert states, shape (n_draws, L, M, K)."""
        n, el, mk = self.X.shape
        return self.X.reshape(n, el, mk // k, k)

    def as_particles(self) -> list:
        logw = -math.log(self.n_draws)
        return [
            Particle(
                tuple(LatentState(self.X[i, t], self.zhat[i, t]) for t in range(self.X.shape[1])),
                logw,
            )
            for i in range(self.n_draws)
        ]


# ---------------------------------------------------------------------------
# precomputed per-parameter-set context


@dataclass(frozen=True)
class FilterContext:
    """Factorizations and constants reused across a block's filter steps."""

    statics: StaticParams
    dt: float
    M: int = field(init=False)
    K: int = field(init=False)
    # expert transition / stationary priors over the stacked state (M*K)
    a_big: np.ndarray = field(init=False)       # (M*K,) e^{-b_m dt} repeated K times
    q_big: np.ndarray = field(init=False)       # (M*K,) stacked q
    trans_inv: np.ndarray = field(init=False)   # (M*K, M*K) block-diag S_X^{-1}
    trans_logdet: float = field(init=False)
    trans_chols: tuple = field(init=False)      # per-expert (K, K) lower factors
    stat_inv: np.ndarray = field(init=False)
    stat_logdet: float = field(init=False)
    stat_chols: tuple = field(init=False)
    # membership driver
    a_z: float = field(init=False)
    z_trans_root: np.ndarray = field(init=False)  # (M, M) lower chol of transition cov
    z_stat_root: np.ndarray = field(init=False)
    # emission
    p_full: np.ndarray = field(init=False)      # (d, M*K)
    sig_inv: np.ndarray = field(init=False)     # (d,)
    g_full: np.ndarray = field(init=False)      # (M*K, M*K) P^T Sigma^{-1} P
    log_c0: float = field(init=False)           # -(d/2)ln 2pi - 0.5 sum ln sigma2

    def __post_init__(self) -> None:
        st = self.statics
        M, K, d = st.M, st.K, st.d
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "K", K)

        def spd_pieces(cov: np.ndarray):
            chol = np.linalg.cholesky(cov)
            inv = scipy.linalg.cho_solve((chol, True), np.eye(cov.shape[0]))
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            return chol, 0.5 * (inv + inv.T), logdet

        a = np.exp(-self.dt * np.array([p.b for p in st.ou_x]))
        lam = (1.0 - a * a) / (2.0 * np.array([p.b for p in st.ou_x]))
        trans_inv = np.zeros((M * K, M * K))
        stat_inv = np.zeros((M * K, M * K))
        trans_chols, stat_chols = [], []
        trans_logdet = stat_logdet = 0.0
        for m, p in enumerate(st.ou_x):
            sl = slice(m * K, (m + 1) * K)
            chol, inv, logdet = spd_pieces(lam[m] * p.S)
            trans_chols.append(chol)
            trans_inv[sl, sl] = inv
            trans_logdet += logdet
            chol, inv, logdet = spd_pieces(p.S / (2.0 * p.b))
            stat_chols.append(chol)
            stat_inv[sl, sl] = inv
            stat_logdet += logdet
        object.__setattr__(self, "a_big", np.repeat(a, K))
        object.__setattr__(self, "q_big", np.concatenate([p.q for p in st.ou_x]))
        object.__setattr__(self, "trans_inv", trans_inv)
        object.__setattr__(self, "trans_logdet", trans_logdet)
        object.__setattr__(self, "trans_chols", tuple(trans_chols))
        object.__setattr__(self, "stat_inv", stat_inv)
        object.__setattr__(self, "stat_logdet", stat_logdet)
        object.__setattr__(self, "stat_chols", tuple(stat_chols))

        az = math.exp(-st.ou_z.b * self.dt)
        lam_z = (1.0 - az * az) / (2.0 * st.ou_z.b)
        object.__setattr__(self, "a_z", az)
        object.__setattr__(self, "z_trans_root", np.linalg.cholesky(lam_z * st.ou_z.S))
        object.__setattr__(self, "z_stat_root", np.linalg.cholesky(st.ou_z.S / (2.0 * st.ou_z.b)))

        p_full = st.p_full()
        sig_inv = 1.0 / st.sigma2
        g_full = (p_full.T * sig_inv) @ p_full
        object.__setattr__(self, "p_full", p_full)
        object.__setattr__(self, "sig_inv", sig_inv)
        object.__setattr__(self, "g_full", 0.5 * (g_full + g_full.T))
        object.__setattr__(
            self, "log_c0", -0.5 * (d * _LOG_2PI + float(np.sum(np.log(st.sigma2))))
        )


def build_context(statics: StaticParams, config: ModelConfig) -> FilterContext:
    if (statics.M, statics.K, statics.d) != (config.M, config.K, config.d):
        raise ConfigError(
            f"statics dims (M={statics.M}, K={statics.K}, d={statics.d}) do not match "
            f"config (M={config.M}, K={config.K}, d={config.d})"
        )
    return FilterContext(statics, config.dt)


def _as_context(model, config: ModelConfig) -> FilterContext:
    if isinstance(model, FilterContext):
        return model
    return build_context(model, config)


# ---------------------------------------------------------------------------
# core Gaussian update (shared by init and filter steps)


def _conditional_x(ctx, prior_inv, prior_logdet, prior_mean, z, y, rng):
    """Sample X from the locally optimal conditional and return log u.

    Returns (X, log_u) with the paper-form incremental weight
    log u = ½ log|S̄| + ½ mūᵀ S̄⁻¹ mū − ½ muᵀ S_prior⁻¹ mu.
    """
    k = ctx.K
    t1 = prior_mean @ prior_inv  # symmetric, so no transpose needed
    quad_prior = np.einsum("na,na->n", prior_mean, t1)
    h = ctx.p_full.T @ (y * ctx.sig_inv)  # (M*K,)
    zbig = np.repeat(z, k, axis=-1)       # (N, M*K)
    rhs = t1 + zbig * h
    zz = z[:, :, None] * z[:, None, :]
    zzbig = np.repeat(np.repeat(zz, k, axis=1), k, axis=2)  # (N, M*K, M*K)
    lam = prior_inv[None, :, :] + zzbig * ctx.g_full[None, :, :]
    chol = chol_batched(lam)
    w = solve_lower_batched(chol, rhs)
    mu_bar = solve_upper_batched(chol, w)
    quad_post = np.einsum("na,na->n", w, w)
    logdet_sbar = -logdet_from_chol(chol)
    eps = rng.standard_normal(prior_mean.shape)
    x = mu_bar + solve_upper_batched(chol, eps)
    log_u = 0.5 * (logdet_sbar + quad_post - quad_prior)
    return x, log_u


def _check_obs(y, d: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != d:
        raise DataError(f"observation has length {y.shape[0]}, expected {d}")
    if not np.all(np.isfinite(y)):
        raise DataError("observation contains non-finite values")
    return y


def log_evidence_constant(
    model, config: ModelConfig, y: np.ndarray, stationary_prior: bool = False
) -> float:
    """Additive constant dropped by the verbatim weight formula at one step."""
    ctx = _as_context(model, config)
    y = _check_obs(y, ctx.statics.d)
    prior_logdet = ctx.stat_logdet if stationary_prior else ctx.trans_logdet
    return ctx.log_c0 - 0.5 * prior_logdet - 0.5 * float(np.sum(y * y * ctx.sig_inv))


# ---------------------------------------------------------------------------
# public operations


def init_cloud(y1, model, config: ModelConfig, rng: np.random.Generator):
    """Initial cloud at t=1: stationary zhat, optimal X conditional, evidence weights.

    Returns ``(cloud, info)``; ``info.log_evidence_increment`` is the marginal
    evidence estimate of the first observation (constants included).
    """
    ctx = _as_context(model, config)
    y1 = _check_obs(y1, ctx.statics.d)
    n = config.N
    st = ctx.statics
    zhat = st.ou_z.q + rng.standard_normal((n, ctx.M)) @ ctx.z_stat_root.T
    z = to_simplex(zhat)
    prior_mean = np.broadcast_to(ctx.q_big, (n, ctx.q_big.shape[0]))
    x, log_u = _conditional_x(ctx, ctx.stat_inv, ctx.stat_logdet, prior_mean, z, y1, rng)
    total = logsumexp(log_u)
    if not np.isfinite(total):
        raise DegenerateCloudError(
            "all initial particle weights vanished", step=0, log_weights=log_u
        )
    log_w = log_u - total
    # second pass: with the shifted logs the correction is O(eps), keeping the
    # sum-to-one postcondition even when the raw logs span ~1e5
    log_w -= logsumexp(log_w)
    incr = float(total) - math.log(n) + log_evidence_constant(ctx, config, y1, True)
    cloud = ParticleCloud(x, zhat, log_w, normalized=True)
    return cloud, StepInfo(cloud.ess(), False, incr, cloud)


def ess(cloud: ParticleCloud) -> float:
    """Effective sample size 1 / sum of squared normalized weights."""
    return cloud.ess()


def resample(cloud: ParticleCloud, rng: np.random.Generator) -> ParticleCloud:
    """Multinomial resampling; returns a uniform-weight cloud."""
    n = len(cloud)
    cum = np.cumsum(cloud.weights())
    idx = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), n - 1)
    logw = np.full(n, -math.log(n))
    return ParticleCloud(cloud.X[idx], cloud.zhat[idx], logw, normalized=True)


def filter_step(cloud: ParticleCloud, y, model, config: ModelConfig, rng):
    """One SMC step: propagate zhat, propose X, reweight, adaptively resample.

    Returns ``(carry_cloud, info)``.  ``carry_cloud`` feeds the next step (it
    is the resampled cloud when ESS dropped below the threshold), while
    ``info.snapshot`` always holds the weighted posterior cloud at this step,
    which is what smoothing and estimation should consume.

    Draw order from ``rng``: zhat noise (N, M), X noise (N, M*K), then — only
    if resampling triggers — N uniforms.
    """
    ctx = _as_context(model, config)
    y = _check_obs(y, ctx.statics.d)
    if not cloud.normalized:
        raise ConfigError("filter_step expects a normalized cloud")
    st = ctx.statics
    n = len(cloud)
    zhat = (
        ctx.a_z * cloud.zhat
        + (1.0 - ctx.a_z) * st.ou_z.q
        + rng.standard_normal((n, ctx.M)) @ ctx.z_trans_root.T
    )
    z = to_simplex(zhat)
    prior_mean = ctx.a_big * cloud.X + (1.0 - ctx.a_big) * ctx.q_big
    x, log_u = _conditional_x(ctx, ctx.trans_inv, ctx.trans_logdet, prior_mean, z, y, rng)
    joint = cloud.log_w + log_u
    total = logsumexp(joint)
    if not np.isfinite(total):
        raise DegenerateCloudError(
            "all particle weights vanished at a filter step", log_weights=joint
        )
    log_w = joint - total
    log_w -= logsumexp(log_w)  # see init_cloud: guards the 1e-10 postcondition
    incr = float(total) + log_evidence_constant(ctx, config, y, False)
    snapshot = ParticleCloud(x, zhat, log_w, normalized=True)
    eff = snapshot.ess()
    resampled = eff < config.ess_min_fraction * n
    carry = resample(snapshot, rng) if resampled else snapshot
    return carry, StepInfo(eff, resampled, incr, snapshot)


def run_filter(ys, model, config: ModelConfig, rng: np.random.Generator) -> FilterResult:
    """Filter a block of observations ``ys`` of shape (T, d), T >= 1."""
    ys = np.asarray(ys, dtype=float)
    if ys.ndim != 2:
        raise DataError(f"observation block must be 2-D (T, d), got shape {ys.shape}")
    if ys.shape[0] < 1:
        raise DataError("observation block is empty")
    ctx = _as_context(model, config)
    carry, info = init_cloud(ys[0], ctx, config, rng)
    clouds, esses, incrs, n_res = [info.snapshot], [info.ess], [info.log_evidence_increment], 0
    for t in range(1, ys.shape[0]):
        try:
            carry, info = filter_step(carry, ys[t], ctx, config, rng)
        except DegenerateCloudError as exc:
            exc.step = t
            raise
        clouds.append(info.snapshot)
        esses.append(info.ess)
        incrs.append(info.log_evidence_increment)
        n_res += int(info.resampled)
    return FilterResult(clouds, np.array(esses), np.array(incrs), n_res)


# ---------------------------------------------------------------------------
# backward simulation


def _rowwise_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row from softmax(logits[row]); O(rows * cols)."""
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    u = rng.random(logits.shape[0]) * cum[:, -1]
    return np.sum(cum < u[:, None], axis=1)


def backward_smooth(
    clouds, model, config: ModelConfig, rng: np.random.Generator, n_draws: int | None = None
) -> SmoothedPaths:
    """Backward-simulation smoothing over stored filter clouds (O(N^2 L)).

    Draws ``n_draws`` (default N) joint trajectories: the final state comes
    from the final cloud's weights; earlier states are drawn with probability
    proportional to W_t^(i) p(Theta_{t+1} | Theta_t^(i)), where the transition
    density is the product of the X- and zhat-transition Gaussians.
    """
    ctx = _as_context(model, config)
    if len(clouds) == 0:
        raise DataError("no clouds to smooth")
    n_draws = int(n_draws) if n_draws is not None else config.N
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    st = ctx.statics
    m, k = ctx.M, ctx.K
    el = len(clouds)
    xs = np.empty((n_draws, el, m * k))
    zs = np.empty((n_draws, el, m))

    final = clouds[-1]
    cum = np.cumsum(final.weights())
    idx = np.minimum(np.searchsorted(cum, rng.random(n_draws), side="right"), len(final) - 1)
    xs[:, el - 1] = final.X[idx]
    zs[:, el - 1] = final.zhat[idx]

    a_x = ctx.a_big[::k]  # per-expert decay factors
    for t in range(el - 2, -1, -1):
        cloud = clouds[t]
        # per-expert whitened coordinates: resid = u - a * v with
        # u = R^{-1}(x_next - (1-a) q), v = R^{-1} x_src
        u_parts, v_parts = [], []
        for j in range(m):
            sl = slice(j * k, (j + 1) * k)
            root = ctx.trans_chols[j]
            off = (1.0 - a_x[j]) * st.ou_x[j].q
            u = scipy.linalg.solve_triangular(root, (xs[:, t + 1, sl] - off).T, lower=True).T
            v = scipy.linalg.solve_triangular(root, cloud.X[:, sl].T, lower=True).T
            u_parts.append(u)
            v_parts.append(a_x[j] * v)
        off_z = (1.0 - ctx.a_z) * st.ou_z.q
        u_parts.append(
            scipy.linalg.solve_triangular(ctx.z_trans_root, (zs[:, t + 1] - off_z).T, lower=True).T
        )
        v_parts.append(
            ctx.a_z
            * scipy.linalg.solve_triangular(ctx.z_trans_root, cloud.zhat.T, lower=True).T
        )
        u_cat = np.concatenate(u_parts, axis=1)   # (n_draws, M*K + M)
        v_cat = np.concatenate(v_parts, axis=1)   # (N, M*K + M)
        base = cloud.log_w - 0.5 * np.sum(v_cat * v_cat, axis=1)
        logits = base[None, :] + u_cat @ v_cat.T
        pick = _rowwise_categorical(logits, rng)
        xs[:, t] = cloud.X[pick]
        zs[:, t] = cloud.zhat[pick]
    return SmoothedPaths(xs, zs)


# ---------------------------------------------------------------------------
# single-particle reference forms (tests, oracles, documentation)


def _single_ctx(statics: StaticParams, dt: float) -> FilterContext:
    return FilterContext(statics, float(dt))


class _NoNoise:
    @staticmethod
    def standard_normal(shape):
        return np.zeros(shape)


def optimal_proposal(
    x_prev, z, y, statics: StaticParams, dt: float, stationary_prior: bool = False
) -> Gaussian:
    """Locally optimal proposal over X_t for one particle, as an explicit Gaussian.

    ``z`` is the simplex membership at time t (already propagated); with
    ``stationary_prior`` the stationary law replaces the transition prior,
    which is the initialization variant.
    """
    ctx = _single_ctx(statics, dt)
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(1, -1)
    y = _check_obs(y, statics.d)
    if stationary_prior:
        prior_inv, mean = ctx.stat_inv, ctx.q_big
    else:
        prior_inv = ctx.trans_inv
        mean = ctx.a_big * x_prev + (1.0 - ctx.a_big) * ctx.q_big
    k = ctx.K
    zz = z[:, :, None] * z[:, None, :]
    lam = prior_inv + (np.repeat(np.repeat(zz, k, axis=1), k, axis=2) * ctx.g_full)[0]
    rhs = prior_inv @ mean + np.repeat(z[0], k) * (ctx.p_full.T @ (y * ctx.sig_inv))
    cov = np.linalg.inv(lam)
    cov = 0.5 * (cov + cov.T)
    return Gaussian(cov @ rhs, cov)


def log_incremental_weight(
    x_prev, z, y, statics: StaticParams, dt: float, stationary_prior: bool = False
) -> float:
    """The verbatim incremental weight u_t for one particle, in log form."""
    ctx = _single_ctx(statics, dt)
    x_prev = np.asarray(x_prev, dtype=float).reshape(1, -1)
    z = np.asarray(z, dtype=float).reshape(1, -1)
    y = _check_obs(y, statics.d)
    if stationary_prior:
        prior_inv, prior_logdet = ctx.stat_inv, ctx.stat_logdet
        mean = np.broadcast_to(ctx.q_big, x_prev.shape)
    else:
        prior_inv, prior_logdet = ctx.trans_inv, ctx.trans_logdet
        mean = ctx.a_big * x_prev + (1.0 - ctx.a_big) * ctx.q_big
    _, log_u = _conditional_x(ctx, prior_inv, prior_logdet, mean, z, y, _NoNoise())
    return float(log_u[0])
