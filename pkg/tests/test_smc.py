"""Particle filter and backward smoother.

With a single expert the membership weight is identically 1 and the model is
an exact linear-Gaussian state space, so the filter is checked against a
Kalman filter and the smoother against RTS — the gold-standard oracles.  The
incremental weights are checked against direct quadrature of
∫ p(x_t | x_{t-1}) p(y_t | x_t) dx_t.
"""
import math

import numpy as np
import pytest

from pmlds import ModelConfig
from pmlds.ou import stationary, transition_cov
from pmlds.params import OuParams, StaticParams
from pmlds.rng import seeded_stream
from pmlds.smc import (
    backward_smooth,
    init_cloud,
    log_evidence_constant,
    log_incremental_weight,
    optimal_proposal,
    resample,
    run_filter,
    ParticleCloud,
)

from oracles import Lgssm, kalman_filter, quadrature_marginal_mean, rts_smoother


def single_expert_model(rng, d=2, b=0.6, q=0.4, s=1.1, sigma2=0.05):
    p = rng.standard_normal((d, 1))
    return StaticParams(
        ou_x=(OuParams(b, np.array([q]), np.array([[s]])),),
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(p,),
        sigma2=np.full(d, sigma2),
    )


def as_lgssm(statics, dt):
    """Single-expert PMLDS == LGSSM (z is identically 1)."""
    ou = statics.ou_x[0]
    a = math.exp(-ou.b * dt)
    return Lgssm(
        A=np.array([[a]]),
        c=(1 - a) * ou.q,
        Q=transition_cov(ou, dt),
        H=statics.P[0],
        R=np.diag(statics.sigma2),
        mu0=ou.q,
        S0=stationary(ou).cov,
    )


def weighted_moments(cloud):
    w = cloud.weights()
    mean = w @ cloud.X
    var = w @ (cloud.X - mean) ** 2
    return mean, var, cloud.ess()


# ---------------------------------------------------------------------------
# filter


def test_filter_matches_kalman_within_monte_carlo_error():
    rng = np.random.default_rng(11)
    statics = single_expert_model(rng)
    dt = 0.5
    lgssm = as_lgssm(statics, dt)
    # simulate from the LGSSM itself
    T = 30
    x = lgssm.mu0 + np.linalg.cholesky(lgssm.S0) @ rng.standard_normal(1)
    ys = np.zeros((T, 2))
    for t in range(T):
        if t:
            x = lgssm.A @ x + lgssm.c + np.linalg.cholesky(lgssm.Q) @ rng.standard_normal(1)
        ys[t] = lgssm.H @ x + np.sqrt(np.diag(lgssm.R)) * rng.standard_normal(2)

    k_means, k_covs, k_logliks = kalman_filter(lgssm, ys)
    cfg = ModelConfig(M=1, K=1, d=2, dt=dt, L=T, N=4000, seed=5)
    res = run_filter(ys, statics, cfg, seeded_stream(5, 1))

    for t, cloud in enumerate(res.clouds):
        mean, var, ess_t = weighted_moments(cloud)
        # plug-in Monte Carlo standard errors from the weighted cloud
        se_mean = math.sqrt(var[0] / ess_t)
        err = abs(mean[0] - k_means[t, 0])
        assert err < 3 * se_mean, (t, err, se_mean)
        fourth = cloud.weights() @ (cloud.X[:, 0] - mean[0]) ** 4
        se_var = math.sqrt(max(fourth - var[0] ** 2, 0.0) / ess_t)
        assert abs(var[0] - k_covs[t, 0, 0]) < 3 * se_var, t

    # log evidence agrees with the exact marginal likelihood
    assert abs(res.log_evidence - k_logliks.sum()) < 0.1


def test_pure_noise_evidence_is_exact():
    # P = 0 disconnects the latent state: every particle's incremental weight
    # collapses to the same constant and the evidence is the iid Gaussian
    # likelihood, exactly, for any particle count.
    d = 3
    statics = StaticParams(
        ou_x=(OuParams(0.5, np.zeros(1), np.eye(1)),),
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(np.zeros((d, 1)),),
        sigma2=np.array([0.5, 1.0, 2.0]),
    )
    rng = np.random.default_rng(0)
    ys = rng.standard_normal((10, d))
    cfg = ModelConfig(M=1, K=1, d=d, dt=1.0, L=10, N=8, seed=1)
    res = run_filter(ys, statics, cfg, seeded_stream(1, 1))
    expected = np.sum(
        -0.5 * (np.log(2 * np.pi * statics.sigma2) + ys**2 / statics.sigma2)
    )
    assert np.isclose(res.log_evidence, expected, rtol=0, atol=1e-9)


def test_filter_is_deterministic():
    rng = np.random.default_rng(2)
    statics = single_expert_model(rng)
    ys = rng.standard_normal((12, 2))
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=12, N=64, seed=9)
    r1 = run_filter(ys, statics, cfg, seeded_stream(9, 1))
    r2 = run_filter(ys, statics, cfg, seeded_stream(9, 1))
    assert r1.log_evidence == r2.log_evidence  # bit identical
    assert np.array_equal(r1.final_cloud.X, r2.final_cloud.X)
    assert np.array_equal(r1.final_cloud.log_w, r2.final_cloud.log_w)


def test_resample_threshold_controls_frequency():
    # resampling happens inside filter steps (t >= 2); the initial cloud is
    # weighted but never resampled, so L=15 admits at most 14 events
    rng = np.random.default_rng(3)
    statics = single_expert_model(rng)
    ys = rng.standard_normal((15, 2))
    always = ModelConfig(M=1, K=1, d=2, dt=1.0, L=15, N=50, ess_min_fraction=1.0, seed=0)
    never = ModelConfig(M=1, K=1, d=2, dt=1.0, L=15, N=50, ess_min_fraction=1e-9, seed=0)
    assert run_filter(ys, statics, always, seeded_stream(0, 1)).n_resampled == 14
    assert run_filter(ys, statics, never, seeded_stream(0, 1)).n_resampled == 0


def test_ess_stays_in_range():
    rng = np.random.default_rng(4)
    statics = single_expert_model(rng)
    ys = rng.standard_normal((20, 2)) * 2.0
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=20, N=100, seed=2)
    res = run_filter(ys, statics, cfg, seeded_stream(2, 1))
    assert np.all(res.ess >= 1.0 - 1e-9)
    assert np.all(res.ess <= 100.0 + 1e-9)


# ---------------------------------------------------------------------------
# proposal and incremental weight


def test_optimal_proposal_scalar_bayes_rule():
    # S_X = 1, sigma^2 = 1, mu_t = 0, W = 1, y = 2: precision 2, mean 1
    b, dt = 0.5, 1.0
    lam = (1 - math.exp(-2 * b * dt)) / (2 * b)
    statics = StaticParams(
        ou_x=(OuParams(b, np.zeros(1), np.array([[1.0 / lam]])),),  # step var = 1
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(np.array([[1.0]]),),
        sigma2=np.array([1.0]),
    )
    g = optimal_proposal(np.zeros(1), np.ones(1), np.array([2.0]), statics, dt)
    assert np.isclose(g.mean[0], 1.0, atol=1e-12)
    assert np.isclose(g.cov[0, 0], 0.5, atol=1e-12)


def test_optimal_proposal_flat_likelihood_returns_prior():
    statics = StaticParams(
        ou_x=(OuParams(0.8, np.array([0.3]), np.array([[1.5]])),),
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(np.array([[2.0]]),),
        sigma2=np.array([1e12]),
    )
    dt = 0.7
    g = optimal_proposal(np.array([1.2]), np.ones(1), np.array([5.0]), statics, dt)
    ou = statics.ou_x[0]
    a = math.exp(-ou.b * dt)
    assert np.isclose(g.mean[0], a * 1.2 + (1 - a) * 0.3, rtol=1e-6)
    assert np.isclose(g.cov[0, 0], transition_cov(ou, dt)[0, 0], rtol=1e-6)


def test_optimal_proposal_is_conjugate_posterior():
    # K=1, d=1: posterior precision = 1/v + (z p)^2 / sigma^2
    statics = StaticParams(
        ou_x=(OuParams(0.8, np.array([0.3]), np.array([[1.5]])),),
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(np.array([[2.0]]),),
        sigma2=np.array([0.25]),
    )
    dt = 0.7
    x_prev = np.array([1.2])
    y = np.array([1.0])
    z = np.ones(1)
    g = optimal_proposal(x_prev, z, y, statics, dt)
    ou = statics.ou_x[0]
    a = math.exp(-ou.b * dt)
    prior_mean = a * 1.2 + (1 - a) * 0.3
    prior_var = transition_cov(ou, dt)[0, 0]
    prec = 1 / prior_var + 4.0 / 0.25
    post_var = 1 / prec
    post_mean = post_var * (prior_mean / prior_var + 2.0 * 1.0 / 0.25)
    assert np.isclose(g.mean[0], post_mean, atol=1e-12)
    assert np.isclose(g.cov[0, 0], post_var, atol=1e-12)


@pytest.mark.parametrize("stationary_prior", [False, True])
def test_incremental_weight_matches_quadrature(stationary_prior):
    """Full log-weight (membership constants included) against the trapezoid
    value of the one-step marginal, 100 random scalar configurations."""
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        b = rng.uniform(0.1, 2.0)
        q = rng.uniform(-1, 1)
        s = rng.uniform(0.2, 2.0)
        p = rng.uniform(-2, 2)
        sigma2 = rng.uniform(0.05, 1.0)
        dt = rng.uniform(0.1, 1.5)
        statics = StaticParams(
            ou_x=(OuParams(b, np.array([q]), np.array([[s]])),),
            ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
            P=(np.array([[p]]),),
            sigma2=np.array([sigma2]),
        )
        cfg = ModelConfig(M=1, K=1, d=1, dt=dt, L=2, N=2, seed=0)
        x_prev = rng.standard_normal(1)
        y = np.array([rng.uniform(-2, 2)])
        z = np.ones(1)
        log_u = log_incremental_weight(
            x_prev, z, y, statics, dt, stationary_prior=stationary_prior
        ) + log_evidence_constant(statics, cfg, y, stationary_prior=stationary_prior)
        ou = statics.ou_x[0]
        if stationary_prior:
            prior_mean, prior_var = q, s / (2 * b)
        else:
            a = math.exp(-b * dt)
            prior_mean = a * x_prev[0] + (1 - a) * q
            prior_var = transition_cov(ou, dt)[0, 0]
        quad = quadrature_marginal_mean(prior_mean, prior_var, p, y, np.array([sigma2]))
        worst = max(worst, abs(math.exp(log_u) / quad - 1.0))
    assert worst < 1e-6, worst


def test_incremental_weight_uses_membership():
    # halving the membership weight must change the marginal accordingly
    statics = StaticParams(
        ou_x=(
            OuParams(0.5, np.zeros(1), np.eye(1)),
            OuParams(1.5, np.zeros(1), np.eye(1)),
        ),
        ou_z=OuParams(1.0, np.zeros(2), np.eye(2)),
        P=(np.array([[1.0]]), np.array([[0.0]])),
        sigma2=np.array([0.1]),
    )
    x_prev = np.zeros(2)
    y = np.array([0.8])
    z_full = np.array([1.0 - 1e-12, 1e-12])
    z_half = np.array([0.5, 0.5])
    dt = 1.0
    cfg = ModelConfig(M=2, K=1, d=1, dt=dt, L=2, N=2, seed=0)
    full = log_incremental_weight(x_prev, z_full, y, statics, dt) + log_evidence_constant(
        statics, cfg, y
    )
    half = log_incremental_weight(x_prev, z_half, y, statics, dt) + log_evidence_constant(
        statics, cfg, y
    )
    lam = transition_cov(statics.ou_x[0], dt)[0, 0]
    # marginal: y ~ N(0, (z1 p)^2 lam_prior + sigma^2) with prior mean 0
    for z1, log_u in ((1.0, full), (0.5, half)):
        var = z1**2 * lam + 0.1
        expected = -0.5 * (math.log(2 * math.pi * var) + y[0] ** 2 / var)
        assert np.isclose(log_u, expected, atol=1e-6), z1


# ---------------------------------------------------------------------------
# resampling


def test_resample_uniformizes_weights():
    rng = np.random.default_rng(7)
    n = 5000
    x = rng.standard_normal((n, 1))
    log_w = np.where(x[:, 0] > 0, math.log(3.0), 0.0)
    log_w -= math.log(np.sum(np.exp(log_w)))
    cloud = ParticleCloud(X=x, zhat=np.zeros((n, 1)), log_w=log_w)
    out = resample(cloud, np.random.default_rng(8))
    assert np.allclose(out.log_w, -math.log(n))
    # positive-x particles carried 3x the weight -> expect ~75% after resampling
    frac = np.mean(out.X[:, 0] > 0)
    assert abs(frac - 0.75) < 0.03


# ---------------------------------------------------------------------------
# smoother


def test_smoother_matches_rts():
    rng = np.random.default_rng(23)
    statics = single_expert_model(rng, d=2)
    dt = 1.0
    lgssm = as_lgssm(statics, dt)
    T = 20
    ys = rng.standard_normal((T, 2)) * 0.8
    k_means, k_covs, _ = kalman_filter(lgssm, ys)
    s_means, s_covs = rts_smoother(lgssm, k_means, k_covs)

    cfg = ModelConfig(M=1, K=1, d=2, dt=dt, L=T, N=4000, seed=13)
    res = run_filter(ys, statics, cfg, seeded_stream(13, 1))
    paths = backward_smooth(res.clouds, statics, cfg, seeded_stream(13, 2), n_draws=3000)
    assert paths.X.shape == (3000, T, 1)

    draw_mean = paths.X[:, :, 0].mean(axis=0)
    draw_se = paths.X[:, :, 0].std(axis=0) / math.sqrt(3000)
    for t in range(T):
        # draw noise plus filter-cloud error, combined in quadrature
        cloud_mean, cloud_var, ess_t = weighted_moments(res.clouds[t])
        se = math.sqrt(draw_se[t] ** 2 + cloud_var[0] / ess_t)
        assert abs(draw_mean[t] - s_means[t, 0]) < 4 * se, t
    # smoothed variance profile tracks RTS
    assert np.allclose(paths.X[:, :, 0].var(axis=0), s_covs[:, 0, 0], rtol=0.15)


def test_smoother_final_step_reproduces_filter_cloud():
    rng = np.random.default_rng(29)
    statics = single_expert_model(rng)
    ys = rng.standard_normal((8, 2))
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=8, N=512, seed=3)
    res = run_filter(ys, statics, cfg, seeded_stream(3, 1))
    paths = backward_smooth(res.clouds, statics, cfg, seeded_stream(3, 2), n_draws=4000)
    # last smoothed marginal == final filter cloud (weighted draw)
    final = res.final_cloud
    w = final.weights()
    assert np.isclose(paths.X[:, -1, 0].mean(), w @ final.X[:, 0], atol=0.05)
    drawn = set(np.round(paths.X[:, -1, 0], 12)) - set(np.round(final.X[:, 0], 12))
    assert not drawn  # every draw is one of the filter particles


def test_single_step_block_smoothing_equals_filtering():
    rng = np.random.default_rng(37)
    statics = single_expert_model(rng)
    ys = rng.standard_normal((2, 2))
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=2, N=256, seed=6)
    res = run_filter(ys[:1], statics, cfg, seeded_stream(6, 1))
    paths = backward_smooth(res.clouds, statics, cfg, seeded_stream(6, 2), n_draws=2000)
    assert paths.X.shape == (2000, 1, 1)
    cloud = res.final_cloud
    w = cloud.weights()
    mean = w @ cloud.X[:, 0]
    assert abs(paths.X[:, 0, 0].mean() - mean) < 4 * cloud.X[:, 0].std() / math.sqrt(2000)


def test_init_cloud_flat_likelihood_sends_stationary_draws():
    # sigma^2 = 1e12 makes the likelihood flat: X_1 must follow the
    # stationary prior (KS test on 10^4 draws)
    from scipy import stats as sps

    statics = StaticParams(
        ou_x=(OuParams(0.5, np.array([2.0]), np.array([[1.0]])),),
        ou_z=OuParams(1.0, np.zeros(1), np.eye(1)),
        P=(np.array([[1.0], [1.0]]),),
        sigma2=np.array([1e12, 1e12]),
    )
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=10, N=10_000, seed=21)
    cloud, _ = init_cloud(np.zeros(2), statics, cfg, seeded_stream(21, 1))
    ks = sps.kstest(cloud.X[:, 0], sps.norm(loc=2.0, scale=1.0).cdf)
    assert ks.pvalue > 0.01


def test_init_cloud_stationary_start():
    rng = np.random.default_rng(31)
    statics = single_expert_model(rng, d=2, b=0.5, q=2.0, s=1.0)
    cfg = ModelConfig(M=1, K=1, d=2, dt=1.0, L=10, N=20000, seed=4)
    y1 = np.array([0.1, -0.2])
    cloud, info = init_cloud(y1, statics, cfg, seeded_stream(4, 1))
    assert len(cloud) == 20000
    # driver coordinates are a stationary draw: mean 0, var 1/(2 b_z)
    assert abs(cloud.zhat.mean()) < 0.05
    assert abs(cloud.zhat.var() - 0.5) < 0.05
    assert info.log_evidence_increment < 0  # a bona fide log density value
