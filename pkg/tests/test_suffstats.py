"""Block sufficient statistics and the stochastic-approximation blend."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmlds import ModelConfig
from pmlds.smc import SmoothedPaths
from pmlds.suffstats import SuffStats, blend, blend_at, gamma_schedule

from oracles import naive_emission_stats, naive_ou_stats


def make_paths(rng, n=6, L=9, m=2, k=2):
    return SmoothedPaths(
        X=rng.standard_normal((n, L, m * k)),
        zhat=rng.standard_normal((n, L, m)),
    )


def make_stats(rng, ys=None, **kw):
    paths = make_paths(rng, **kw)
    L = paths.X.shape[1]
    m = paths.zhat.shape[2]
    k = paths.X.shape[2] // m
    d = 4
    if ys is None:
        ys = rng.standard_normal((L, d))
    cfg = ModelConfig(M=m, K=k, d=d, dt=1.0, L=L, N=2)
    return SuffStats.from_smoothed(paths, ys, cfg), paths, ys


def test_ou_stats_match_naive_double_loop():
    rng = np.random.default_rng(0)
    stats, paths, ys = make_stats(rng, n=5, L=7, m=2, k=2)
    for m in range(2):
        block = paths.X[:, :, 2 * m : 2 * m + 2]
        ref = naive_ou_stats(block)
        got = stats.ou_x[m]
        for name, val in ref.items():
            assert np.allclose(getattr(got, name), val, rtol=0, atol=1e-12), (m, name)
    ref_z = naive_ou_stats(paths.zhat)
    for name, val in ref_z.items():
        assert np.allclose(getattr(stats.ou_z, name), val, atol=1e-12), name


def test_emission_stats_match_naive_double_loop():
    rng = np.random.default_rng(1)
    stats, paths, ys = make_stats(rng, n=4, L=6, m=2, k=1)
    from pmlds.membership import to_simplex

    ref = naive_emission_stats(to_simplex(paths.zhat), paths.X, ys)
    assert np.allclose(stats.emission.A, ref["A"], atol=1e-12)
    assert np.allclose(stats.emission.B, ref["B"], atol=1e-12)
    assert np.allclose(stats.emission.ysq, ref["ysq"], atol=1e-12)
    assert np.allclose(stats.emission.B, stats.emission.B.T, atol=0)  # symmetrized


def test_constant_trajectory_identities():
    # x_t = c for all t: differences vanish, moments are rank-one
    c = np.array([1.5, -2.0])
    L = 11
    paths = SmoothedPaths(
        X=np.tile(c, (3, L, 1)), zhat=np.zeros((3, L, 1))
    )
    ys = np.zeros((L, 4))
    cfg = ModelConfig(M=1, K=2, d=4, dt=1.0, L=L, N=2)
    stats = SuffStats.from_smoothed(paths, ys, cfg)
    ou = stats.ou_x[0]
    assert np.allclose(ou.phi1, c, atol=0)
    assert np.allclose(ou.phi2, np.outer(c, c), atol=1e-14)
    assert np.allclose(ou.phi3, (L - 1) * c, atol=1e-12)
    assert np.allclose(ou.phi4, 0.0, atol=0)
    assert np.allclose(ou.phi5, (L - 1) * np.outer(c, c), atol=1e-12)
    assert np.allclose(ou.phi6, 0.0, atol=0)
    assert np.allclose(ou.phi7, 0.0, atol=0)


def test_gamma_schedule():
    assert gamma_schedule(1, 0.51) == 1.0
    assert np.isclose(gamma_schedule(4, 0.5001), 0.5 ** (2 * 0.5001))
    assert np.isclose(gamma_schedule(9, 1.0), 1.0 / 9.0)


def test_blend_first_block_replaces():
    rng = np.random.default_rng(2)
    stats, _, _ = make_stats(rng)
    out = blend(None, stats, k=1, gamma_exponent=0.51)
    assert np.array_equal(out.ou_x[0].phi2, stats.ou_x[0].phi2)


def test_blend_weights_convex():
    rng = np.random.default_rng(3)
    s1, _, _ = make_stats(rng)
    s2, _, _ = make_stats(rng)
    k, a = 4, 0.51
    g = gamma_schedule(k, a)
    out = blend(s1, s2, k=k, gamma_exponent=a)
    expected = (1 - g) * s1.ou_x[1].phi5 + g * s2.ou_x[1].phi5
    assert np.allclose(out.ou_x[1].phi5, expected, atol=1e-14)
    expected_b = (1 - g) * s1.emission.B + g * s2.emission.B
    assert np.allclose(out.emission.B, expected_b, atol=1e-14)


def test_blend_at_zero_gamma_keeps_previous():
    rng = np.random.default_rng(4)
    s1, _, _ = make_stats(rng)
    s2, _, _ = make_stats(rng)
    out = blend_at(s1, s2, 0.0)
    assert out is s1
    out = blend_at(s1, s2, 1.0)
    assert out is s2


def test_blend_at_rejects_bad_gamma():
    rng = np.random.default_rng(5)
    s1, _, _ = make_stats(rng)
    with pytest.raises(ValueError):
        blend_at(s1, s1, -0.1)
    with pytest.raises(ValueError):
        blend_at(s1, s1, 1.5)


def test_block_len_mismatch_rejected():
    rng = np.random.default_rng(6)
    s1, _, _ = make_stats(rng, L=9)
    s2, _, _ = make_stats(rng, L=8)
    with pytest.raises(ValueError):
        blend_at(s1, s2, 0.5)


@given(st.integers(1, 500), st.floats(0.501, 1.0))
@settings(max_examples=200, deadline=None)
def test_gamma_schedule_properties(k, a):
    g = gamma_schedule(k, a)
    assert 0 < g <= 1
    if k > 1:
        assert g < gamma_schedule(k - 1, a)
