import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmlds.membership import to_simplex


def test_zero_driver_gives_uniform_weights():
    for m in (1, 2, 5):
        assert np.allclose(to_simplex(np.zeros(m)), np.full(m, 1.0 / m), atol=1e-15)


def test_two_expert_example():
    z = to_simplex(np.array([0.0, 0.0]))
    assert np.allclose(z, [0.5, 0.5], atol=1e-15)
    z = to_simplex(np.array([30.0, -30.0]))
    assert abs(z[0] - 1.0) < 1e-9
    assert z[1] > 0


def test_bulk_draws_stay_on_simplex():
    # 10^5 draws spanning the full supported driver range [-700, 700]:
    # strictly positive, sums exactly one
    rng = np.random.default_rng(0)
    zhat = rng.uniform(-700, 700, (100_000, 3))
    z = to_simplex(zhat)
    assert z.shape == zhat.shape
    assert np.all(z > 0)
    assert np.all(z <= 1)  # a dominant weight may round to exactly 1.0
    assert np.allclose(z.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_extreme_inputs_do_not_overflow():
    # beyond the supported [-700, 700] range only finiteness and
    # normalization are promised (the floor term may underflow to zero)
    z = to_simplex(np.array([[800.0, -800.0], [-1000.0, -1050.0], [1e308, 0.0]]))
    assert np.all(np.isfinite(z))
    assert np.all(z >= 0)
    assert np.allclose(z.sum(axis=-1), 1.0, atol=1e-12)
    assert z[0, 0] > 1 - 1e-12
    # all coordinates far below zero: the floor term takes over -> uniform
    assert np.allclose(z[1], 0.5, atol=1e-12)


def test_monotone_in_own_coordinate():
    base = np.array([0.3, -0.2, 1.0])
    lifted = base.copy()
    lifted[1] += 0.5
    assert to_simplex(lifted)[1] > to_simplex(base)[1]


def test_single_expert_is_constant_one():
    zhat = np.linspace(-50, 50, 101)[:, None]  # (101, 1)
    assert np.allclose(to_simplex(zhat), 1.0, atol=1e-15)


def test_scalar_input_rejected():
    with pytest.raises(ValueError):
        to_simplex(np.float64(0.3))


@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 4), st.integers(1, 6)),
        elements=st.floats(-700, 700, allow_nan=False),
    )
)
@settings(max_examples=200, deadline=None)
def test_simplex_properties_hold_everywhere(zhat):
    z = to_simplex(zhat)
    assert np.all(z > 0)
    assert np.allclose(z.sum(axis=-1), 1.0, atol=1e-9)


@given(
    arrays(np.float64, st.integers(2, 5), elements=st.floats(-100, 100, allow_nan=False)),
    st.randoms(use_true_random=False),
)
@settings(max_examples=100, deadline=None)
def test_permutation_equivariance(zhat, pyrandom):
    perm = np.arange(zhat.shape[0])
    pyrandom.shuffle(perm)
    assert np.allclose(to_simplex(zhat[perm]), to_simplex(zhat)[perm], atol=1e-12)
