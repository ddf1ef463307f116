import numpy as np
import pytest

from pmlds.errors import NumericalError
from pmlds.linalg import chol_batched, logdet_from_chol, solve_lower_batched, solve_upper_batched


def random_spd(rng, n, batch):
    a = rng.standard_normal((batch, n, n))
    return a @ a.transpose(0, 2, 1) + n * np.eye(n)


def test_matches_numpy_cholesky():
    rng = np.random.default_rng(0)
    spd = random_spd(rng, 5, 64)
    L = chol_batched(spd)
    assert np.allclose(L, np.linalg.cholesky(spd), atol=1e-10)


def test_logdet_and_solves():
    rng = np.random.default_rng(1)
    spd = random_spd(rng, 3, 32)
    L = chol_batched(spd)
    _, expected = np.linalg.slogdet(spd)
    assert np.allclose(logdet_from_chol(L), expected, atol=1e-10)

    b = rng.standard_normal((32, 3))
    y = solve_lower_batched(L, b)
    assert np.allclose(np.einsum("bij,bj->bi", L, y), b, atol=1e-10)
    x = solve_upper_batched(L, y)
    assert np.allclose(np.einsum("bij,bj->bi", spd, x), b, atol=1e-8)


def test_one_by_one_fast_path():
    spd = np.array([[[4.0]], [[9.0]]])
    assert np.allclose(chol_batched(spd)[:, 0, 0], [2.0, 3.0])


def test_non_spd_raises():
    bad = np.array([[[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(NumericalError):
        chol_batched(bad)
