import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectralbp.linalg import (DimensionError, NotPositiveDefiniteError, NotSymmetricError, Rng, cholesky,
                               cholesky_logdet, matvec, rademacher, random_spd, sym_eig)


def test_matvec_examples():
    np.testing.assert_array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(matvec(np.diag([2.0, 3.0]), [1, 1]), [2, 3])
    np.testing.assert_array_equal(matvec([[0, 1], [1, 0]], [5, 7]), [7, 5])


def test_matvec_dimension_mismatch():
    with pytest.raises(DimensionError):
        matvec(np.eye(3), [1.0, 2.0])


def test_cholesky_logdet_examples():
    assert cholesky_logdet(np.eye(5)) == 0.0
    assert cholesky_logdet(np.diag([2.0, 2.0])) == pytest.approx(2 * math.log(2), abs=1e-15)


def test_cholesky_logdet_matches_eigenvalues_8x8():
    b = Rng(3).normal((8, 8))
    a = b.T @ b + np.eye(8)
    w, _ = sym_eig(a)
    assert cholesky_logdet(a) == pytest.approx(np.sum(np.log(w)), abs=1e-10)


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_logdet(np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefiniteError):
        cholesky(np.zeros((3, 3)))


def test_cholesky_factor_reconstructs():
    a, _ = random_spd(Rng(1), 12, 50.0)
    L = cholesky(a)
    np.testing.assert_allclose(L @ L.T, a, atol=1e-12)
    assert np.allclose(np.triu(L, 1), 0.0)


def test_cholesky_logdet_batched():
    a = np.stack([np.eye(3) * 2, np.eye(3) * 3])
    np.testing.assert_allclose(cholesky_logdet(a), [3 * math.log(2), 3 * math.log(3)])


def test_sym_eig_diagonal():
    w, v = sym_eig(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(w, [3, 2, 1], atol=1e-14)
    np.testing.assert_allclose(np.abs(v), np.eye(3)[:, [0, 2, 1]], atol=1e-14)


def test_sym_eig_classic_2x2():
    w, v = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3, 1], atol=1e-14)
    s = 1 / math.sqrt(2)
    assert abs(abs(v[:, 0] @ [s, s]) - 1) < 1e-12
    assert abs(abs(v[:, 1] @ [s, -s]) - 1) < 1e-12


def test_sym_eig_reconstruction_16():
    b = Rng(5).normal((16, 16))
    a = b + b.T
    w, v = sym_eig(a)
    assert np.max(np.abs(v @ np.diag(w) @ v.T - a)) < 1e-9
    assert np.all(np.diff(w) <= 0)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(NotSymmetricError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_rademacher_examples():
    r = rademacher(Rng(0), 1000)
    assert set(np.unique(r)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(rademacher(Rng(4), 50), rademacher(Rng(4), 50))
    assert abs(np.mean(rademacher(Rng(9), 100_000))) < 0.02


def test_rng_streams_differ_and_repeat():
    a, b = Rng(1, 0), Rng(1, 1)
    assert not np.array_equal(a.normal(10), b.normal(10))
    np.testing.assert_array_equal(a.normal(10), Rng(1, 0).normal(10))
    assert a.split(3) == a.split(3) and a.split(3) != a.split(4)


def test_random_spd_condition_number():
    a, lam = random_spd(Rng(2), 20, 1000.0, lam_min=0.5)
    w, _ = sym_eig(a)
    np.testing.assert_allclose(w, lam, rtol=1e-9)
    assert lam[0] / lam[-1] == pytest.approx(1000.0)
    assert lam[-1] == pytest.approx(0.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 24))
def test_eigenvectors_orthonormal_and_logdet_agrees(seed, n):
    a, _ = random_spd(Rng(seed), n, 100.0)
    w, v = sym_eig(a)
    assert np.max(np.abs(v.T @ v - np.eye(n))) < 1e-8
    assert np.max(np.abs(a @ v - v * w)) < 1e-8 * np.linalg.norm(a)
    ref = np.sum(np.log(w))
    assert abs(cholesky_logdet(a) - ref) <= 1e-8 * max(1.0, abs(ref))
