"""Banded Cholesky kernels and their pure-array twins."""

import numpy as np
import pytest
import scipy.linalg

from hiersim import _kernels


def dense_to_band(a: np.ndarray, bw: int) -> np.ndarray:
    """Pack the lower diagonals of a symmetric matrix: band[d, j] = a[j + d, j]."""
    n = a.shape[0]
    band = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        band[d, : n - d] = np.diag(a, -d)
    return band


def random_band_spd(rng, n: int, bw: int) -> np.ndarray:
    """A random SPD matrix whose bandwidth is exactly bw."""
    l = np.tril(rng.standard_normal((n, n)), 0)
    l = np.triu(np.tril(l, 0), -bw)
    np.fill_diagonal(l, np.abs(np.diag(l)) + 1.0)
    return l @ l.T


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------


def test_band_cholesky_matches_dense_factor():
    """The band factor equals the lower Cholesky factor of the dense matrix."""
    rng = np.random.default_rng(0)
    for n, bw in ((5, 1), (12, 3), (30, 7)):
        a = random_band_spd(rng, n, bw)
        band = dense_to_band(a, bw)
        assert _kernels.band_cholesky(band) == -1
        expect = scipy.linalg.cholesky(a, lower=True)
        got = np.zeros_like(a)
        for d in range(bw + 1):
            got += np.diag(band[d, : n - d], -d)
        assert np.allclose(got, expect, rtol=1e-10, atol=1e-12)


def test_band_solve_matches_dense_solve():
    """Factored band solves reproduce the dense linear solve."""
    rng = np.random.default_rng(1)
    a = random_band_spd(rng, 20, 4)
    rhs = rng.standard_normal(20)
    band = dense_to_band(a, 4)
    assert _kernels.band_cholesky(band) == -1
    x = rhs.copy()
    _kernels.band_solve(band, x)
    assert np.allclose(x, np.linalg.solve(a, rhs), rtol=1e-9, atol=1e-11)


def test_band_logdet_matches_slogdet():
    """The log determinant from the factor matches the dense value."""
    rng = np.random.default_rng(2)
    a = random_band_spd(rng, 15, 3)
    band = dense_to_band(a, 3)
    assert _kernels.band_cholesky(band) == -1
    sign, expect = np.linalg.slogdet(a)
    assert sign == 1.0
    assert np.isclose(_kernels.band_logdet(band), expect, rtol=1e-10)


def test_band_cholesky_reports_failing_column():
    """An indefinite matrix returns the first bad pivot instead of garbage."""
    a = np.diag([4.0, 1.0, -2.0, 1.0])
    band = dense_to_band(a, 1)
    assert _kernels.band_cholesky(band) == 2
    band0 = dense_to_band(-np.eye(3), 1)
    assert _kernels.band_cholesky(band0) == 0


# ---------------------------------------------------------------------------
# backend equivalence
# ---------------------------------------------------------------------------


def test_band_backends_agree():
    """Compiled and plain-array band routines produce identical results."""
    rng = np.random.default_rng(3)
    a = random_band_spd(rng, 25, 5)
    rhs = rng.standard_normal(25)

    band_a = dense_to_band(a, 5)
    band_b = band_a.copy()
    x_a = rhs.copy()
    x_b = rhs.copy()

    assert _kernels._band_cholesky_numpy(band_a) == -1
    _kernels._band_solve_numpy(band_a, x_a)
    if _kernels.NUMBA_ENABLED:
        assert _kernels._band_cholesky_jit(band_b) == -1
        _kernels._band_solve_jit(band_b, x_b)
    else:
        assert _kernels._band_cholesky_loops(band_b) == -1
        _kernels._band_solve_loops(band_b, x_b)
    assert np.allclose(band_a, band_b, rtol=1e-13, atol=1e-15)
    assert np.allclose(x_a, x_b, rtol=1e-13, atol=1e-15)


def test_backend_name_reports_mode():
    """The backend label matches the compiled-mode flag."""
    name = _kernels.backend_name()
    assert name == ("numba" if _kernels.NUMBA_ENABLED else "numpy")


def test_warm_up_runs():
    """The warm-up helper exercises every kernel without error."""
    _kernels.warm_up()
