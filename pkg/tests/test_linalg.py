import numpy as np
import pytest
import scipy.sparse as sp

from brinkfem.linalg import (LUFactor, SingularSystemError, backward_error,
                             factorize, solve)


def test_identity():
    A = sp.identity(5, format="csr")
    b = np.arange(5.0)
    assert np.array_equal(solve(A, b), b)


def test_pivoting_required():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    x = solve(A, np.array([1.0, 2.0]))
    assert np.allclose(x, [2.0, 1.0])


def test_random_spd_residual():
    rng = np.random.default_rng(0)
    n = 200
    density = sp.random(n, n, density=0.03, random_state=rng, format="csr")
    A = density @ density.T + sp.identity(n) * n
    b = rng.normal(size=n)
    x = solve(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert backward_error(sp.csc_matrix(A), x, b) <= 1e-10


def test_linearity_and_zero_rhs():
    rng = np.random.default_rng(3)
    A = sp.csr_matrix(rng.normal(size=(8, 8)) + 8 * np.eye(8))
    f = factorize(A)
    b = rng.normal(size=8)
    x = f.solve(b)
    assert np.allclose(f.solve(2 * b), 2 * x, atol=1e-12)
    assert np.array_equal(f.solve(np.zeros(8)), np.zeros(8))


def test_refactorize_matches_dense():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(10, 10)) + 10 * np.eye(10)
    b = rng.normal(size=10)
    x1 = factorize(sp.csr_matrix(M)).solve(b)
    M2 = M.copy()
    M2[3, 7] += 2.5
    x2 = factorize(sp.csr_matrix(M2)).solve(b)
    assert np.allclose(x1, np.linalg.solve(M, b), atol=1e-12)
    assert np.allclose(x2, np.linalg.solve(M2, b), atol=1e-12)


def test_singular_matrix_raises():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularSystemError):
        factorize(A).solve(np.ones(2))


def test_dimension_checks():
    A = sp.identity(4, format="csr")
    f = factorize(A)
    assert isinstance(f, LUFactor)
    with pytest.raises(ValueError):
        f.solve(np.ones(5))
    with pytest.raises(ValueError):
        factorize(sp.csr_matrix(np.ones((2, 3))))
