import numpy as np
import pytest
import scipy.sparse as sp

from core.linalg import (
    LinalgError, SparseSymmetric, StructuralAsymmetryError, ZeroPivotError,
    eigh_sym, ldl_factor, ldl_solve, truncated_svd,
)


def _random_sym(rng, n):
    a = rng.standard_normal((n, n))
    return a + a.T


def _quasi_definite(rng, n1, n2, density=0.3):
    """[[-P, Aᵀ], [A, R]] with P, R positive definite."""
    b = rng.standard_normal((n1, n1))
    p = b @ b.T + n1 * np.eye(n1)
    c = rng.standard_normal((n2, n2))
    r = c @ c.T + n2 * np.eye(n2)
    a = rng.standard_normal((n2, n1)) * (rng.random((n2, n1)) < density)
    return np.block([[-p, a.T], [a, r]])


# ─── eigh_sym ───

def test_eigh_identity():
    vals, vecs = eigh_sym(np.eye(3))
    assert np.allclose(vals, [1, 1, 1])
    assert np.allclose(vecs.T @ vecs, np.eye(3))


def test_eigh_diagonal_sorted():
    vals, vecs = eigh_sym(np.diag([2.0, 5.0, -1.0]))
    assert np.allclose(vals, [5, 2, -1])
    assert np.allclose(np.abs(vecs), np.eye(3)[:, [1, 0, 2]])


def test_eigh_random_reconstruction_and_trace():
    rng = np.random.default_rng(0)
    a = _random_sym(rng, 8)
    vals, vecs = eigh_sym(a)
    rec = vecs @ np.diag(vals) @ vecs.T
    assert np.linalg.norm(rec - a) / np.linalg.norm(a) <= 1e-10
    assert np.all(np.diff(vals) <= 0)
    assert np.allclose(a @ vecs, vecs * vals, rtol=1e-8, atol=1e-8 * np.abs(vals).max())
    assert abs(vals.sum() - np.trace(a)) <= 1e-10 * max(1.0, abs(np.trace(a)))


def test_eigh_errors():
    with pytest.raises(LinalgError):
        eigh_sym(np.ones((2, 3)))
    with pytest.raises(LinalgError):
        eigh_sym(np.array([[1.0, np.nan], [np.nan, 1.0]]))


# ─── truncated_svd ───

def test_svd_full_rank_exact():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((7, 5))
    t = truncated_svd(a, 5)
    assert np.linalg.norm(t.reconstruct() - a) <= 1e-9 * np.linalg.norm(a)
    assert np.allclose(t.left.T @ t.left, np.eye(5), atol=1e-10)
    assert np.allclose(t.right.T @ t.right, np.eye(5), atol=1e-10)


def test_svd_rank_one_outer_product():
    u = np.array([1.0, 2.0, 2.0])
    v = np.array([3.0, 4.0])
    t = truncated_svd(np.outer(u, v), 2)
    assert t.singular_values[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))
    assert t.singular_values[1] == pytest.approx(0.0, abs=1e-12)


def test_svd_rank_two_matches_eigh_of_gram():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((6, 4))
    t = truncated_svd(a, 2)
    lam, _ = eigh_sym(a.T @ a)
    resid = np.linalg.norm(a - t.reconstruct())
    assert resid == pytest.approx(np.sqrt(lam[2] + lam[3]), rel=1e-8)
    assert np.allclose(t.singular_values, np.sqrt(lam[:2]), rtol=1e-8)
    # Eckart–Young: spectral residual = σ₃
    assert np.linalg.norm(a - t.reconstruct(), 2) == pytest.approx(np.sqrt(lam[2]), rel=1e-8)


def test_svd_singular_values_match_eigh_on_random_matrices():
    rng = np.random.default_rng(3)
    for _ in range(20):
        rows, cols = rng.integers(2, 15, size=2)
        a = rng.standard_normal((rows, cols))
        k = min(rows, cols)
        t = truncated_svd(a, k)
        lam, _ = eigh_sym(a.T @ a if cols <= rows else a @ a.T)
        assert np.allclose(t.singular_values, np.sqrt(np.clip(lam[:k], 0, None)), rtol=1e-8, atol=1e-10)


def test_svd_rank_out_of_range():
    with pytest.raises(LinalgError):
        truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(LinalgError):
        truncated_svd(np.ones((3, 2)), 0)


# ─── LDLᵀ ───

def test_ldl_diagonal():
    f = ldl_factor(SparseSymmetric.from_full(np.diag([-2.0, 3.0])))
    assert np.allclose(f.diagonal[f.permutation], [-2.0, 3.0])
    assert np.allclose(f.lower.toarray(), np.eye(2))
    assert np.allclose(ldl_solve(f, [2.0, 6.0]), [-1.0, 2.0])


def test_ldl_two_by_two_reconstruction():
    a = np.array([[-2.0, 1.0], [1.0, 1.5]])
    f = ldl_factor(SparseSymmetric.from_full(a))
    assert np.abs(f.reconstruct().toarray() - a).max() <= 1e-12


def test_ldl_identity_solve():
    f = ldl_factor(SparseSymmetric.from_full(np.eye(4)))
    r = np.array([1.0, -2.0, 3.5, 0.25])
    assert np.allclose(ldl_solve(f, r), r)


def test_ldl_random_quasi_definite_matches_dense():
    rng = np.random.default_rng(4)
    a = _quasi_definite(rng, 4, 6)
    f = ldl_factor(SparseSymmetric.from_full(a))
    rhs = rng.standard_normal(10)
    assert np.allclose(ldl_solve(f, rhs), np.linalg.solve(a, rhs), atol=1e-8)
    probe = rng.standard_normal(10)
    rec = f.reconstruct() @ probe
    assert np.linalg.norm(rec - a @ probe) <= 1e-8 * np.linalg.norm(a @ probe)


def test_ldl_residual_bound_many_systems():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n1 = int(rng.integers(1, 100))
        n2 = int(rng.integers(1, 100))
        a = _quasi_definite(rng, n1, n2, density=float(rng.uniform(0.01, 0.5)))
        f = ldl_factor(SparseSymmetric.from_full(a))
        for _ in range(2):
            rhs = rng.standard_normal(n1 + n2)
            x = ldl_solve(f, rhs)
            assert np.abs(a @ x - rhs).max() <= 1e-8 * (1.0 + np.abs(rhs).max())


def test_ldl_upper_storage_only():
    a = np.array([[-3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 4.0]])
    s = SparseSymmetric.from_full(a)
    assert sp.tril(s.upper, k=-1).nnz == 0
    assert np.allclose(s.to_dense(), a)


def test_ldl_zero_pivot_and_asymmetry():
    with pytest.raises(ZeroPivotError):
        ldl_factor(SparseSymmetric.from_full(np.zeros((2, 2))))
    with pytest.raises(StructuralAsymmetryError):
        SparseSymmetric.from_full(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_ldl_solve_dimension_mismatch():
    f = ldl_factor(SparseSymmetric.from_full(np.eye(3)))
    with pytest.raises(LinalgError):
        ldl_solve(f, np.ones(4))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
