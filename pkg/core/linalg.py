"""
KERNBAL — Linear Algebra
Плотные и разреженные примитивы: симметричное разложение, усечённый SVD,
LDLᵀ-факторизация квазиопределённых KKT-систем.
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import logging
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger("KernBal.Linalg")

# Dense matrices are plain float64 ndarrays
DenseMatrix = np.ndarray

SYMMETRY_TOL = 1e-10


class LinalgError(ValueError):
    pass


class ZeroPivotError(LinalgError):
    pass


class StructuralAsymmetryError(LinalgError):
    pass


def as_dense(a, name: str = "matrix") -> DenseMatrix:
    """Проверка: двумерный конечный float64 массив."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinalgError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class TruncatedSvd:
    rank: int
    left: DenseMatrix             # rows x rank
    singular_values: np.ndarray   # nonincreasing
    right: DenseMatrix            # cols x rank (V, not V^T)

    def reconstruct(self) -> DenseMatrix:
        return (self.left * self.singular_values) @ self.right.T


def eigh_sym(a) -> Tuple[np.ndarray, DenseMatrix]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues nonincreasing."""
    arr = as_dense(a)
    if arr.shape[0] != arr.shape[1]:
        raise LinalgError(f"eigh_sym needs a square matrix, got {arr.shape}")
    scale = max(np.abs(arr).max(initial=0.0), 1.0)
    asym = np.abs(arr - arr.T).max(initial=0.0)
    if asym > SYMMETRY_TOL * scale:
        log.warning(f"[Linalg] ⚠️ asymmetry {asym:.2e} above tolerance, symmetrizing")
    vals, vecs = sla.eigh(0.5 * (arr + arr.T))
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def truncated_svd(a, rank: int) -> TruncatedSvd:
    """Best rank-`rank` approximation U Σ Vᵀ (Eckart–Young)."""
    arr = as_dense(a)
    rows, cols = arr.shape
    if not 1 <= rank <= min(rows, cols):
        raise LinalgError(f"rank {rank} out of range [1, {min(rows, cols)}]")
    try:
        u, s, vt = sla.svd(arr, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        # gesdd иногда не сходится на вырожденных матрицах
        u, s, vt = sla.svd(arr, full_matrices=False, lapack_driver="gesvd")
    return TruncatedSvd(
        rank=rank,
        left=u[:, :rank].copy(),
        singular_values=s[:rank].copy(),
        right=vt[:rank, :].T.copy(),
    )


@dataclass(frozen=True)
class SparseSymmetric:
    """Symmetric sparse matrix, upper triangle in CSC."""
    dim: int
    upper: sp.csc_matrix

    @classmethod
    def from_full(cls, a, tol: float = 0.0) -> "SparseSymmetric":
        m = sp.csc_matrix(a, dtype=np.float64)
        if m.shape[0] != m.shape[1]:
            raise LinalgError(f"KKT matrix must be square, got {m.shape}")
        diff = m - m.T
        if diff.nnz and np.abs(diff.data).max() > tol:
            raise StructuralAsymmetryError("matrix is not symmetric")
        upper = sp.triu(m, format="csc")
        # диагональ присутствует в структуре для каждой строки
        upper = upper + sp.diags(np.zeros(m.shape[0]), format="csc")
        upper.sort_indices()
        return cls(dim=m.shape[0], upper=upper)

    def to_full(self) -> sp.csc_matrix:
        diag = sp.diags(self.upper.diagonal(), format="csc")
        return (self.upper + self.upper.T - diag).tocsc()

    def to_dense(self) -> DenseMatrix:
        return self.to_full().toarray()


@dataclass
class LdlFactor:
    """P·L·D·Lᵀ·Pᵀ factor of a quasi-definite matrix, reusable across right-hand sides."""
    dim: int
    permutation: np.ndarray
    diagonal: np.ndarray
    _lu: object = field(repr=False)
    _lower: Optional[sp.csc_matrix] = field(default=None, repr=False)

    @property
    def lower(self) -> sp.csc_matrix:
        if self._lower is None:
            if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
                raise LinalgError("factor used non-symmetric pivoting, no LDLᵀ form available")
            self._lower = self._lu.L.tocsc()
        return self._lower

    def reconstruct(self) -> sp.csc_matrix:
        # P[i, perm[i]] = 1, A = P·L·D·Lᵀ·Pᵀ
        n = self.dim
        p = sp.csc_matrix((np.ones(n), (np.arange(n), self.permutation)), shape=(n, n))
        l_fac = self.lower
        return (p @ l_fac @ sp.diags(self.diagonal) @ l_fac.T @ p.T).tocsc()


def ldl_factor(kkt: SparseSymmetric) -> LdlFactor:
    """LDLᵀ with a minimum-degree fill-reducing ordering and diagonal pivots only."""
    full = kkt.to_full()
    try:
        lu = splu(
            full,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise ZeroPivotError(f"zero pivot in LDLᵀ (matrix not quasi-definite): {e}")

    d = lu.U.diagonal()
    if np.any(d == 0.0) or not np.all(np.isfinite(d)):
        raise ZeroPivotError("zero pivot in LDLᵀ (matrix not quasi-definite)")
    return LdlFactor(dim=kkt.dim, permutation=np.asarray(lu.perm_c).copy(), diagonal=d.copy(), _lu=lu)


def ldl_solve(factor: LdlFactor, rhs) -> np.ndarray:
    b = np.asarray(rhs, dtype=np.float64)
    if b.ndim != 1 or b.shape[0] != factor.dim:
        raise LinalgError(f"rhs length {b.shape} does not match factor dimension {factor.dim}")
    return factor._lu.solve(b)
