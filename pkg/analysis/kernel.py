"""
KERNBAL — Gaussian Kernel
Стандартизация ковариат, эвристика ширины окна (ранг X), матрицы Грама.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import logging
import numpy as np
from scipy.linalg import svdvals
from scipy.spatial.distance import cdist
from sklearn.preprocessing import StandardScaler

import config

log = logging.getLogger("KernBal.Kernel")


class KernelError(ValueError):
    pass


def _gaussian(sq_dist: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_dist / bandwidth)


# Extension point: other universal kernels register a function of squared distances here
KERNELS: Dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "gaussian": _gaussian,
}


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float
    standardize: bool = config.STANDARDIZE
    kind: str = "gaussian"

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise KernelError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.kind not in KERNELS:
            raise KernelError(f"unknown kernel '{self.kind}', available: {sorted(KERNELS)}")

    @classmethod
    def for_covariates(cls, x: "CovariateMatrix", standardize: bool = config.STANDARDIZE) -> "KernelConfig":
        """Bandwidth = numerical rank of the standardized covariates."""
        return cls(bandwidth=default_bandwidth(x), standardize=standardize)


@dataclass(frozen=True)
class CovariateMatrix:
    """
    Covariates of n units. `raw` keeps the input scale, `standardized`
    has mean 0 / sd 1 per column (constant columns mapped to 0).
    """
    raw: np.ndarray
    standardized: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    names: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.raw.shape[0]

    @property
    def d(self) -> int:
        return self.raw.shape[1]

    def values(self, standardize: bool) -> np.ndarray:
        return self.standardized if standardize else self.raw

    @classmethod
    def from_array(cls, values, names: Optional[Sequence[str]] = None) -> "CovariateMatrix":
        raw = np.asarray(values, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[:, None]
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise KernelError(f"covariates must be an n x d matrix with n, d >= 1, got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise KernelError("covariates contain non-finite values")
        if names is None:
            names = [f"X{j + 1}" for j in range(raw.shape[1])]
        if len(names) != raw.shape[1]:
            raise KernelError(f"{len(names)} names for {raw.shape[1]} columns")

        scaler = StandardScaler().fit(raw)
        std = scaler.transform(raw)
        # StandardScaler leaves constant columns centred, i.e. exactly 0
        constant = scaler.var_ <= 0.0
        std[:, constant] = 0.0
        return cls(raw=raw, standardized=std, means=scaler.mean_.copy(),
                   sds=np.sqrt(scaler.var_), names=list(names))


def numerical_rank(values: np.ndarray, tol: float = config.RANK_TOL) -> int:
    sv = svdvals(values)
    if sv.size == 0 or sv[0] <= 0.0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def default_bandwidth(x: CovariateMatrix, tol: float = config.RANK_TOL) -> float:
    """Column rank of standardized X, floored at 1."""
    rank = numerical_rank(x.standardized, tol)
    if rank == 0:
        log.warning("[Kernel] ⚠️ all-zero covariate matrix, bandwidth falls back to 1")
        return 1.0
    return float(rank)


def _kernel_values(xa: np.ndarray, xb: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    sq = cdist(xa, xb, "sqeuclidean")
    return KERNELS[cfg.kind](sq, cfg.bandwidth)


def gram(x: CovariateMatrix, cfg: KernelConfig) -> np.ndarray:
    """Full n x n kernel matrix (small n only)."""
    v = x.values(cfg.standardize)
    k = _kernel_values(v, v, cfg)
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def gram_cross(x: CovariateMatrix, column_indices, cfg: KernelConfig,
               chunk_rows: int = config.GRAM_CHUNK_ROWS) -> np.ndarray:
    """n x m block K[:, I] evaluated in row chunks, never forming the n x n matrix."""
    idx = np.asarray(column_indices)
    if idx.ndim != 1 or idx.size == 0:
        raise KernelError("column_indices must be a non-empty index vector")
    if not np.issubdtype(idx.dtype, np.integer):
        raise KernelError(f"column_indices must be integers, got {idx.dtype}")
    if idx.min() < 0 or idx.max() >= x.n:
        raise KernelError(f"column index out of range [0, {x.n})")
    if np.unique(idx).size != idx.size:
        raise KernelError("duplicate column index")

    v = x.values(cfg.standardize)
    centers = v[idx]
    out = np.empty((x.n, idx.size), dtype=np.float64)
    for start in range(0, x.n, chunk_rows):
        stop = min(start + chunk_rows, x.n)
        out[start:stop] = _kernel_values(v[start:stop], centers, cfg)
    # нулевое расстояние → ровно 1
    out[idx, np.arange(idx.size)] = 1.0
    return out
