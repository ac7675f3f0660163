"""
KERNBAL — Rank-restricted Nyström basis
K ≈ D·Dᵀ, D = R·Ṽ_{R,s},  R = C·U_{W,l}·Λ_{W,l}^{-1/2}
"""
from dataclasses import dataclass, replace
from typing import Optional

import logging
import math
import time
import numpy as np

import config
from analysis.kernel import CovariateMatrix, KernelConfig, gram, gram_cross
from core.linalg import eigh_sym, truncated_svd

log = logging.getLogger("KernBal.Nystrom")

PINV_TOL = 1e-12
SCHEMES = ("uniform",)


class NystromRankError(ValueError):
    """W has fewer than l usable singular values: reduce l."""

    def __init__(self, message: str, achievable_rank: int):
        super().__init__(message)
        self.achievable_rank = achievable_rank


class ExactBasisGuardError(ValueError):
    pass


@dataclass(frozen=True)
class SketchConfig:
    m: int = config.SKETCH_M
    s: int = config.SKETCH_S
    l: Optional[int] = None   # None → ⌈(s+m)/2⌉
    seed: int = config.SKETCH_SEED
    scheme: str = config.SKETCH_SCHEME

    def __post_init__(self):
        if self.l is None:
            object.__setattr__(self, "l", math.ceil((self.s + self.m) / 2))
        if self.scheme not in SCHEMES:
            raise ValueError(f"sampling scheme '{self.scheme}' is not implemented (available: {SCHEMES})")
        if not 1 <= self.s <= self.l <= self.m:
            raise ValueError(f"sketch sizes must satisfy 1 <= s <= l <= m, got s={self.s}, l={self.l}, m={self.m}")

    def validate(self, n: int):
        if self.m > n:
            raise ValueError(f"sketch size m={self.m} exceeds n={n}")

    def capped(self, n: int) -> "SketchConfig":
        """Copy with every size at most n (s <= l <= m kept)."""
        m = min(self.m, n)
        l = min(self.l, m)
        s = min(self.s, l)
        return replace(self, m=m, l=l, s=s)

    def with_rank(self, l: int) -> "SketchConfig":
        return replace(self, l=l, s=min(self.s, l))


@dataclass(frozen=True)
class NystromBasis:
    d_factor: np.ndarray          # n x s
    sampled_indices: np.ndarray   # length m
    w_spectrum: np.ndarray        # top-l singular values of W
    config: SketchConfig
    w_spectrum_full: Optional[np.ndarray] = None
    method: str = "nystrom"       # nystrom | exact
    build_time: float = 0.0

    @property
    def n(self) -> int:
        return self.d_factor.shape[0]

    @property
    def s(self) -> int:
        return self.d_factor.shape[1]

    def regularization_errors(self):
        """(‖W⁺ − W_l⁻¹‖₂, ‖W⁺ − W_l⁻¹‖_F²) from the spectrum of W."""
        if self.w_spectrum_full is None or self.method != "nystrom":
            return 0.0, 0.0
        sv = self.w_spectrum_full
        kept = sv[sv > PINV_TOL * sv[0]]
        tail = kept[self.config.l:]
        if tail.size == 0:
            return 0.0, 0.0
        inv = 1.0 / tail
        return float(inv.max()), float(np.sum(inv ** 2))


def _rng(seed: int) -> np.random.Generator:
    # counter-based bit generator: identical streams on every platform
    return np.random.Generator(np.random.Philox(seed))


def sample_indices(n: int, m: int, seed: int) -> np.ndarray:
    """m distinct indices uniformly from [0, n), sorted."""
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    idx = _rng(seed).choice(n, size=m, replace=False)
    return np.sort(idx)


def build_basis(x: CovariateMatrix, cfg: KernelConfig, sketch: SketchConfig) -> NystromBasis:
    t0 = time.perf_counter()
    sketch.validate(x.n)

    idx = sample_indices(x.n, sketch.m, sketch.seed)
    c = gram_cross(x, idx, cfg)                       # n x m
    w = c[idx]
    w = 0.5 * (w + w.T)

    svd_w = truncated_svd(w, sketch.m)
    sv = svd_w.singular_values
    if sv[0] <= 0.0:
        raise NystromRankError("kernel block W is zero", achievable_rank=0)
    achievable = int(np.sum(sv > PINV_TOL * sv[0]))
    if achievable < sketch.l:
        raise NystromRankError(
            f"W has numerical rank {achievable} < l={sketch.l}: reduce l", achievable_rank=achievable
        )

    # W симметрична и PSD: левые сингулярные векторы = собственные
    u_l = svd_w.left[:, :sketch.l]
    r = c @ (u_l / np.sqrt(sv[:sketch.l]))            # n x l
    del c
    svd_r = truncated_svd(r, sketch.s)
    d = svd_r.left * svd_r.singular_values           # = R·Ṽ_{R,s}

    elapsed = time.perf_counter() - t0
    log.info(f"[Nystrom] basis n={x.n} m={sketch.m} l={sketch.l} s={sketch.s} built in {elapsed:.2f}s")
    return NystromBasis(
        d_factor=d,
        sampled_indices=idx,
        w_spectrum=sv[:sketch.l].copy(),
        config=sketch,
        w_spectrum_full=sv.copy(),
        method="nystrom",
        build_time=elapsed,
    )


def exact_basis(x: CovariateMatrix, cfg: KernelConfig, rank: int,
                max_n: int = config.EXACT_BASIS_MAX_N) -> NystromBasis:
    """D = U_r·Λ_r^{1/2} from the exact eigendecomposition of K."""
    if x.n > max_n:
        raise ExactBasisGuardError(f"exact basis needs the full Gram matrix, n={x.n} > {max_n}")
    if not 1 <= rank <= x.n:
        raise ValueError(f"rank must be in [1, {x.n}], got {rank}")
    t0 = time.perf_counter()
    k = gram(x, cfg)
    vals, vecs = eigh_sym(k)
    lam = np.clip(vals[:rank], 0.0, None)
    d = vecs[:, :rank] * np.sqrt(lam)
    elapsed = time.perf_counter() - t0
    return NystromBasis(
        d_factor=d,
        sampled_indices=np.arange(x.n),
        w_spectrum=lam.copy(),
        config=SketchConfig(m=x.n, l=x.n, s=rank, seed=0),
        w_spectrum_full=np.clip(vals, 0.0, None),
        method="exact",
        build_time=elapsed,
    )


def row_coherence(basis: NystromBasis) -> float:
    """μ = (n/s)·max_i ‖U_s[i, :]‖², U_s the left singular vectors of D."""
    norms = np.linalg.norm(basis.d_factor, axis=0)
    keep = norms > 0
    if not np.any(keep):
        return 0.0
    u = basis.d_factor[:, keep] / norms[keep]
    return float(basis.n / keep.sum() * np.max(np.sum(u ** 2, axis=1)))
