"""
KERNBAL — Stable balancing weights
Сборка задачи SBW (ядерный базис Нистрёма, точный базис, сырые моменты),
веса контрольной группы и линейная оценка ATT.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import logging
import numpy as np
import pandas as pd

import config
from analysis.kernel import CovariateMatrix, KernelConfig
from analysis.nystrom import NystromBasis, SketchConfig, build_basis, exact_basis
from core.qp_solver import SbwProblem, SolverSettings, WeightSolution, setup, solve

log = logging.getLogger("KernBal.Balancing")

DEGENERATE_VAR = 1e-12
NORMALIZATION_TOL = 1e-4


class SampleError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    x: CovariateMatrix
    a: np.ndarray     # 0/1
    y: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=np.float64)
        if a.shape != (self.x.n,) or y.shape != (self.x.n,):
            raise SampleError(f"treatment/outcome length must equal n={self.x.n}")
        if not np.all(np.isin(a, (0, 1))):
            raise SampleError("treatment must be binary (0/1)")
        if not np.all(np.isfinite(y)):
            raise SampleError("outcome contains non-finite values")
        a = a.astype(np.int8)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        if a.sum() < 1 or a.sum() == a.size:
            raise SampleError(f"need at least one treated and one control unit (n_t={int(a.sum())}, n={a.size})")

    @property
    def n(self) -> int:
        return self.x.n

    @property
    def n_t(self) -> int:
        return int(self.a.sum())

    @property
    def n_c(self) -> int:
        return self.n - self.n_t

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.a == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.a == 0)

    def with_outcome(self, y) -> "Sample":
        return Sample(self.x, self.a, y)

    @classmethod
    def from_arrays(cls, x, a, y, names: Optional[Sequence[str]] = None) -> "Sample":
        return cls(CovariateMatrix.from_array(x, names), np.asarray(a), np.asarray(y, dtype=np.float64))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, treatment: str, outcome: str,
                   covariates: Optional[Sequence[str]] = None) -> "Sample":
        for col in [treatment, outcome] + list(covariates or []):
            if col not in df.columns:
                raise SampleError(f"column '{col}' not found in input")
        if covariates is None:
            covariates = [c for c in df.columns if c not in (treatment, outcome)]
        return cls.from_arrays(df[list(covariates)].to_numpy(dtype=np.float64),
                               df[treatment].to_numpy(), df[outcome].to_numpy(dtype=np.float64),
                               names=list(covariates))


class BasisKind(str, Enum):
    KERNEL_NYSTROM = "kernel_nystrom"
    KERNEL_EXACT = "kernel_exact"
    RAW_MOMENTS = "raw_moments"
    KERNEL_PLUS_MOMENTS = "kernel_plus_moments"   # ядро + средние ковариат


@dataclass(frozen=True)
class BasisSpec:
    kind: BasisKind = BasisKind.KERNEL_NYSTROM
    delta: Union[float, Sequence[float]] = config.DEFAULT_DELTA
    kernel: Optional[KernelConfig] = None     # None → bandwidth = rank(X)
    sketch: SketchConfig = field(default_factory=SketchConfig)
    rank: Optional[int] = None                # kernel_exact

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.kind == BasisKind.KERNEL_EXACT and (self.rank is None or self.rank < 1):
            raise ValueError("kernel_exact basis needs a rank >= 1")

    @property
    def uses_kernel(self) -> bool:
        return self.kind != BasisKind.RAW_MOMENTS

    def kernel_for(self, sample: Sample) -> KernelConfig:
        return self.kernel or KernelConfig.for_covariates(sample.x)


def basis_values(sample: Sample, spec: BasisSpec) -> Tuple[np.ndarray, List[str], Optional[NystromBasis]]:
    """n x s matrix of basis values, its column names and the kernel basis (if any)."""
    if spec.kind == BasisKind.RAW_MOMENTS:
        return sample.x.standardized, list(sample.x.names), None

    kcfg = spec.kernel_for(sample)
    if spec.kind == BasisKind.KERNEL_EXACT:
        basis = exact_basis(sample.x, kcfg, spec.rank)
    else:
        basis = build_basis(sample.x, kcfg, spec.sketch)
    names = [f"k{j}" for j in range(basis.s)]
    if spec.kind == BasisKind.KERNEL_PLUS_MOMENTS:
        values = np.hstack([basis.d_factor, sample.x.standardized])
        return values, names + list(sample.x.names), basis
    return basis.d_factor, names, basis


def problem_from_basis(sample: Sample, values: np.ndarray, names: List[str], delta) -> SbwProblem:
    """Controls' block D_c, treated means D̄_t, degenerate columns dropped."""
    s = values.shape[1]
    delta_vec = np.asarray(delta, dtype=np.float64)
    delta_vec = np.full(s, float(delta_vec)) if delta_vec.ndim == 0 else delta_vec
    if delta_vec.shape != (s,):
        raise ValueError(f"delta has length {delta_vec.size}, basis has {s} columns")

    treated, controls = sample.treated_idx, sample.control_idx
    d_t, d_c = values[treated], values[controls]
    degenerate = (d_c.var(axis=0) <= DEGENERATE_VAR) & (d_t.var(axis=0) <= DEGENERATE_VAR)
    dropped = [names[j] for j in np.flatnonzero(degenerate)]
    if dropped:
        log.warning(f"[Balancing] ⚠️ dropping {len(dropped)} degenerate basis column(s): {dropped}")
    keep = ~degenerate

    return SbwProblem(
        d_c=d_c[:, keep],
        target=d_t[:, keep].mean(axis=0),
        delta=delta_vec[keep],
        column_names=[n for n, k in zip(names, keep) if k],
        dropped_columns=dropped,
        control_rows=controls,
    )


def build_problem(sample: Sample, spec: BasisSpec) -> SbwProblem:
    values, names, _ = basis_values(sample, spec)
    return problem_from_basis(sample, values, names, spec.delta)


def solve_problem(sample: Sample, spec: BasisSpec, settings: Optional[SolverSettings] = None
                  ) -> Tuple[WeightSolution, Optional[NystromBasis], SbwProblem]:
    """solve_weights that also hands back the assembled problem (for balance tables)."""
    settings = settings or SolverSettings()
    values, names, basis = basis_values(sample, spec)
    problem = problem_from_basis(sample, values, names, spec.delta)
    state = setup(problem, settings)
    solution = solve(state)
    log.info(
        f"[Balancing] {spec.kind.value}: n_c={problem.n_c} s={problem.s} → {solution.status.value} "
        f"in {solution.iterations} it ({solution.solve_time:.2f}s)"
    )
    return solution, basis, problem


def solve_weights(sample: Sample, spec: BasisSpec,
                  settings: Optional[SolverSettings] = None) -> Tuple[WeightSolution, Optional[NystromBasis]]:
    solution, basis, _ = solve_problem(sample, spec, settings)
    return solution, basis


def att_estimate(sample: Sample, w) -> Tuple[float, float]:
    """ATT = mean(Y | A=1) − Σ_{A=0} w_i·Y_i."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (sample.n_c,):
        raise ValueError(f"weights have length {w.size}, expected n_c={sample.n_c}")
    if abs(w.sum() - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"weights sum to {w.sum():.6f}, expected 1")
    psi_hat = float(w @ sample.y[sample.control_idx])
    att = float(sample.y[sample.treated_idx].mean() - psi_hat)
    return att, psi_hat
