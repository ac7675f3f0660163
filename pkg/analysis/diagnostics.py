"""
KERNBAL — Balance diagnostics
TASMD до/после взвешивания и эмпирические компоненты оценки смещения
(ошибка следа, регуляризация W, остаточный дисбаланс, худшее смещение).
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import logging
import numpy as np
import pandas as pd
from scipy.linalg import eigvalsh

import config
from analysis.kernel import KernelConfig, gram
from analysis.nystrom import NystromBasis, row_coherence
from core.linalg import eigh_sym
from core.qp_solver import SbwProblem
from strategies.balancing import Sample

log = logging.getLogger("KernBal.Diagnostics")

COVARIATE_COLUMNS = [
    "covariate", "mean_treated", "mean_control_unweighted", "mean_control_weighted",
    "tasmd_before", "tasmd_after",
]


class DiagnosticsGuardError(ValueError):
    pass


@dataclass
class BalanceReport:
    covariates: pd.DataFrame                 # COVARIATE_COLUMNS + zero_sd
    basis: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["index", "name", "imbalance", "delta"]))
    sd_undefined: bool = False               # n_t < 2
    dropped_columns: List[str] = field(default_factory=list)

    @property
    def max_tasmd_after(self) -> float:
        return float(self.covariates["tasmd_after"].max()) if len(self.covariates) else 0.0

    def is_balanced(self, threshold: float = config.TASMD_THRESHOLD) -> bool:
        return self.max_tasmd_after < threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariates": self.covariates.to_dict(orient="records"),
            "basis": self.basis.to_dict(orient="records"),
            "sd_undefined": self.sd_undefined,
            "dropped_columns": list(self.dropped_columns),
            "max_tasmd_after": self.max_tasmd_after,
            "balanced": self.is_balanced(),
        }


def tasmd_report(sample: Sample, w, covariate_names: Optional[Sequence[str]] = None,
                 problem: Optional[SbwProblem] = None) -> BalanceReport:
    """|weighted control mean − treated mean| / sd(treated), sd with n_t − 1."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (sample.n_c,):
        raise ValueError(f"weights have length {w.size}, expected n_c={sample.n_c}")

    names = list(sample.x.names)
    cols = list(covariate_names) if covariate_names is not None else names
    missing = [c for c in cols if c not in names]
    if missing:
        raise ValueError(f"unknown covariates: {missing}")
    pick = [names.index(c) for c in cols]

    xt = sample.x.raw[sample.treated_idx][:, pick]
    xc = sample.x.raw[sample.control_idx][:, pick]
    mean_t = xt.mean(axis=0)
    mean_c = xc.mean(axis=0)
    mean_w = w @ xc

    sd_undefined = sample.n_t < 2
    if sd_undefined:
        log.warning("[Diagnostics] ⚠️ fewer than 2 treated units: TASMD reported as raw differences")
        sd_t = np.zeros(len(cols))
    else:
        sd_t = xt.std(axis=0, ddof=1)
    zero_sd = sd_t <= 0.0
    denom = np.where(zero_sd, 1.0, sd_t)

    covariates = pd.DataFrame({
        "covariate": cols,
        "mean_treated": mean_t,
        "mean_control_unweighted": mean_c,
        "mean_control_weighted": mean_w,
        "tasmd_before": np.abs(mean_c - mean_t) / denom,
        "tasmd_after": np.abs(mean_w - mean_t) / denom,
        "zero_sd": zero_sd,
    })

    report = BalanceReport(covariates=covariates, sd_undefined=sd_undefined)
    if problem is not None:
        report.basis = pd.DataFrame({
            "index": np.arange(problem.s),
            "name": problem.column_names or [f"b{j}" for j in range(problem.s)],
            "imbalance": problem.balance_gaps(w),
            "delta": problem.delta,
        })
        report.dropped_columns = list(problem.dropped_columns)
    return report


@dataclass
class BiasBoundReport:
    trace_error: float          # ‖K − K_s‖_*
    nystrom_trace_error: float  # ‖K − DDᵀ‖_*
    reg_spectral: float         # ‖W⁺ − W_l⁻¹‖₂
    reg_frobenius_sq: float     # ‖W⁺ − W_l⁻¹‖_F²
    residual_imbalance: float
    worst_case_bias: float
    coherence: float            # μ доминирующего s-подпространства K, в [1, n/s]
    coherence_basis: float      # то же по левым сингулярным векторам D

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _guard(sample: Sample, max_n: int):
    if sample.n > max_n:
        raise DiagnosticsGuardError(f"exact kernel diagnostics need n <= {max_n}, got n={sample.n}")


def worst_case_bias_direct(sample: Sample, w, cfg: KernelConfig,
                           max_n: int = config.EXACT_BASIS_MAX_N) -> float:
    """sup over ‖α‖₂ ≤ 1 of |Σw·K_c·α − (1/n_t)·1ᵀK_t·α|, straight from kernel rows."""
    _guard(sample, max_n)
    k = gram(sample.x, cfg)
    row = np.asarray(w) @ k[sample.control_idx] - k[sample.treated_idx].mean(axis=0)
    return float(np.linalg.norm(row))


def bias_bound_report(sample: Sample, basis: NystromBasis, w, cfg: KernelConfig,
                      max_n: int = config.EXACT_BASIS_MAX_N) -> BiasBoundReport:
    _guard(sample, max_n)
    w = np.asarray(w, dtype=np.float64)
    k = gram(sample.x, cfg)
    lam, u = eigh_sym(k)

    s = basis.s
    trace_error = float(np.sum(np.abs(lam[s:])))
    dd = basis.d_factor @ basis.d_factor.T
    nystrom_trace_error = float(np.sum(np.abs(eigvalsh(k - dd))))
    reg_spectral, reg_frobenius_sq = basis.regularization_errors()

    d_c = basis.d_factor[sample.control_idx]
    d_t = basis.d_factor[sample.treated_idx]
    residual = float(np.max(np.abs(w @ d_c - d_t.mean(axis=0)), initial=0.0))

    # (ŵᵀU_c − (1/n_t)1ᵀU_t)·Λ, норма не меняется от умножения на Uᵀ
    r = w @ u[sample.control_idx] - u[sample.treated_idx].mean(axis=0)
    worst = float(np.linalg.norm(r * lam))
    coherence = float(sample.n / s * np.max(np.sum(u[:, :s] ** 2, axis=1)))

    return BiasBoundReport(
        trace_error=trace_error,
        nystrom_trace_error=nystrom_trace_error,
        reg_spectral=reg_spectral,
        reg_frobenius_sq=reg_frobenius_sq,
        residual_imbalance=residual,
        worst_case_bias=worst,
        coherence=coherence,
        coherence_basis=row_coherence(basis),
    )
