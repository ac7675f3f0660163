"""
KERNBAL — Simulation harness
Генератор данных с двумя режимами перекрытия, RMSE по повторениям,
время CPU и бенчмарк кэширования факторизации по сетке δ.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from analysis.nystrom import NystromRankError, SketchConfig
from core.qp_solver import SolverSettings, SolverStatus, broadcast_delta, setup, solve, update_bounds
from analysis.diagnostics import tasmd_report
from ml.propensity import FeatureExpansion, fit_logistic, hajek_att, hajek_weights
from strategies.balancing import (
    BasisKind, BasisSpec, Sample, att_estimate, basis_values, problem_from_basis,
)

log = logging.getLogger("KernBal.Simulation")

TRUE_ATT = 0.0
X123_COV = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])
X123_CHOL = np.linalg.cholesky(X123_COV)

# Один поток Philox на (master seed, rep, переменная)
STREAMS = {"x123": 1, "x4": 2, "x5": 3, "x6": 4, "eta": 5, "eps": 6, "sketch": 7}

CHECKPOINTS = (1, 20, 40, 60, 80, 100)


def simulation_settings(**overrides) -> SolverSettings:
    """Tight ADMM tolerance plus polishing, so each replication estimates with the exact QP weights."""
    params = dict(eps_abs=config.SIM_SOLVER_EPS, eps_rel=config.SIM_SOLVER_EPS, polish=True)
    params.update(overrides)
    return SolverSettings(**params)


class Overlap(str, Enum):
    WEAK = "weak"
    STRONG = "strong"

    @property
    def noise_var(self) -> float:
        return 30.0 if self == Overlap.WEAK else 100.0


class CovariateSpec(str, Enum):
    CORRECT = "correct"
    TRANSFORMED = "transformed"


class Method(str, Enum):
    BALANCING_NYSTROM = "balancing_nystrom"
    BALANCING_EXACT = "balancing_exact"
    HAJEK_GLM = "hajek_glm"


@dataclass(frozen=True)
class SimConfig:
    n: int = config.SIM_N
    overlap: Overlap = Overlap.WEAK
    spec: CovariateSpec = CovariateSpec.CORRECT
    reps: int = config.SIM_REPS
    seed: int = config.SIM_SEED
    methods: Tuple[Method, ...] = (Method.BALANCING_NYSTROM, Method.HAJEK_GLM)
    delta: float = config.DEFAULT_DELTA
    sketch: SketchConfig = field(default_factory=SketchConfig)
    exact_rank: Optional[int] = None          # None → sketch.s
    settings: SolverSettings = field(default_factory=simulation_settings)
    threads: int = config.THREADS

    def __post_init__(self):
        if self.n < 100:
            raise ValueError(f"n must be >= 100, got {self.n}")
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        object.__setattr__(self, "overlap", Overlap(self.overlap))
        object.__setattr__(self, "spec", CovariateSpec(self.spec))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["overlap"] = self.overlap.value
        d["spec"] = self.spec.value
        d["methods"] = [m.value for m in self.methods]
        return d


def rng_stream(seed: int, rep: int, variable: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep, STREAMS[variable]])))


def generate(cfg: SimConfig, rep_seed: int) -> Sample:
    """One replication of the design; estimators see X or X* depending on cfg.spec."""
    n = cfg.n
    x123 = rng_stream(cfg.seed, rep_seed, "x123").standard_normal((n, 3)) @ X123_CHOL.T
    x1, x2, x3 = x123[:, 0], x123[:, 1], x123[:, 2]
    x4 = rng_stream(cfg.seed, rep_seed, "x4").uniform(-3.0, 3.0, n)
    x5 = rng_stream(cfg.seed, rep_seed, "x5").chisquare(1.0, n)
    x6 = rng_stream(cfg.seed, rep_seed, "x6").binomial(1, 0.5, n).astype(np.float64)
    eta = rng_stream(cfg.seed, rep_seed, "eta").standard_normal(n)
    eps = rng_stream(cfg.seed, rep_seed, "eps").normal(0.0, np.sqrt(cfg.overlap.noise_var), n)

    y = (x1 + x2 + x5) ** 2 + eta
    index = x1 ** 2 + 2 * x2 ** 2 - 2 * x3 ** 2 - (x4 + 1) ** 3 - 0.5 * np.log(x5 + 10) + x6 - 1.5 + eps
    a = (index > 0).astype(np.int8)

    if cfg.spec == CovariateSpec.TRANSFORMED:
        x = np.column_stack([x1 * x3, x2 ** 2, x4, x5, x6])
        names = ["X1X3", "X2sq", "X4", "X5", "X6"]
    else:
        x = np.column_stack([x1, x2, x3, x4, x5, x6])
        names = ["X1", "X2", "X3", "X4", "X5", "X6"]
    return Sample.from_arrays(x, a, y, names=names)


def rep_sketch(cfg: SimConfig, rep: int) -> SketchConfig:
    seed = int(rng_stream(cfg.seed, rep, "sketch").integers(0, 2 ** 31 - 1))
    return replace(cfg.sketch.capped(cfg.n), seed=seed)


def method_spec(cfg: SimConfig, method: Method, rep: int) -> BasisSpec:
    sketch = rep_sketch(cfg, rep)
    if method == Method.BALANCING_EXACT:
        return BasisSpec(kind=BasisKind.KERNEL_EXACT, delta=cfg.delta, sketch=sketch,
                         rank=cfg.exact_rank or sketch.s)
    return BasisSpec(kind=BasisKind.KERNEL_NYSTROM, delta=cfg.delta, sketch=sketch)


def estimate(cfg: SimConfig, sample: Sample, method: Method, rep: int) -> Dict[str, Any]:
    """One method on one sample: ATT, status and basis/solve wall-clock seconds."""
    row = {"rep": rep, "method": method.value, "att": np.nan, "status": "error",
           "time_basis_s": 0.0, "time_solve_s": 0.0, "iterations": 0, "max_tasmd": np.nan}
    try:
        if method == Method.HAJEK_GLM:
            t0 = time.perf_counter()
            model = fit_logistic(sample, FeatureExpansion.QUADRATIC)
            row["att"] = hajek_att(sample, model)
            row["time_solve_s"] = time.perf_counter() - t0
            row["max_tasmd"] = tasmd_report(sample, hajek_weights(sample, model)).max_tasmd_after
            row["status"] = SolverStatus.SOLVED.value if model.converged else "not_converged"
            row["iterations"] = model.iterations
            return row

        spec = method_spec(cfg, method, rep)
        t0 = time.perf_counter()
        try:
            values, names, _ = basis_values(sample, spec)
        except NystromRankError as e:
            log.warning(f"[Simulation] ⚠️ rep {rep}: {e}, using l={e.achievable_rank}")
            spec = replace(spec, sketch=spec.sketch.with_rank(e.achievable_rank))
            values, names, _ = basis_values(sample, spec)
        row["time_basis_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        problem = problem_from_basis(sample, values, names, spec.delta)
        solution = solve(setup(problem, cfg.settings))
        row["time_solve_s"] = time.perf_counter() - t0
        row["status"] = solution.status.value
        row["iterations"] = solution.iterations
        if solution.status != SolverStatus.PRIMAL_INFEASIBLE:
            row["att"], _ = att_estimate(sample, solution.w)
            row["max_tasmd"] = tasmd_report(sample, solution.w).max_tasmd_after
    except Exception as e:
        log.error(f"[Simulation] ❌ rep {rep} {method.value}: {e}")
    return row


def _run_rep(args) -> List[Dict[str, Any]]:
    cfg, rep = args
    sample = generate(cfg, rep)
    return [estimate(cfg, sample, m, rep) for m in cfg.methods]


@dataclass
class SimResult:
    config: SimConfig
    estimates: pd.DataFrame   # одна строка на (rep, method)
    summary: pd.DataFrame     # одна строка на method

    def rmse(self, method) -> float:
        row = self.summary[self.summary["method"] == Method(method).value]
        return float(row["rmse"].iloc[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "summary": self.summary.to_dict(orient="records"),
            "estimates": self.estimates.to_dict(orient="records"),
        }


def summarize(cfg: SimConfig, estimates: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for method in cfg.methods:
        sub = estimates[estimates["method"] == method.value]
        att = sub["att"].to_numpy(dtype=np.float64)
        ok = np.isfinite(att)
        err = att[ok] - TRUE_ATT
        rows.append({
            "method": method.value,
            "n": cfg.n,
            "overlap": cfg.overlap.value,
            "spec": cfg.spec.value,
            "rmse": float(np.sqrt(np.mean(err ** 2))) if ok.any() else np.nan,
            "mean_bias": float(np.mean(err)) if ok.any() else np.nan,
            "mean_max_tasmd": float(sub["max_tasmd"].mean()),
            "mean_time_basis_s": float(sub["time_basis_s"].mean()),
            "mean_time_solve_s": float(sub["time_solve_s"].mean()),
            "failures": int((sub["status"] != SolverStatus.SOLVED.value).sum()),
        })
    return pd.DataFrame(rows)


def run_study(cfg: SimConfig, progress: bool = True) -> SimResult:
    jobs = [(cfg, rep) for rep in range(cfg.reps)]
    log.info(f"[Simulation] 🚀 n={cfg.n} overlap={cfg.overlap.value} spec={cfg.spec.value} "
             f"reps={cfg.reps} methods={[m.value for m in cfg.methods]} threads={cfg.threads}")

    rows: List[Dict[str, Any]] = []
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            # map сохраняет порядок повторений
            for rep_rows in tqdm(pool.map(_run_rep, jobs), total=len(jobs), disable=not progress, desc="reps"):
                rows.extend(rep_rows)
    else:
        for job in tqdm(jobs, disable=not progress, desc="reps"):
            rows.extend(_run_rep(job))

    estimates = pd.DataFrame(rows)
    summary = summarize(cfg, estimates)
    for rec in summary.to_dict(orient="records"):
        log.info(f"[Simulation] ✅ {rec['method']}: rmse={rec['rmse']:.4f} bias={rec['mean_bias']:+.4f} "
                 f"failures={rec['failures']}")
    return SimResult(config=cfg, estimates=estimates, summary=summary)


# ─── δ-sweep: кэш факторизации + warm start против холодного старта ───

@dataclass
class SweepResult:
    table: pd.DataFrame
    factorizations: int           # в тёплом прогоне
    basis_time_s: float

    @property
    def warm_total(self) -> float:
        return float(self.table["warm_cum_time_s"].iloc[-1])

    @property
    def cold_total(self) -> float:
        return float(self.table["cold_cum_time_s"].iloc[-1])

    @property
    def speedup(self) -> float:
        if not np.isfinite(self.cold_total) or not np.isfinite(self.warm_total) or self.warm_total <= 0:
            return np.nan
        return self.cold_total / self.warm_total

    def checkpoints(self, marks: Sequence[int] = CHECKPOINTS) -> pd.DataFrame:
        """Cumulative times after the k-th problem of the grid."""
        idx = [k for k in marks if k <= len(self.table)]
        sub = self.table.iloc[[k - 1 for k in idx]][["delta", "warm_cum_time_s", "cold_cum_time_s"]].copy()
        sub.insert(0, "problems", idx)
        return sub.reset_index(drop=True)


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("delta grid is empty")
    if not np.all(np.isfinite(g)) or np.any(g < 0):
        raise ValueError("delta grid must be finite and nonnegative")
    if np.any(np.diff(g) < 0):
        raise ValueError("delta grid must be sorted")
    return g


def delta_sweep(cfg: SimConfig, grid, sample: Optional[Sample] = None, spec: Optional[BasisSpec] = None,
                settings: Optional[SolverSettings] = None, warm: bool = True, cold: bool = True) -> SweepResult:
    """
    Warm: one setup/factorization, then update_bounds + solve per δ.
    Cold: fresh setup per δ. ρ adaptation is off so the warm factor is never rebuilt.
    """
    g = _check_grid(grid)
    sample = sample if sample is not None else generate(cfg, 0)
    spec = spec or method_spec(cfg, Method.BALANCING_NYSTROM, 0)
    settings = settings or replace(cfg.settings, adaptive_rho=False)

    t0 = time.perf_counter()
    values, names, _ = basis_values(sample, spec)
    basis_time = time.perf_counter() - t0
    base = problem_from_basis(sample, values, names, g[0])

    table = pd.DataFrame({"delta": g})
    factorizations = 0

    if warm:
        iters, statuses, times = [], [], []
        state = None
        for delta in g:
            t0 = time.perf_counter()
            if state is None:
                state = setup(base, settings)
            else:
                update_bounds(state, broadcast_delta(delta, base.s))
            sol = solve(state)
            times.append(time.perf_counter() - t0)
            iters.append(sol.iterations)
            statuses.append(sol.status.value)
            if sol.status == SolverStatus.PRIMAL_INFEASIBLE:
                log.warning(f"[Sweep] ⚠️ δ={delta:g} infeasible, skipped")
                state.reset_iterates()
        factorizations = state.factorizations
        table["warm_iterations"] = iters
        table["warm_status"] = statuses
        table["warm_time_s"] = times
        table["warm_cum_time_s"] = np.cumsum(times)
    else:
        table["warm_iterations"], table["warm_status"] = 0, ""
        table["warm_time_s"], table["warm_cum_time_s"] = np.nan, np.nan

    if cold:
        iters, statuses, times = [], [], []
        for delta in g:
            problem = base.with_delta(broadcast_delta(delta, base.s))
            t0 = time.perf_counter()
            sol = solve(setup(problem, settings))
            times.append(time.perf_counter() - t0)
            iters.append(sol.iterations)
            statuses.append(sol.status.value)
        table["cold_iterations"] = iters
        table["cold_status"] = statuses
        table["cold_time_s"] = times
        table["cold_cum_time_s"] = np.cumsum(times)
    else:
        table["cold_iterations"], table["cold_status"] = 0, ""
        table["cold_time_s"], table["cold_cum_time_s"] = np.nan, np.nan

    status_cols = [c for c in ("warm_status", "cold_status") if (table[c] != "").any()]
    table["infeasible"] = (table[status_cols] == SolverStatus.PRIMAL_INFEASIBLE.value).any(axis=1)

    result = SweepResult(table=table, factorizations=factorizations, basis_time_s=basis_time)
    log.info(f"[Sweep] ✅ {g.size} δ values: warm factorizations={factorizations}, speedup={result.speedup:.2f}x")
    return result


if __name__ == "__main__":
    from core.logger import setup_logger
    setup_logger(log_file=None)
    res = run_study(SimConfig(reps=5))
    print(res.summary.to_string(index=False))
