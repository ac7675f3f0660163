"""
KERNBAL — ADMM solver for stable balancing weights

    min  wᵀw − (1/n_c)·wᵀ1
    s.t. Σw = 1,  0 ≤ w ≤ 1,  |D_cᵀw − D̄_t| ≤ δ

Operator splitting in the OSQP form: one cached factor of the KKT
matrix, relaxed w/z/y updates, adaptive ρ, primal infeasibility
certificates and optional active-set polishing.
"""
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import logging
import time
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

import config
from core.linalg import LdlFactor, SparseSymmetric, ldl_factor, ldl_solve

log = logging.getLogger("KernBal.Solver")

POLISH_ACTIVE_TOL = 1e-7
SCALING_MIN_NORM = 1e-4       # масштаб строки не больше 1e4


class SbwSetupError(ValueError):
    pass


class SolverStatus(str, Enum):
    SOLVED = "solved"
    SOLVED_INACCURATE = "solved_inaccurate"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    MAX_ITER = "max_iter"


@dataclass
class SolverSettings:
    sigma: float = config.SOLVER_SIGMA
    alpha: float = config.SOLVER_ALPHA
    rho_init: float = config.SOLVER_RHO
    eps_abs: float = config.SOLVER_EPS_ABS
    eps_rel: float = config.SOLVER_EPS_REL
    max_iter: int = config.SOLVER_MAX_ITER
    adaptive_rho: bool = config.SOLVER_ADAPTIVE_RHO
    polish: bool = config.SOLVER_POLISH
    scaling: bool = config.SOLVER_SCALING
    warm_start: bool = True
    adaptive_rho_interval: int = config.ADAPTIVE_RHO_INTERVAL
    adaptive_rho_tolerance: float = config.ADAPTIVE_RHO_TOLERANCE
    infeasibility_check_interval: int = config.INFEASIBILITY_CHECK_INTERVAL
    eps_prim_inf: float = config.EPS_PRIM_INF

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must be in (0, 2), got {self.alpha}")
        for name in ("sigma", "rho_init", "eps_abs", "eps_rel", "eps_prim_inf"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    @classmethod
    def high_accuracy(cls, **overrides) -> "SolverSettings":
        """Строгий критерий остановки + polishing."""
        params = dict(eps_abs=config.SOLVER_HIGH_ACCURACY_EPS, eps_rel=config.SOLVER_HIGH_ACCURACY_EPS, polish=True)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def broadcast_delta(delta, s: int) -> np.ndarray:
    """Scalar δ → vector of length s; vectors are checked for length."""
    arr = np.asarray(delta, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(s, float(arr))
    if arr.shape != (s,):
        raise SbwSetupError(f"delta has length {arr.size}, expected {s}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise SbwSetupError("delta must be finite and nonnegative")
    return arr


@dataclass
class SbwProblem:
    """
    Constraint operator Q = [1ᵀ; I; D_cᵀ] with bounds
    l = (1, 0, D̄_t − δ), u = (1, 1, D̄_t + δ).
    """
    d_c: np.ndarray                  # n_c x s basis values of controls
    target: np.ndarray               # D̄_t, length s
    delta: np.ndarray                # length s
    include_linear_term: bool = True
    column_names: List[str] = field(default_factory=list)
    dropped_columns: List[str] = field(default_factory=list)
    control_rows: Optional[np.ndarray] = None

    def __post_init__(self):
        self.d_c = np.asarray(self.d_c, dtype=np.float64)
        if self.d_c.ndim == 1:
            self.d_c = self.d_c[:, None]
        if self.d_c.ndim != 2 or self.d_c.shape[0] < 1:
            raise SbwSetupError("empty control group")
        if not np.all(np.isfinite(self.d_c)):
            raise SbwSetupError("basis values of controls contain non-finite entries")
        self.target = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        if self.target.shape != (self.s,):
            raise SbwSetupError(f"target has length {self.target.size}, expected {self.s}")
        self.delta = broadcast_delta(self.delta, self.s)
        self._q_matrix = None

    @property
    def n_c(self) -> int:
        return self.d_c.shape[0]

    @property
    def s(self) -> int:
        return self.d_c.shape[1]

    @property
    def n_rows(self) -> int:
        return 1 + self.n_c + self.s

    @property
    def constraint_matrix(self) -> sp.csc_matrix:
        if self._q_matrix is None:
            n_c = self.n_c
            cols = np.arange(n_c)
            bal_b, bal_i = np.nonzero(self.d_c.T)
            rows = np.concatenate((np.zeros(n_c, dtype=np.int64), 1 + cols, 1 + n_c + bal_b))
            idx = np.concatenate((cols, cols, bal_i))
            vals = np.concatenate((np.ones(n_c), np.ones(n_c), self.d_c.T[bal_b, bal_i]))
            self._q_matrix = sp.csc_matrix((vals, (rows, idx)), shape=(self.n_rows, n_c))
        return self._q_matrix

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate(([1.0], np.zeros(self.n_c), self.target - self.delta))

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate(([1.0], np.ones(self.n_c), self.target + self.delta))

    @property
    def linear_term(self) -> np.ndarray:
        coef = -1.0 / self.n_c if self.include_linear_term else 0.0
        return np.full(self.n_c, coef)

    def q_mul(self, w: np.ndarray) -> np.ndarray:
        return np.concatenate(([w.sum()], w, self.d_c.T @ w))

    def qt_mul(self, y: np.ndarray) -> np.ndarray:
        return y[0] + y[1:1 + self.n_c] + self.d_c @ y[1 + self.n_c:]

    def objective(self, w: np.ndarray) -> float:
        return float(w @ w + self.linear_term @ w)

    def balance_gaps(self, w: np.ndarray) -> np.ndarray:
        """|D_cᵀw − D̄_t| per basis column."""
        return np.abs(self.d_c.T @ w - self.target)

    def with_delta(self, delta) -> "SbwProblem":
        return SbwProblem(self.d_c, self.target, broadcast_delta(delta, self.s), self.include_linear_term,
                          list(self.column_names), list(self.dropped_columns), self.control_rows)

    def scaled(self, row_scale: np.ndarray) -> "SbwProblem":
        """Same feasible set of w, balance rows multiplied by row_scale."""
        e = np.asarray(row_scale, dtype=np.float64)
        return SbwProblem(self.d_c * e, self.target * e, self.delta * e, self.include_linear_term,
                          list(self.column_names), list(self.dropped_columns), self.control_rows)


@dataclass
class WeightSolution:
    w: np.ndarray
    status: SolverStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    solve_time: float = 0.0
    factor_time: float = 0.0
    y: Optional[np.ndarray] = None
    rho: float = 0.0
    eps_abs: float = config.SOLVER_EPS_ABS
    polished: bool = False
    polish_failed: bool = False
    control_rows: Optional[np.ndarray] = None

    @property
    def is_solved(self) -> bool:
        return self.status == SolverStatus.SOLVED

    def summary(self) -> Dict[str, Any]:
        return {
            "status": self.status.value,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "objective": self.objective,
            "solve_time_s": self.solve_time,
            "factor_time_s": self.factor_time,
            "rho": self.rho,
            "polished": self.polished,
            "polish_failed": self.polish_failed,
        }


@dataclass
class SolverState:
    problem: SbwProblem
    settings: SolverSettings
    w: np.ndarray
    z: np.ndarray
    y: np.ndarray
    rho: float
    rho_vec: np.ndarray = None
    factor: Optional["KktFactor"] = None
    iterations: int = 0          # суммарно за все solve()
    factorizations: int = 0
    factor_time: float = 0.0     # не отчитанное ещё время факторизации
    factored_sigma: float = 0.0
    row_scale: Optional[np.ndarray] = None
    work: Optional[SbwProblem] = None    # масштабированная копия problem

    @property
    def factor_dim(self) -> int:
        return self.factor.dim if self.factor is not None else 0

    def reset_iterates(self):
        """Cold start: uniform weights, z = Q·w, y = 0."""
        n_c = self.problem.n_c
        self.w = np.full(n_c, 1.0 / n_c)
        self.z = self.work.q_mul(self.w)
        self.y = np.zeros(self.problem.n_rows)


def balance_row_scale(problem: SbwProblem) -> np.ndarray:
    """
    Row equilibration of the balance rows: each row is scaled to unit
    ∞-norm, rows already at or above 1 are left alone. Termination on the
    scaled rows is never looser than on the original ones.
    """
    norms = np.abs(problem.d_c).max(axis=0, initial=0.0)
    return 1.0 / np.clip(norms, SCALING_MIN_NORM, 1.0)


def _rho_vector(rho: float, problem: SbwProblem) -> np.ndarray:
    vec = np.full(problem.n_rows, rho)
    vec[0] = config.RHO_EQ_SCALE * rho     # Σw = 1 всегда равенство
    return vec


def assemble_kkt(problem: SbwProblem, sigma: float, rho_vec: np.ndarray) -> SparseSymmetric:
    """[[−(2+σ)I, −Qᵀ], [−Q, diag(ρ)⁻¹]]"""
    q = problem.constraint_matrix
    top = -(2.0 + sigma) * sp.identity(problem.n_c, format="csc")
    kkt = sp.bmat([[top, -q.T], [-q, sp.diags(1.0 / rho_vec, format="csc")]], format="csc")
    return SparseSymmetric.from_full(kkt)


@dataclass
class KktFactor:
    """
    Factor of the same KKT matrix as assemble_kkt, exploiting its structure.

    The −(2+σ)I block and the n_c box rows are diagonal and are eliminated
    in closed form; what remains is the (1+s)×(1+s) SPD Schur complement

        S = diag(1/ρ_e) + Eᵀ·diag(1/(c+ρ_b))·E,    E = [1, D_c],  c = 2+σ

    over the Σw row and the balance rows, factored once by ldl_factor.
    A solve costs O(n_c·s), a refactorization O(n_c·s²).
    """
    problem: SbwProblem
    c: float
    rho_vec: np.ndarray
    schur: LdlFactor
    beta: np.ndarray        # 1/ρ_b + 1/c на box-строках

    @property
    def dim(self) -> int:
        return self.problem.n_c + self.problem.n_rows

    @classmethod
    def build(cls, problem: SbwProblem, sigma: float, rho_vec: np.ndarray) -> "KktFactor":
        n_c, d_c = problem.n_c, problem.d_c
        c = 2.0 + sigma
        rho_b = rho_vec[1:1 + n_c]
        rho_e = np.concatenate((rho_vec[:1], rho_vec[1 + n_c:]))
        kappa = 1.0 / (c + rho_b)
        kd = kappa @ d_c
        s_mat = np.empty((1 + problem.s, 1 + problem.s))
        s_mat[0, 0] = kappa.sum()
        s_mat[0, 1:] = kd
        s_mat[1:, 0] = kd
        gram = d_c.T @ (kappa[:, None] * d_c)
        s_mat[1:, 1:] = 0.5 * (gram + gram.T)
        s_mat[np.diag_indices_from(s_mat)] += 1.0 / rho_e
        schur = ldl_factor(SparseSymmetric.from_full(s_mat))
        return cls(problem=problem, c=c, rho_vec=rho_vec, schur=schur, beta=1.0 / rho_b + 1.0 / c)

    def _e_t(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate(([v.sum()], self.problem.d_c.T @ v))

    def _e(self, u: np.ndarray) -> np.ndarray:
        return u[0] + self.problem.d_c @ u[1:]

    def solve(self, rhs) -> np.ndarray:
        b = np.asarray(rhs, dtype=np.float64)
        if b.ndim != 1 or b.shape[0] != self.dim:
            raise ValueError(f"rhs length {b.shape} does not match factor dimension {self.dim}")
        problem, c = self.problem, self.c
        n_c = problem.n_c
        r1, r2 = b[:n_c], b[n_c:]
        g = r2 - problem.q_mul(r1) / c
        g_b = g[1:1 + n_c]
        g_e = np.concatenate((g[:1], g[1 + n_c:]))

        nu_e = ldl_solve(self.schur, g_e - self._e_t(g_b / (c * self.beta)))
        nu_b = (g_b - self._e(nu_e) / c) / self.beta
        nu = np.concatenate((nu_e[:1], nu_b, nu_e[1:]))
        x = -(r1 + problem.qt_mul(nu)) / c
        return np.concatenate((x, nu))


def _factorize(state: SolverState):
    t0 = time.perf_counter()
    state.rho_vec = _rho_vector(state.rho, state.work)
    state.factor = KktFactor.build(state.work, state.settings.sigma, state.rho_vec)
    state.factored_sigma = state.settings.sigma
    state.factorizations += 1
    state.factor_time += time.perf_counter() - t0


def setup(problem: SbwProblem, settings: Optional[SolverSettings] = None) -> SolverState:
    settings = settings or SolverSettings()
    if problem.n_c < 1:
        raise SbwSetupError("empty control group")
    if np.any(problem.delta < 0):
        raise SbwSetupError("delta must be nonnegative")

    n_c = problem.n_c
    row_scale = balance_row_scale(problem) if settings.scaling else np.ones(problem.s)
    work = problem.scaled(row_scale)
    w = np.full(n_c, 1.0 / n_c)
    state = SolverState(
        problem=problem,
        settings=settings,
        w=w,
        z=work.q_mul(w),
        y=np.zeros(problem.n_rows),
        rho=settings.rho_init,
        row_scale=row_scale,
        work=work,
    )
    _factorize(state)
    return state


def update_bounds(state: SolverState, new_delta) -> SolverState:
    """Replace l(δ), u(δ) only; factor and iterates are kept."""
    state.problem = state.problem.with_delta(new_delta)
    state.work = state.work.with_delta(state.problem.delta * state.row_scale)
    return state


def _residuals(problem: SbwProblem, w, z, y, q_lin, settings: SolverSettings):
    qw = problem.q_mul(w)
    qty = problem.qt_mul(y)
    prim = np.abs(qw - z).max()
    dual = np.abs(2.0 * w + q_lin + qty).max()
    prim_scale = max(np.abs(qw).max(), np.abs(z).max())
    dual_scale = max(np.abs(2.0 * w).max(), np.abs(qty).max(), np.abs(q_lin).max())
    eps_prim = settings.eps_abs + settings.eps_rel * prim_scale
    eps_dual = settings.eps_abs + settings.eps_rel * dual_scale
    return prim, dual, eps_prim, eps_dual, prim_scale, dual_scale


def _is_primal_infeasible(problem: SbwProblem, dy: np.ndarray, lower, upper, eps: float) -> bool:
    norm = np.abs(dy).max()
    if norm <= 1e-30:
        return False
    if np.abs(problem.qt_mul(dy)).max() > eps * norm:
        return False
    support = upper @ np.maximum(dy, 0.0) + lower @ np.minimum(dy, 0.0)
    return support < -eps * norm


def solve(state: SolverState, settings: Optional[SolverSettings] = None) -> WeightSolution:
    if settings is not None:
        state.settings = settings
    settings = state.settings
    problem = state.work
    if state.factor is None or settings.sigma != state.factored_sigma:
        _factorize(state)
    if not settings.warm_start:
        state.reset_iterates()

    n_c = problem.n_c
    lower, upper = problem.lower, problem.upper
    q_lin = problem.linear_term
    sigma, alpha = settings.sigma, settings.alpha
    w, z, y = state.w, state.z, state.y

    t0 = time.perf_counter()
    status = SolverStatus.MAX_ITER
    best = None
    prim = dual = np.inf
    it = 0
    for it in range(1, settings.max_iter + 1):
        rho_vec = state.rho_vec
        rhs = np.concatenate((-(sigma * w - q_lin), -(z - y / rho_vec)))
        sol = state.factor.solve(rhs)
        w_tilde, nu = sol[:n_c], sol[n_c:]
        z_tilde = z + (nu - y) / rho_vec

        w_next = alpha * w_tilde + (1.0 - alpha) * w
        z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
        z_next = np.clip(z_relaxed + y / rho_vec, lower, upper)
        y_next = y + rho_vec * (z_relaxed - z_next)

        dy = y_next - y
        w, z, y = w_next, z_next, y_next

        prim, dual, eps_prim, eps_dual, prim_scale, dual_scale = _residuals(problem, w, z, y, q_lin, settings)
        if prim <= eps_prim and dual <= eps_dual:
            status = SolverStatus.SOLVED
            break

        score = max(prim / eps_prim, dual / eps_dual)
        if best is None or score < best[0]:
            best = (score, w.copy(), z.copy(), y.copy(), prim, dual)

        if it % settings.infeasibility_check_interval == 0:
            if _is_primal_infeasible(problem, dy, lower, upper, settings.eps_prim_inf):
                status = SolverStatus.PRIMAL_INFEASIBLE
                break

        if settings.adaptive_rho and it % settings.adaptive_rho_interval == 0:
            ratio = (prim / (prim_scale + 1e-10)) / (dual / (dual_scale + 1e-10) + 1e-10)
            new_rho = float(np.clip(state.rho * np.sqrt(ratio), config.RHO_MIN, config.RHO_MAX))
            tol = settings.adaptive_rho_tolerance
            if new_rho > tol * state.rho or new_rho < state.rho / tol:
                log.debug(f"[Solver] ρ {state.rho:.3e} → {new_rho:.3e}, refactoring")
                state.rho = new_rho
                _factorize(state)

    if status == SolverStatus.MAX_ITER and best is not None:
        score, w_best, z_best, y_best, prim, dual = best
        w, z, y = w_best, z_best, y_best
        if score <= 10.0:
            status = SolverStatus.SOLVED_INACCURATE

    solve_time = time.perf_counter() - t0
    state.w, state.z, state.y = w, z, y
    state.iterations += it

    # невязки и двойственные переменные в исходном масштабе строк
    bal = slice(1 + n_c, None)
    z_out, y_out = z.copy(), y.copy()
    z_out[bal] /= state.row_scale
    y_out[bal] *= state.row_scale
    prim = np.abs(state.problem.q_mul(w) - z_out).max()

    solution = WeightSolution(
        w=w.copy(),
        status=status,
        iterations=it,
        primal_residual=float(prim),
        dual_residual=float(dual),
        objective=problem.objective(w),
        solve_time=solve_time,
        factor_time=state.factor_time,
        y=y_out,
        rho=state.rho,
        eps_abs=settings.eps_abs,
        control_rows=problem.control_rows,
    )
    state.factor_time = 0.0

    if status == SolverStatus.PRIMAL_INFEASIBLE:
        log.warning(f"[Solver] ⚠️ primal infeasible after {it} iterations")
    elif status == SolverStatus.MAX_ITER:
        log.warning(f"[Solver] ⚠️ max_iter={settings.max_iter} reached: prim={prim:.2e} dual={dual:.2e}")
    else:
        log.debug(f"[Solver] {status.value} in {it} it, prim={prim:.2e} dual={dual:.2e}")

    if settings.polish and status in (SolverStatus.SOLVED, SolverStatus.SOLVED_INACCURATE):
        solution = polish(solution, state.problem)
    return solution


def _constraint_violation(problem: SbwProblem, w: np.ndarray) -> float:
    qw = problem.q_mul(w)
    return float(max(np.max(problem.lower - qw), np.max(qw - problem.upper), 0.0))


def polish(solution: WeightSolution, problem: SbwProblem) -> WeightSolution:
    """
    Active-set refinement: fix active box rows, solve the equality-constrained
    KKT on the remaining variables, accept only if no residual grows.
    """
    if solution.status not in (SolverStatus.SOLVED, SolverStatus.SOLVED_INACCURATE):
        return solution

    def failed() -> WeightSolution:
        log.debug("[Solver] polish failed, keeping ADMM solution")
        out = WeightSolution(**{**solution.__dict__})
        out.polish_failed = True
        return out

    n_c = problem.n_c
    w = solution.w
    lower, upper = problem.lower, problem.upper
    y = solution.y if solution.y is not None else np.zeros(problem.n_rows)
    qw = problem.q_mul(w)
    z = np.clip(qw, lower, upper)

    eq = lower == upper
    dist_lo = qw - lower
    dist_up = upper - qw
    near_lo = (dist_lo <= POLISH_ACTIVE_TOL * (1.0 + np.abs(lower))) | (z - lower < -y)
    near_up = (dist_up <= POLISH_ACTIVE_TOL * (1.0 + np.abs(upper))) | (upper - z < y)
    both = near_lo & near_up
    near_lo = np.where(both, dist_lo <= dist_up, near_lo) & ~eq
    near_up = near_up & ~near_lo & ~eq

    box = slice(1, 1 + n_c)
    fixed_lo = near_lo[box]
    fixed_up = near_up[box]
    free = ~(fixed_lo | fixed_up)
    if not np.any(free):
        return failed()

    w_pol = np.zeros(n_c)
    w_pol[fixed_up] = 1.0

    # общие строки: Σw и активные балансные
    bal_rows = np.arange(1 + n_c, problem.n_rows)
    bal_active = eq[bal_rows] | near_lo[bal_rows] | near_up[bal_rows]
    act_cols = np.flatnonzero(bal_active)
    g_full = np.vstack([np.ones((1, n_c)), problem.d_c[:, act_cols].T])
    rows_idx = np.concatenate(([0], bal_rows[act_cols]))
    b = np.where(near_up[rows_idx], upper[rows_idx], lower[rows_idx])
    b = b - g_full[:, ~free] @ w_pol[~free]

    g = g_full[:, free]
    q_lin = problem.linear_term
    if np.linalg.matrix_rank(g) < g.shape[0]:
        return failed()
    try:
        lam = sla.solve(g @ g.T, -2.0 * b - g @ q_lin[free], assume_a="pos")
    except (sla.LinAlgError, ValueError):
        return failed()
    w_pol[free] = -(q_lin[free] + g.T @ lam) / 2.0

    y_pol = np.zeros(problem.n_rows)
    y_pol[rows_idx] = lam
    fixed_idx = np.flatnonzero(~free)
    y_pol[1 + fixed_idx] = -(2.0 * w_pol[fixed_idx] + q_lin[fixed_idx] + g_full[:, fixed_idx].T @ lam)

    stationarity = np.abs(2.0 * w_pol + q_lin + problem.qt_mul(y_pol)).max()
    sign_violation = max(
        np.max(np.where(near_lo, y_pol, -np.inf), initial=0.0),
        np.max(np.where(near_up, -y_pol, -np.inf), initial=0.0),
        0.0,
    )
    prim_pol = _constraint_violation(problem, w_pol)
    dual_pol = float(max(stationarity, sign_violation))
    prim_orig = max(_constraint_violation(problem, w), solution.primal_residual)

    if not (np.all(np.isfinite(w_pol)) and prim_pol <= prim_orig and dual_pol <= solution.dual_residual):
        return failed()

    out = WeightSolution(**{**solution.__dict__})
    out.w = w_pol
    out.y = y_pol
    out.primal_residual = prim_pol
    out.dual_residual = dual_pol
    out.objective = problem.objective(w_pol)
    out.polished = True
    out.polish_failed = False
    return out
