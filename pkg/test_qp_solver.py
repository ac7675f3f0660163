import numpy as np
import pytest
from scipy.optimize import minimize

from core.qp_solver import (
    KktFactor, SbwProblem, SbwSetupError, SolverSettings, SolverStatus, WeightSolution,
    assemble_kkt, balance_row_scale, polish, setup, solve, update_bounds,
)

ANALYTIC_W = np.array([0.05, 0.05, 0.45, 0.45])


def _two_pairs(delta=0.0) -> SbwProblem:
    """Controls 3,4 carry the basis value 1; the treated mean is 0.9."""
    return SbwProblem(d_c=np.array([[0.0], [0.0], [1.0], [1.0]]), target=[0.9], delta=delta)


def _random_problem(rng, n_c, s, slack=(0.01, 0.5)) -> SbwProblem:
    """Feasible by construction: the target is hit by a Dirichlet draw up to δ."""
    d_c = rng.standard_normal((n_c, s))
    w0 = rng.dirichlet(np.ones(n_c))
    noise = rng.uniform(-1.0, 1.0, size=s) * 0.05
    delta = np.abs(noise) + rng.uniform(*slack, size=s)
    return SbwProblem(d_c=d_c, target=d_c.T @ w0 + noise, delta=delta)


def _oracle(problem: SbwProblem) -> np.ndarray:
    """SLSQP on the same QP, tight tolerance."""
    n_c, d_c = problem.n_c, problem.d_c
    q = problem.linear_term
    cons = [
        {"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones((1, n_c))},
        {"type": "ineq", "fun": lambda w: problem.target + problem.delta - d_c.T @ w, "jac": lambda w: -d_c.T},
        {"type": "ineq", "fun": lambda w: d_c.T @ w - problem.target + problem.delta, "jac": lambda w: d_c.T},
    ]
    res = minimize(
        lambda w: w @ w + q @ w, np.full(n_c, 1.0 / n_c), jac=lambda w: 2.0 * w + q,
        method="SLSQP", bounds=[(0.0, 1.0)] * n_c, constraints=cons,
        options={"ftol": 1e-12, "maxiter": 2000},
    )
    return res.x


def _audit(problem: SbwProblem, sol: WeightSolution):
    eps = sol.eps_abs
    assert np.all(problem.balance_gaps(sol.w) <= problem.delta + 10 * eps)
    assert abs(sol.w.sum() - 1.0) <= eps
    assert sol.w.min() >= -eps


# ─── setup / KKT ───

def test_no_balance_rows_two_controls():
    problem = SbwProblem(d_c=np.zeros((2, 0)), target=np.zeros(0), delta=0.0)
    state = setup(problem)
    assert state.factor_dim == 5
    sol = solve(state)
    assert sol.status == SolverStatus.SOLVED
    assert np.allclose(sol.w, [0.5, 0.5], atol=1e-3)


def test_kkt_matches_dense_assembly():
    rng = np.random.default_rng(0)
    problem = SbwProblem(d_c=rng.standard_normal((3, 2)), target=[0.1, -0.2], delta=0.05)
    sigma = 1e-6
    rho_vec = np.full(problem.n_rows, 0.1)
    rho_vec[0] = 100.0
    q = np.vstack([np.ones((1, 3)), np.eye(3), problem.d_c.T])
    dense = np.block([[-(2.0 + sigma) * np.eye(3), -q.T], [-q, np.diag(1.0 / rho_vec)]])
    kkt = assemble_kkt(problem, sigma, rho_vec)
    assert kkt.dim == 3 + problem.n_rows
    assert np.abs(kkt.to_dense() - dense).max() <= 1e-12


def test_structured_factor_matches_dense_solve():
    rng = np.random.default_rng(3)
    problem = SbwProblem(d_c=rng.standard_normal((40, 5)), target=np.zeros(5), delta=0.05)
    sigma = 1e-6
    rho_vec = rng.uniform(0.05, 5.0, problem.n_rows)
    rho_vec[0] = 1e3
    factor = KktFactor.build(problem, sigma, rho_vec)
    assert factor.dim == 40 + problem.n_rows
    dense = assemble_kkt(problem, sigma, rho_vec).to_dense()
    for _ in range(3):
        rhs = rng.standard_normal(factor.dim)
        assert np.allclose(factor.solve(rhs), np.linalg.solve(dense, rhs), atol=1e-8)
    with pytest.raises(ValueError):
        factor.solve(np.ones(factor.dim + 1))


def test_schur_block_sized_by_basis_columns():
    # Шур-блок зависит только от s, не от n_c
    rng = np.random.default_rng(4)
    problem = SbwProblem(d_c=rng.standard_normal((20_000, 10)), target=np.zeros(10), delta=0.1)
    state = setup(problem)
    assert state.factor.schur.dim == 11
    assert state.factor_dim == 20_000 + problem.n_rows


def test_bounds_layout():
    problem = _two_pairs(delta=0.02)
    assert np.allclose(problem.lower, [1, 0, 0, 0, 0, 0.88])
    assert np.allclose(problem.upper, [1, 1, 1, 1, 1, 0.92])
    w = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(problem.q_mul(w), problem.constraint_matrix @ w)
    y = np.arange(problem.n_rows, dtype=float)
    assert np.allclose(problem.qt_mul(y), problem.constraint_matrix.T @ y)


def test_setup_rejects_bad_input():
    with pytest.raises(SbwSetupError):
        _two_pairs(delta=-0.1)
    with pytest.raises(SbwSetupError):
        SbwProblem(d_c=np.zeros((0, 2)), target=[0.0, 0.0], delta=0.1)
    with pytest.raises(SbwSetupError):
        SbwProblem(d_c=np.ones((3, 2)), target=[0.0], delta=0.1)
    with pytest.raises(ValueError):
        SolverSettings(alpha=2.0)


# ─── solve ───

def test_analytic_two_pairs():
    sol = solve(setup(_two_pairs(), SolverSettings.high_accuracy()))
    assert sol.status == SolverStatus.SOLVED
    assert np.allclose(sol.w, ANALYTIC_W, atol=1e-6)


def test_primal_infeasible_detected():
    problem = SbwProblem(d_c=np.zeros((5, 1)), target=[1.0], delta=0.1)
    sol = solve(setup(problem))
    assert sol.status == SolverStatus.PRIMAL_INFEASIBLE
    assert sol.iterations < SolverSettings().max_iter


def test_same_delta_resolves_immediately():
    rng = np.random.default_rng(1)
    problem = _random_problem(rng, 60, 4)
    state = setup(problem)
    first = solve(state)
    assert first.status == SolverStatus.SOLVED
    update_bounds(state, problem.delta)
    again = solve(state)
    assert again.status == SolverStatus.SOLVED
    assert again.iterations <= 2


def test_warm_start_beats_cold_start():
    rng = np.random.default_rng(2)
    d_c = rng.standard_normal((200, 10))
    target = d_c.mean(axis=0) + 0.3
    settings = SolverSettings(adaptive_rho=False)

    warm_state = setup(SbwProblem(d_c, target, 0.05), settings)
    assert solve(warm_state).status == SolverStatus.SOLVED
    update_bounds(warm_state, 0.045)
    warm = solve(warm_state)

    cold = solve(setup(SbwProblem(d_c, target, 0.045), settings))
    assert warm.status == SolverStatus.SOLVED and cold.status == SolverStatus.SOLVED
    assert warm.iterations < cold.iterations


def test_sweep_factors_once():
    rng = np.random.default_rng(3)
    d_c = rng.standard_normal((150, 5))
    state = setup(SbwProblem(d_c, d_c.mean(axis=0) + 0.2, 0.1), SolverSettings(adaptive_rho=False))
    for delta in np.linspace(0.1, 0.3, 100):
        update_bounds(state, delta)
        sol = solve(state)
        assert sol.status == SolverStatus.SOLVED
        _audit(state.problem, sol)
    assert state.factorizations == 1


def test_update_bounds_keeps_iterates():
    state = setup(_two_pairs(0.01))
    solve(state)
    w_before = state.w.copy()
    update_bounds(state, 0.02)
    assert np.array_equal(state.w, w_before)
    assert np.allclose(state.problem.upper[-1], 0.92)
    assert state.factorizations >= 1


def test_deterministic():
    rng = np.random.default_rng(4)
    problem = _random_problem(rng, 40, 3)
    a = solve(setup(problem))
    b = solve(setup(problem))
    assert np.array_equal(a.w, b.w)
    assert a.iterations == b.iterations


def test_max_iter_status():
    rng = np.random.default_rng(5)
    problem = _random_problem(rng, 80, 5, slack=(0.001, 0.002))
    sol = solve(setup(problem, SolverSettings(max_iter=1, eps_abs=1e-9, eps_rel=1e-9)))
    assert sol.status in (SolverStatus.MAX_ITER, SolverStatus.SOLVED_INACCURATE)
    assert sol.iterations == 1


# ─── polish ───

def test_polish_recovers_analytic_answer():
    settings = SolverSettings(eps_abs=1e-3, eps_rel=1e-3, polish=True)
    sol = solve(setup(_two_pairs(), settings))
    assert sol.polished and not sol.polish_failed
    assert np.abs(sol.w - ANALYTIC_W).max() <= 1e-10


def test_polish_rejects_all_zero_weights():
    problem = _two_pairs()
    zero = WeightSolution(w=np.zeros(4), status=SolverStatus.SOLVED, iterations=0,
                          primal_residual=0.0, dual_residual=0.0, objective=0.0)
    out = polish(zero, problem)
    assert out.polish_failed
    assert np.array_equal(out.w, zero.w)


def test_polish_skips_infeasible():
    sol = WeightSolution(w=np.zeros(2), status=SolverStatus.PRIMAL_INFEASIBLE, iterations=5,
                         primal_residual=1.0, dual_residual=1.0, objective=0.0)
    assert polish(sol, SbwProblem(np.zeros((2, 1)), [1.0], 0.1)) is sol


# ─── properties ───

def test_linear_term_does_not_change_weights():
    rng = np.random.default_rng(6)
    base = _random_problem(rng, 30, 3)
    plain = SbwProblem(base.d_c, base.target, base.delta, include_linear_term=False)
    settings = SolverSettings.high_accuracy()
    w_with = solve(setup(base, settings)).w
    w_without = solve(setup(plain, settings)).w
    assert np.abs(w_with - w_without).max() <= 1e-5


def test_kkt_conditions_hold_after_solve():
    rng = np.random.default_rng(7)
    problem = _random_problem(rng, 50, 4)
    sol = solve(setup(problem, SolverSettings.high_accuracy()))
    assert sol.is_solved
    _audit(problem, sol)
    stationarity = 2.0 * sol.w + problem.linear_term + problem.qt_mul(sol.y)
    assert np.abs(stationarity).max() <= 1e-4


def test_balance_row_scale_only_scales_up():
    d_c = np.array([[2.0, 0.01, 0.0], [-1.0, -0.005, 0.0]])
    problem = SbwProblem(d_c=d_c, target=np.zeros(3), delta=0.1)
    assert np.allclose(balance_row_scale(problem), [1.0, 100.0, 1e4])


def test_small_scale_columns_balanced_to_their_own_scale():
    rng = np.random.default_rng(9)
    d_c = rng.standard_normal((300, 3)) * np.array([1.0, 0.01, 0.01])
    target = d_c.T @ rng.dirichlet(np.ones(300))
    delta = np.array([0.05, 1e-5, 1e-5])
    problem = SbwProblem(d_c=d_c, target=target, delta=delta)
    sol = solve(setup(problem))
    assert sol.status == SolverStatus.SOLVED
    assert np.all(problem.balance_gaps(sol.w) <= delta + 1e-4)

    # двойственные переменные возвращаются в исходном масштабе
    exact = solve(setup(problem, SolverSettings.high_accuracy(polish=False)))
    stationarity = 2.0 * exact.w + problem.linear_term + problem.qt_mul(exact.y)
    assert np.abs(stationarity).max() <= 1e-4
    unscaled = solve(setup(problem, SolverSettings.high_accuracy(polish=False, scaling=False)))
    assert np.abs(exact.w - unscaled.w).max() <= 1e-3


def test_matches_slsqp_oracle_on_random_instances():
    rng = np.random.default_rng(8)
    settings = SolverSettings.high_accuracy()
    for _ in range(200):
        n_c = int(rng.integers(2, 51))
        s = int(rng.integers(1, 6))
        problem = _random_problem(rng, n_c, s)
        sol = solve(setup(problem, settings))
        assert sol.status in (SolverStatus.SOLVED, SolverStatus.SOLVED_INACCURATE)
        w_ref = _oracle(problem)
        assert np.abs(sol.w - w_ref).max() <= 1e-4
        assert abs(problem.objective(sol.w) - problem.objective(w_ref)) <= 1e-6


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
