"""
KERNBAL — command line
    weights   веса SBW для CSV-файла + отчёт (ATT, TASMD, статус решателя)
    simulate  исследование RMSE на синтетических данных
    sweep     бенчмарк кэширования факторизации по сетке δ

Exit codes: 0 ok (включая polish_failed: остаётся решение ADMM), 2 usage/parse,
3 infeasible, 4 solver max_iter.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

import config
from analysis.diagnostics import DiagnosticsGuardError, bias_bound_report, tasmd_report
from analysis.kernel import KernelConfig
from analysis.nystrom import NystromRankError, SketchConfig
from core.linalg import LinalgError
from core.logger import setup_logger
from core.qp_solver import SolverSettings, SolverStatus
from core.reporting import ReportingService, read_csv
from simulation import CovariateSpec, Method, Overlap, SimConfig, delta_sweep, run_study
from strategies.balancing import BasisKind, BasisSpec, Sample, att_estimate, solve_problem

log = logging.getLogger("KernBal.CLI")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_MAX_ITER = 4


class UsageError(ValueError):
    pass


def _csv_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _env_threads() -> int:
    return int(os.getenv("KERNBAL_THREADS", config.THREADS))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file, flags override it")
    common.add_argument("--log-file", default=config.LOG_FILE, help="rotating log file ('' to disable)")
    common.add_argument("--verbose", action="store_true")

    sketch = argparse.ArgumentParser(add_help=False)
    sketch.add_argument("--m", type=int, default=config.SKETCH_M)
    sketch.add_argument("--l", type=int, default=None, help="default ceil((s+m)/2)")
    sketch.add_argument("--s", type=int, default=config.SKETCH_S)
    sketch.add_argument("--seed", type=int, default=None)

    parser = argparse.ArgumentParser(prog="kernbal", description="Stable kernel balancing weights for ATT")
    subs = parser.add_subparsers(dest="command", required=True)
    sub: Dict[str, argparse.ArgumentParser] = {}

    p = subs.add_parser("weights", parents=[common, sketch], help="weights and balance report for a CSV")
    p.add_argument("input", help="input CSV with a header row")
    p.add_argument("--treatment", required=True)
    p.add_argument("--outcome", required=True, type=_csv_list, help="outcome column(s), comma separated")
    p.add_argument("--covariates", type=_csv_list, default=None, help="default: every other column")
    p.add_argument("--basis", choices=[k.value for k in BasisKind], default=BasisKind.KERNEL_NYSTROM.value)
    p.add_argument("--delta", type=float, default=config.DEFAULT_DELTA)
    p.add_argument("--rank", type=int, default=None, help="rank of the kernel_exact basis (default s)")
    p.add_argument("--bandwidth", type=float, default=None, help="default: column rank of X")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--eps-abs", type=float, default=config.SOLVER_EPS_ABS)
    p.add_argument("--eps-rel", type=float, default=config.SOLVER_EPS_REL)
    p.add_argument("--max-iter", type=int, default=config.SOLVER_MAX_ITER)
    p.add_argument("--polish", action="store_true")
    p.add_argument("--high-accuracy", action="store_true", help="eps 1e-6 with polishing")
    p.add_argument("--bias-bound", action="store_true", help="add exact-kernel bias components (n <= 5000)")
    p.add_argument("--out", default=".")
    sub["weights"] = p

    p = subs.add_parser("simulate", parents=[common, sketch], help="RMSE study on the synthetic design")
    p.add_argument("--n", type=int, default=config.SIM_N)
    p.add_argument("--reps", type=int, default=config.SIM_REPS)
    p.add_argument("--overlap", choices=[o.value for o in Overlap], default=Overlap.WEAK.value)
    p.add_argument("--spec", choices=[c.value for c in CovariateSpec], default=CovariateSpec.CORRECT.value)
    p.add_argument("--methods", type=_csv_list,
                   default=[Method.BALANCING_NYSTROM.value, Method.HAJEK_GLM.value])
    p.add_argument("--delta", type=float, default=config.DEFAULT_DELTA)
    p.add_argument("--threads", type=int, default=None, help="default: $KERNBAL_THREADS or 1")
    p.add_argument("--omit-timings", action="store_true", help="drop timing columns (byte-stable output)")
    p.add_argument("--no-progress", action="store_true")
    p.add_argument("--out", default=".")
    sub["simulate"] = p

    p = subs.add_parser("sweep", parents=[common, sketch], help="factorization caching benchmark over δ")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--overlap", choices=[o.value for o in Overlap], default=Overlap.WEAK.value)
    p.add_argument("--spec", choices=[c.value for c in CovariateSpec], default=CovariateSpec.CORRECT.value)
    p.add_argument("--delta-min", type=float, default=0.001)
    p.add_argument("--delta-max", type=float, default=0.1)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--warm", action="store_true", help="run the cached/warm sweep")
    p.add_argument("--cold", action="store_true", help="run the cold-start baseline")
    p.add_argument("--out", default=".")
    sub["sweep"] = p
    return parser, sub


def _apply_config_file(path: str, sub: argparse.ArgumentParser):
    """key=value file → subcommand defaults (keys are flag names, '-' or '_')."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in dotenv_values(path).items():
        dest = key.strip().lower().replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"unknown key '{key}' in config file {path}")
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.strip().lower() in ("1", "true", "yes")
        elif action.type is not None:
            try:
                defaults[dest] = action.type(raw)
            except ValueError:
                raise UsageError(f"bad value for '{key}' in config file: {raw}")
        else:
            defaults[dest] = raw
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and argv and argv[0] in sub:
        _apply_config_file(known.config, sub[argv[0]])
    return parser.parse_args(argv)


def _sketch_from_args(args, n: Optional[int] = None) -> SketchConfig:
    seed = args.seed if args.seed is not None else config.SKETCH_SEED
    sketch = SketchConfig(m=args.m, s=args.s, l=args.l, seed=seed)
    return sketch.capped(n) if n is not None else sketch


def _exit_code(status: SolverStatus) -> int:
    if status == SolverStatus.PRIMAL_INFEASIBLE:
        return EXIT_INFEASIBLE
    if status == SolverStatus.MAX_ITER:
        return EXIT_MAX_ITER
    return EXIT_OK


# ─── weights ───

def load_sample(args) -> Tuple[Sample, pd.DataFrame]:
    try:
        df = read_csv(args.input)
    except FileNotFoundError:
        raise UsageError(f"input file not found: {args.input}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise UsageError(f"cannot parse {args.input}: {e}")

    roles = [args.treatment] + list(args.outcome) + list(args.covariates or [])
    for col in roles:
        if col not in df.columns:
            raise UsageError(f"column '{col}' not found in {args.input}")
    if not df[args.treatment].isin([0, 1]).all():
        raise UsageError(f"treatment column '{args.treatment}' must contain only 0/1")

    covariates = args.covariates or [c for c in df.columns if c != args.treatment and c not in args.outcome]
    for col in covariates + list(args.outcome):
        if not pd.api.types.is_numeric_dtype(df[col]):
            raise UsageError(f"column '{col}' is not numeric")
    try:
        sample = Sample.from_frame(df, args.treatment, args.outcome[0], covariates)
    except ValueError as e:
        raise UsageError(str(e))
    return sample, df


def _solve_with_rank_retry(sample: Sample, spec: BasisSpec, settings: SolverSettings):
    try:
        solution, basis, problem = solve_problem(sample, spec, settings)
    except NystromRankError as e:
        if e.achievable_rank < 1:
            raise UsageError(str(e))
        log.warning(f"[CLI] ⚠️ {e}; retrying with l={e.achievable_rank}")
        spec = replace(spec, sketch=spec.sketch.with_rank(e.achievable_rank))
        solution, basis, problem = solve_problem(sample, spec, settings)
    return solution, basis, problem, spec


def cmd_weights(args) -> int:
    sample, df = load_sample(args)
    kind = BasisKind(args.basis)
    try:
        kernel = None
        if args.bandwidth is not None:
            kernel = KernelConfig(bandwidth=args.bandwidth, standardize=not args.no_standardize)
        elif args.no_standardize:
            kernel = replace(KernelConfig.for_covariates(sample.x), standardize=False)
        sketch = _sketch_from_args(args, sample.n)
        rank = (args.rank or sketch.s) if kind == BasisKind.KERNEL_EXACT else None
        spec = BasisSpec(kind=kind, delta=args.delta, kernel=kernel, sketch=sketch, rank=rank)
        if args.high_accuracy:
            settings = SolverSettings.high_accuracy(max_iter=args.max_iter)
        else:
            settings = SolverSettings(eps_abs=args.eps_abs, eps_rel=args.eps_rel, max_iter=args.max_iter,
                                      polish=args.polish)
        solution, basis, problem, spec = _solve_with_rank_retry(sample, spec, settings)
    except LinalgError:
        raise
    except ValueError as e:
        # флаги, несовместимые с данными
        raise UsageError(str(e))

    kcfg = spec.kernel_for(sample) if spec.uses_kernel else None
    resolved = {
        "command": "weights",
        "input": os.path.abspath(args.input),
        "treatment": args.treatment,
        "outcomes": list(args.outcome),
        "covariates": list(sample.x.names),
        "basis": kind.value,
        "delta": args.delta,
        "bandwidth": kcfg.bandwidth if kcfg else None,
        "standardize": kcfg.standardize if kcfg else True,
        "seed": spec.sketch.seed,
        "m": spec.sketch.m,
        "l": spec.sketch.l,
        "s": spec.sketch.s,
        "rank": spec.rank,
        "solver": settings.to_dict(),
    }
    reporter = ReportingService(args.out, resolved)
    payload: Dict[str, Any] = {"solver": solution.summary(), "n": sample.n, "n_t": sample.n_t, "n_c": sample.n_c,
                               "dropped_columns": list(problem.dropped_columns)}

    if solution.status == SolverStatus.PRIMAL_INFEASIBLE:
        payload["att"] = None
        payload["infeasible"] = True
        reporter.write_json(payload, "report.json")
        log.error(f"[CLI] ❌ balancing problem infeasible for δ={args.delta}")
        return EXIT_INFEASIBLE

    reporter.write_weights(sample.control_idx, solution.w)
    estimates = []
    for name in args.outcome:
        try:
            att, psi = att_estimate(sample.with_outcome(df[name].to_numpy(dtype=np.float64)), solution.w)
        except ValueError as e:
            log.error(f"[CLI] ❌ {name}: {e}")
            att, psi = None, None
        estimates.append({"outcome": name, "att": att, "psi_hat": psi})
    payload["estimates"] = estimates
    payload["att"] = estimates[0]["att"]
    payload["psi_hat"] = estimates[0]["psi_hat"]

    balance = tasmd_report(sample, solution.w, problem=problem)
    payload["balance"] = balance.to_dict()
    reporter.write_balance(balance.covariates, balance.basis)
    reporter.log_summary(balance.covariates, "BALANCE (TASMD)")

    if args.bias_bound and basis is not None:
        try:
            payload["bias_bound"] = bias_bound_report(sample, basis, solution.w, kcfg).to_dict()
        except DiagnosticsGuardError as e:
            log.warning(f"[CLI] ⚠️ bias bound skipped: {e}")

    reporter.write_json(payload, "report.json")
    log.info(f"[CLI] ✅ ATT={payload['att']} status={solution.status.value}")
    return _exit_code(solution.status)


# ─── simulate ───

TIMING_COLUMNS = ["mean_time_basis_s", "mean_time_solve_s"]


def cmd_simulate(args) -> int:
    try:
        threads = args.threads if args.threads is not None else _env_threads()
        cfg = SimConfig(
            n=args.n, overlap=Overlap(args.overlap), spec=CovariateSpec(args.spec), reps=args.reps,
            seed=args.seed if args.seed is not None else config.SIM_SEED,
            methods=tuple(Method(m) for m in args.methods), delta=args.delta,
            sketch=_sketch_from_args(args), threads=threads,
        )
    except ValueError as e:
        raise UsageError(str(e))

    result = run_study(cfg, progress=not args.no_progress)
    summary = result.summary
    estimates = result.estimates
    if args.omit_timings:
        summary = summary.drop(columns=TIMING_COLUMNS)
        estimates = estimates.drop(columns=["time_basis_s", "time_solve_s"])

    resolved = {"command": "simulate", **cfg.to_dict()}
    resolved.pop("threads")
    reporter = ReportingService(args.out, resolved)
    cols = ["method", "n", "overlap", "spec", "rmse", "mean_bias", "mean_max_tasmd"] + \
           ([] if args.omit_timings else TIMING_COLUMNS) + ["failures"]
    reporter.write_csv(summary[cols], "results.csv")
    reporter.write_json({"summary": summary.to_dict(orient="records"),
                         "estimates": estimates.to_dict(orient="records")}, "results.json")
    reporter.log_summary(summary[cols], "SIMULATION")
    return EXIT_OK


# ─── sweep ───

def cmd_sweep(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.delta_min < 0 or args.delta_min > args.delta_max:
        raise UsageError(f"need 0 <= delta-min <= delta-max, got [{args.delta_min}, {args.delta_max}]")
    warm, cold = args.warm, args.cold
    if not warm and not cold:
        warm = cold = True

    try:
        cfg = SimConfig(n=args.n, overlap=Overlap(args.overlap), spec=CovariateSpec(args.spec), reps=1,
                        seed=args.seed if args.seed is not None else config.SIM_SEED,
                        sketch=_sketch_from_args(args), threads=1)
    except ValueError as e:
        raise UsageError(str(e))
    grid = np.linspace(args.delta_min, args.delta_max, args.count)
    result = delta_sweep(cfg, grid, warm=warm, cold=cold)

    table = result.table.copy()
    table["speedup"] = result.speedup
    table["factorizations_warm"] = result.factorizations
    resolved = {"command": "sweep", **cfg.to_dict(), "delta_min": args.delta_min, "delta_max": args.delta_max,
                "count": args.count, "warm": warm, "cold": cold}
    resolved.pop("threads")
    reporter = ReportingService(args.out, resolved)
    reporter.write_csv(table, "sweep.csv")
    if warm and cold:
        reporter.log_summary(result.checkpoints(), "SWEEP CHECKPOINTS")
    return EXIT_OK


COMMANDS = {"weights": cmd_weights, "simulate": cmd_simulate, "sweep": cmd_sweep}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"kernbal: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.DEBUG if args.verbose else config.LOG_LEVEL
    setup_logger(log_file=args.log_file or None, level=level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        log.error(f"[CLI] ❌ {e}")
        print(f"kernbal: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
