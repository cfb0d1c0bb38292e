"""Command-line entry point.

Subcommands: ``run`` (single experiment), ``sweep`` (one parameter over a
value list), ``lowerbound`` (worst-case instance report), ``lambda0``
(penalty threshold report), ``selftest`` (fast oracle checks).

Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence,
5 lower-bound mismatch.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS, StepSchedule
from .config import ExperimentConfig, load_config, validate_config
from .core import (
    ConfigError,
    ConvergenceError,
    DataError,
    InfeasibilityError,
    InvalidInputError,
    sq_dist,
)
from .engine import run_experiment, write_header, write_trace
from .theory import build_lowerbound_instance, solve_reference, lambda0 as lambda0_threshold
from .topology import incidence_matrix, min_nonzero_singular

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_LOWERBOUND = 5

SWEEPABLE = ("batch_size", "lambda", "alpha", "byzantine_count", "algorithm")


def _threads_override(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("BRAVO_SIM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"BRAVO_SIM_THREADS: expected an integer, got '{env}'") from None
    return None


def _prepare_out(out_dir: Path, force: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = out_dir / "trace.csv"
    if trace.exists() and not force:
        raise ConfigError(f"{trace} exists; pass --force to overwrite")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    threads = _threads_override(args)
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    return cfg


def final_window_mean(rows, attr: str, frac: float = 0.1) -> float | None:
    """Mean of a metric over the last ``frac`` of the logged round range."""
    if not rows:
        return None
    k_max = max(r.k for r in rows)
    cut = k_max * (1.0 - frac)
    values = [getattr(r, attr) for r in rows if r.k >= cut and getattr(r, attr) is not None]
    return float(np.mean(values)) if values else None


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    result = run_experiment(cfg)
    write_trace(out / "trace.csv", result.rows)
    write_header(out / "header.txt", result.header)
    if result.diverged:
        print(f"diverged; partial trace written to {out / 'trace.csv'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out / 'trace.csv'} ({len(result.rows)} rows)")
    return EXIT_OK


def _sweep_config(cfg: ExperimentConfig, param: str, raw: str) -> ExperimentConfig:
    if param == "batch_size":
        return replace(cfg, batch_size=int(raw))
    if param == "lambda":
        return replace(cfg, lam=float(raw))
    if param == "alpha":
        return replace(cfg, step=StepSchedule(cfg.step.kind, float(raw)))
    if param == "byzantine_count":
        return replace(cfg, byz_count=int(raw), byz_ids=())
    if param == "algorithm":
        if raw not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm '{raw}'")
        return replace(cfg, algorithm=raw)
    raise ConfigError(f"unknown sweep parameter '{param}'; choose from {SWEEPABLE}")


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    values = [tok.strip() for tok in args.values.split(",") if tok.strip()]
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ["value,conv_err_final,accuracy_final"]
    diverged_any = False
    for raw in values:
        sub_cfg = _sweep_config(cfg, args.param, raw)
        validate_config(sub_cfg)
        sub_out = out / f"{args.param}_{raw}"
        _prepare_out(sub_out, args.force)
        result = run_experiment(sub_cfg)
        write_trace(sub_out / "trace.csv", result.rows)
        write_header(sub_out / "header.txt", result.header)
        diverged_any |= result.diverged
        conv = final_window_mean(result.rows, "conv_err")
        acc = final_window_mean(result.rows, "accuracy")
        summary.append(
            f"{raw},{'' if conv is None else repr(conv)},{'' if acc is None else repr(acc)}"
        )
        print(f"{args.param} = {raw}: conv_err {conv}, accuracy {acc}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_DIVERGED if diverged_any else EXIT_OK


def run_lowerbound(
    n_regular: int,
    byz_per_agent: int,
    lam: float,
    p: int,
    algorithm: str,
    rounds: int,
    n_samples: int = 1,
    alpha: float = 0.01,
):
    """Run the worst-case instance; returns (measured, analytic, all_zero)."""
    from .engine import SimulationState

    inst = build_lowerbound_instance(n_regular, byz_per_agent, lam, p, n_samples)
    state = SimulationState(
        inst.network,
        inst.problem,
        inst.attack,
        algorithm,
        StepSchedule("constant", alpha),
        lam,
        batch_size=1,
        seed=0,
        x_star=inst.x_star,
    )
    all_zero = bool(np.all(state.regular_models() == 0.0))
    for k in range(rounds):
        state.run_round(k)
        if not np.all(state.regular_models() == 0.0):
            all_zero = False
    measured = sq_dist(state.stacked(), inst.x_star)
    return measured, inst.analytic_error, all_zero


def cmd_lowerbound(args) -> int:
    if args.algorithm not in ("drsa", "bravo-saga", "bravo-lsvrg"):
        raise ConfigError(f"lowerbound supports drsa/bravo-saga/bravo-lsvrg, not '{args.algorithm}'")
    measured, analytic, all_zero = run_lowerbound(
        args.regular, args.byz_per_agent, args.lam, args.dim, args.algorithm, args.rounds,
        n_samples=args.samples,
    )
    diff = abs(measured - analytic)
    print(
        f"lowerbound: algorithm={args.algorithm} R={args.regular} "
        f"byz_per_agent={args.byz_per_agent} lambda={args.lam!r} p={args.dim} K={args.rounds}"
    )
    print(f"measured  ||x^K - x*||^2 = {measured!r}")
    print(f"analytic  sum lam^2|B_w|^2 p = {analytic!r}")
    print(f"absolute difference = {diff!r}")
    print(f"iterates exactly zero at every round: {str(all_zero).lower()}")
    return EXIT_OK if diff <= 1e-12 else EXIT_LOWERBOUND


def cmd_lambda0(args) -> int:
    from .engine import build_network, build_problem

    cfg = load_config(args.config)
    net = build_network(cfg)
    problem = build_problem(cfg, net.n_agents)
    x_tilde = solve_reference(problem, net.regular_ids, cfg.ref_tol, cfg.ref_max_iters)
    a = incidence_matrix(net)
    worst = max(float(np.max(np.abs(problem.full_grad(w, x_tilde)))) for w in net.regular_ids)
    if a.edges:
        sigma = repr(min_nonzero_singular(a))
        lam0 = lambda0_threshold(problem, x_tilde, a)
    else:
        sigma, lam0 = "n/a", 0.0  # single regular agent: no consensus constraint
    print(f"lambda0 = {lam0!r}")
    print(f"sigma_min(A) = {sigma}")
    print(f"max_w ||F'_w(x*)||_inf = {worst!r}")
    if cfg.lam >= lam0:
        print(f"config lambda = {cfg.lam!r}: threshold met")
    else:
        print(f"warning: config lambda = {cfg.lam!r} is below lambda0 = {lam0!r}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .algorithms import LsvrgState, SagaState
    from .problems import LeastSquaresProblem
    from .core import rng_stream

    t0 = time.perf_counter()
    failures = []

    # exhaustive conditional-unbiasedness oracle on a random instance
    rng = rng_stream(7, purpose="selftest")
    j, p = 8, 3
    problem = LeastSquaresProblem({0: rng.standard_normal((j, p))})
    x = rng.standard_normal(p)
    saga = SagaState(problem, 0, rng.standard_normal(p))
    saga.table = rng.standard_normal((j, p))
    saga.table_sum = saga.table.sum(axis=0)
    full = problem.full_grad(0, x)
    mean_g = np.zeros(p)
    for i in range(j):
        fresh = problem.sample_grads(0, np.array([i]), x)
        g = fresh.mean(axis=0) - saga.table[i] + saga.table_sum / j
        mean_g += g / j
    if not np.max(np.abs(mean_g - full)) <= 1e-10:
        failures.append("saga unbiasedness")
    lsvrg = LsvrgState(problem, 0, rng.standard_normal(p))
    mean_g = np.zeros(p)
    for i in range(j):
        fresh = problem.sample_grads(0, np.array([i]), x).mean(axis=0)
        at_y = problem.sample_grads(0, np.array([i]), lsvrg.y).mean(axis=0)
        mean_g += (fresh - at_y + lsvrg.full_grad_y) / j
    if not np.max(np.abs(mean_g - full)) <= 1e-10:
        failures.append("lsvrg unbiasedness")
    print(f"unbiasedness oracle: {'FAIL' if failures else 'PASS'}")

    # lower-bound exactness for the three span-condition methods
    for algorithm in ("drsa", "bravo-saga", "bravo-lsvrg"):
        measured, analytic, all_zero = run_lowerbound(3, 2, 0.1, 5, algorithm, 200)
        ok = abs(measured - analytic) <= 1e-12 and all_zero
        print(f"lowerbound exactness ({algorithm}): {'PASS' if ok else 'FAIL'}")
        if not ok:
            failures.append(f"lowerbound {algorithm}")

    print(f"selftest finished in {time.perf_counter() - t0:.2f}s")
    return EXIT_OK if not failures else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bravo-sim",
        description="Byzantine-robust decentralized stochastic optimization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one configured experiment")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--threads", type=int, default=None)
    run_p.add_argument("--force", action="store_true")
    run_p.set_defaults(fn=cmd_run)

    sweep_p = sub.add_parser("sweep", help="run one experiment per swept value")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--param", required=True, choices=SWEEPABLE)
    sweep_p.add_argument("--values", required=True, help="comma-separated value list")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--threads", type=int, default=None)
    sweep_p.add_argument("--force", action="store_true")
    sweep_p.set_defaults(fn=cmd_sweep)

    low_p = sub.add_parser("lowerbound", help="run the worst-case instance and report")
    low_p.add_argument("--regular", type=int, required=True)
    low_p.add_argument("--byz-per-agent", type=int, required=True)
    low_p.add_argument("--lam", type=float, required=True)
    low_p.add_argument("--dim", type=int, required=True)
    low_p.add_argument("--algorithm", required=True)
    low_p.add_argument("--rounds", type=int, default=1000)
    low_p.add_argument("--samples", type=int, default=1)
    low_p.set_defaults(fn=cmd_lowerbound)

    lam_p = sub.add_parser("lambda0", help="print the penalty threshold for a config")
    lam_p.add_argument("--config", required=True)
    lam_p.set_defaults(fn=cmd_lambda0)

    self_p = sub.add_parser("selftest", help="fast oracle checks")
    self_p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ConvergenceError, InfeasibilityError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
