"""Command-line entry point: ``drobust {run,bias-sweep,estimator-bench,verify}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import config as C
from .core import RobustSpec
from .doubling import DoublingError, doubling_minimize
from .estimators import MlmcConfig, Target, minibatch_estimate, mlmc_estimate, stream
from .oracle import full_batch_reference, full_batch_value, mc_bias_estimate
from .optim import (
    DivergenceError,
    RunTrace,
    SgmConfig,
    TraceRecord,
    make_evaluator,
    run_dual_sgm,
    run_nesterov,
    run_sgm,
)
from .problems import Problem
from .verify import format_table, injected_fault, run_checks

log = logging.getLogger("drobust")

# stream keys: (seed, purpose, entry index)
TRAIN, EVAL, SWEEP, BENCH = 0, 1, 2, 3
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
TUNE_GRID = [10.0 ** k for k in range(-5, 1)]


def _seed(cfg: dict, override: Optional[int]) -> int:
    return int(override if override is not None else cfg.get("seed", 0))


def _out_dir(cfg: dict, override: Optional[str], index: int, total: int) -> Path:
    base = Path(override or cfg.get("output", {}).get("dir", "out"))
    return base / f"entry_{index:03d}" if total > 1 else base


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _slope(xs, ys) -> Optional[float]:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    keep = ys > 0
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


# --------------------------------------------------------------------------
# run


def _optimize(cfg: dict, problem: Problem, spec: RobustSpec, sgm: SgmConfig, seed: int, index: int,
              evaluator):
    opt_type = cfg.get("optimizer", {}).get("type", "sgm")
    rng = stream(seed, TRAIN, index)
    if C.estimator_type(cfg) == "dual_sgm":
        if opt_type != "sgm":
            raise C.ConfigError("/optimizer/type", "the dual_sgm estimator runs with the sgm optimizer")
        try:
            x, _, trace = run_dual_sgm(problem, spec, sgm, rng,
                                       eta_step=cfg.get("optimizer", {}).get("eta_step"),
                                       evaluator=evaluator)
        except ValueError as exc:
            raise C.ConfigError("/estimator/type", str(exc)) from exc
        return x, trace
    estimator = C.build_estimator(cfg, problem, spec)
    runner = run_nesterov if opt_type == "nesterov" else run_sgm
    return runner(problem, estimator, sgm, rng, evaluator=evaluator)


def _tune(cfg, problem, spec, sgm: SgmConfig, seed, index, evaluator) -> float:
    """Coarse grid over decades, then one refinement among ``{eta/2, eta, 2 eta}``."""
    scores = {}

    def score(eta):
        if eta not in scores:
            trial = SgmConfig(eta, sgm.iterations, sgm.momentum, sgm.averaging, sgm.radius)
            try:
                x, _ = _optimize(cfg, problem, spec, trial, seed, index, None)
                scores[eta] = float(evaluator(x))
            except FloatingPointError:
                scores[eta] = math.inf
        return scores[eta]

    best = min(TUNE_GRID, key=score)
    return min([best / 2, best, best * 2], key=score)


def _epochs_to(trace: RunTrace, ref: float, n_atoms: Optional[int]) -> Optional[float]:
    target = ref + 0.02 * abs(ref)
    for rec in trace:
        if rec.value <= target:
            return rec.grad_evals / n_atoms if n_atoms else float(rec.grad_evals)
    return None


def _reference(cfg: dict, problem: Problem, spec: RobustSpec) -> Optional[float]:
    ref = cfg.get("reference")
    if not ref:
        return None
    if "value" in ref:
        return float(ref["value"])
    if not problem.finite:
        raise C.ConfigError("/reference", "a full-batch reference needs a finite-support problem")
    return full_batch_reference(problem, spec, iterations=ref.get("full_batch_iterations", 100_000))[1]


def run_entry(cfg: dict, seed: int, out: Path, index: int = 0, tune: bool = False) -> dict:
    t0 = time.perf_counter()
    problem = C.build_problem(cfg)
    spec = C.build_spec(cfg)
    opt_type = cfg.get("optimizer", {}).get("type", "sgm")
    eval_n = cfg.get("eval", {}).get("n", 2000)
    evaluator = make_evaluator(problem, spec, stream(seed, EVAL, index), eval_n)
    timing = bool(cfg.get("output", {}).get("timing", False))
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"objective": spec.to_dict(), "problem": cfg["problem"]["type"], "seed": seed}

    if opt_type == "doubling":
        dcfg = C.build_doubling(cfg, problem, spec)
        x, report = doubling_minimize(problem, dcfg, stream(seed, TRAIN, index))
        trace = RunTrace()
        it_off = ev_off = 0
        for r in report.results:
            for rec in r.trace:
                trace.add(TraceRecord(it_off + rec.iteration, ev_off + rec.grad_evals, rec.value,
                                      rec.step_size, rec.wall_ms))
            it_off += r.iterations
            ev_off += r.train_evals + r.select_evals
        grad_evals = report.grad_evals
        summary["doubling"] = report.to_dict()
    else:
        sgm = C.build_sgm(cfg, problem)
        if tune:
            eta = _tune(cfg, problem, spec, sgm, seed, index, evaluator)
            sgm = SgmConfig(eta, sgm.iterations, sgm.momentum, sgm.averaging, sgm.radius)
            summary["tuned_step_size"] = eta
        x, trace = _optimize(cfg, problem, spec, sgm, seed, index, evaluator)
        grad_evals = trace.final.grad_evals if len(trace) else 0
        summary["step_size"] = sgm.step_size

    final = float(evaluator(x))
    trace.write_csv(out / "trace.csv", timing=timing)
    summary.update(final_value=final, grad_evals=int(grad_evals),
                   wall_ms=(time.perf_counter() - t0) * 1e3, x_final=[float(v) for v in x])
    if problem.finite:
        summary["epochs"] = grad_evals / problem.n_atoms
    ref = _reference(cfg, problem, spec)
    if ref is not None:
        summary["reference_value"] = ref
        summary["epochs_to_2pct"] = _epochs_to(trace, ref, problem.n_atoms if problem.finite else None)
    _write_json(out / "summary.json", summary)
    return summary


def _run_entry_safe(args):
    cfg, seed, out, index, tune = args
    try:
        return run_entry(cfg, seed, Path(out), index, tune), None
    except C.ConfigError as exc:
        return None, ("config", exc.pointer, str(exc))
    except (DivergenceError, FloatingPointError, DoublingError) as exc:
        return None, ("run", "", str(exc))


def cmd_run(args) -> int:
    entries = C.load(args.config)
    jobs = [(cfg, _seed(cfg, args.seed), str(_out_dir(cfg, args.out, i, len(entries))), i, args.tune)
            for i, cfg in enumerate(entries)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_entry_safe, jobs))
    else:
        results = [_run_entry_safe(j) for j in jobs]
    code = EXIT_OK
    for (cfg, _, out, i, _), (summary, err) in zip(jobs, results):
        if err is not None:
            kind, pointer, msg = err
            prefix = f"/{i}" if len(jobs) > 1 else ""
            if kind == "config":
                print(f"config error at {prefix}{pointer}: {msg}", file=sys.stderr)
                code = max(code, EXIT_CONFIG)
            else:
                print(f"run {i} failed: {msg}", file=sys.stderr)
                code = max(code, EXIT_FAIL) if code != EXIT_CONFIG else code
            continue
        print(f"{out}: final_value={summary['final_value']:.6g} grad_evals={summary['grad_evals']}")
    return code


# --------------------------------------------------------------------------
# bias sweep


def cmd_bias_sweep(args) -> int:
    code = EXIT_OK
    entries = C.load(args.config)
    for i, cfg in enumerate(entries):
        seed = _seed(cfg, args.seed)
        problem = C.build_problem(cfg)
        spec = C.build_spec(cfg)
        sweep = cfg.get("sweep", {})
        x = C.eval_point(cfg, problem)
        if problem.finite:
            exact = full_batch_value(problem, x, spec)
        elif "reference_value" in sweep:
            exact = float(sweep["reference_value"])
        else:
            raise C.ConfigError("/sweep/reference_value", "infinite-support problems need a reference value")
        grid = sweep.get("n", [10, 100, 1000])
        reps = sweep.get("reps", 1000)
        rows = []
        for k, n in enumerate(grid):
            mean, se = mc_bias_estimate(problem, x, spec, n, reps, stream(seed, SWEEP, i, k))
            rows.append((n, exact - mean, se))
        out = _out_dir(cfg, args.out, i, len(entries))
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bias.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "bias_mean", "bias_stderr"])
            for n, b, se in rows:
                w.writerow([n, repr(float(b)), repr(float(se))])
        slope = _slope([r[0] for r in rows], [r[1] for r in rows])
        _write_json(out / "summary.json", {"exact_value": exact, "loglog_slope": slope, "reps": reps,
                                           "n": list(grid)})
        print(f"{out}: exact={exact:.6g} slope={slope if slope is None else round(slope, 3)}")
    return code


# --------------------------------------------------------------------------
# estimator benchmark


def bench_mlmc(problem: Problem, spec: RobustSpec, x, cfg: MlmcConfig, reps: int,
               rng: np.random.Generator, target: Target = Target.GRAD):
    """Cost and moments of ``reps`` MLMC draws: ``(costs, estimates)``."""
    costs = np.empty(reps)
    ests = np.empty((reps, problem.dim)) if target is Target.GRAD else np.empty((reps, 1))
    for r in range(reps):
        o = mlmc_estimate(problem, x, spec, cfg, target, rng)
        costs[r] = o.grad_evals
        ests[r] = o.grad if target is Target.GRAD else o.value_estimate
    return costs, ests


def bench_minibatch(problem: Problem, spec: RobustSpec, x, n: int, reps: int,
                    rng: np.random.Generator, target: Target = Target.GRAD):
    ests = np.empty((reps, problem.dim)) if target is Target.GRAD else np.empty((reps, 1))
    for r in range(reps):
        o = minibatch_estimate(problem, x, spec, n, rng)
        ests[r] = o.grad if target is Target.GRAD else o.value_estimate
    return ests


def unbiasedness_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-coordinate mean difference in units of its standard error."""
    diff = a.mean(axis=0) - b.mean(axis=0)
    se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(diff) / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
    return float(z.max())


def cmd_estimator_bench(args) -> int:
    entries = C.load(args.config)
    for i, cfg in enumerate(entries):
        seed = _seed(cfg, args.seed)
        problem = C.build_problem(cfg)
        spec = C.build_spec(cfg)
        x = C.eval_point(cfg, problem)
        est = cfg.get("estimator", {})
        bench = cfg.get("bench", {})
        reps = bench.get("reps", 10_000)
        target = Target(bench.get("target", "grad"))
        n0 = est.get("n0", 10)
        n = est.get("n_cap", est.get("n", 16 * n0))
        try:
            mcfg = MlmcConfig(n0, n)
        except ValueError as exc:
            raise C.ConfigError("/estimator", str(exc)) from exc
        costs, ml = bench_mlmc(problem, spec, x, mcfg, reps, stream(seed, BENCH, i, 0), target)
        mb = bench_minibatch(problem, spec, x, n, reps, stream(seed, BENCH, i, 1), target)
        rows = []
        for k, nk in enumerate(bench.get("n_grid", [n0 * 2 ** j for j in range(1, 6)])):
            try:
                gcfg = MlmcConfig(n0, nk)
            except ValueError as exc:
                raise C.ConfigError("/bench/n_grid", str(exc)) from exc
            c_k, e_k = bench_mlmc(problem, spec, x, gcfg, reps, stream(seed, BENCH, i, 2 + k), target)
            sq = np.sum(e_k ** 2, axis=1)
            rows.append((nk, float(c_k.mean()), float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(reps)),
                         float(np.sum(e_k.var(axis=0, ddof=1)))))
        out = _out_dir(cfg, args.out, i, len(entries))
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "mean_cost", "second_moment", "second_moment_stderr", "variance"])
            for row in rows:
                w.writerow([row[0]] + [repr(v) for v in row[1:]])
        summary = {
            "n0": n0, "n": n, "reps": reps,
            "mean_cost": float(costs.mean()),
            "cost_stderr": float(costs.std(ddof=1) / math.sqrt(reps)),
            "expected_cost": mcfg.expected_cost(),
            "unbiasedness_gap_stderr": unbiasedness_gap(ml, mb),
            "variance": float(np.sum(ml.var(axis=0, ddof=1))),
            "second_moment_slope": _slope([r[0] for r in rows], [r[2] for r in rows]),
        }
        _write_json(out / "summary.json", summary)
        print(f"{out}: mean_cost={summary['mean_cost']:.2f} (expected {summary['expected_cost']:.2f}) "
              f"gap={summary['unbiasedness_gap_stderr']:.2f} se slope={summary['second_moment_slope']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    if args.inject_fault:
        with injected_fault(args.inject_fault):
            results = run_checks()
    else:
        results = run_checks()
    print(format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drobust", description="Robust-objective optimization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config (one object or a list)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("run", help="optimize one configured problem; writes trace.csv and summary.json")
    common(p)
    p.add_argument("--tune", action="store_true", help="coarse-to-fine step-size search before the run")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for config lists")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bias-sweep", help="Monte Carlo bias of the batch objective over batch sizes")
    common(p)
    p.set_defaults(func=cmd_bias_sweep)

    p = sub.add_parser("estimator-bench", help="MLMC cost, unbiasedness and second-moment growth")
    common(p)
    p.set_defaults(func=cmd_estimator_bench)

    p = sub.add_parser("verify", help="run the self-check suite and print a pass/fail table")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.inject_fault and args.command != "verify":
            with injected_fault(args.inject_fault):
                return args.func(args)
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error at {exc.pointer}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, DoublingError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
