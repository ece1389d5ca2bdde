"""End-to-end acceptance checks, one per criterion.

Each criterion prints a ``PASS criterion k: ...`` or ``FAIL criterion k: ...``
line. Run with ``pytest -s tests/test_acceptance.py`` to see them, or
``python3 tests/test_acceptance.py`` for just the table.
"""
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from drobust.cli import bench_mlmc, main as cli_main
from drobust.core import RobustSpec
from drobust.doubling import DoublingConfig, doubling_minimize
from drobust.estimators import MlmcConfig, Target, make_estimator, stream
from drobust.inner import dual_value, primal_value, solve_arrays
from drobust.optim import SgmConfig, make_evaluator, run_nesterov, run_sgm
from drobust.oracle import (
    bernoulli_surrogate,
    finite_diff_grad,
    full_batch_reference,
    full_batch_value,
    mc_bias_estimate,
    mc_variance_estimate,
    simplex_grid_max,
)
from drobust.problems import bernoulli_linear, cvar_lecam_pair, finite_linear, lecam_cvar_value, three_point_hard

pytestmark = pytest.mark.slow

SPECS = [RobustSpec.cvar(0.3), RobustSpec.kl_cvar(0.3, 0.2), RobustSpec.chi2_pen(0.5), RobustSpec.chi2_con(0.4)]


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def report(k: int, ok: bool, detail: str, seconds: float, limit: float) -> bool:
    ok = ok and seconds < limit
    print(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail} [{seconds:.1f}s, limit {limit:.0f}s]", flush=True)
    return ok


def criterion_1() -> bool:
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        v = rng.uniform(0.0, 1.0, 3)
        for spec in SPECS:
            worst = max(worst, abs(solve_arrays(v, spec)[2] - simplex_grid_max(v, spec, 2e-3)))
    return report(1, worst <= 5e-3, f"max |solver - grid| = {worst:.2e} over 400 cases",
                  time.perf_counter() - t0, 10)


def criterion_2() -> bool:
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(1000):
        v = rng.normal(0.0, 1.0, int(rng.integers(1, 101)))
        for spec in SPECS:
            q, eta, val = solve_arrays(v, spec)
            worst = max(worst, abs(primal_value(v, q, spec) - dual_value(v, eta, spec)))
    return report(2, worst <= 1e-7, f"max |primal - dual| = {worst:.2e} over 4000 cases",
                  time.perf_counter() - t0, 10)


def criterion_3() -> bool:
    t0 = time.perf_counter()
    alpha, B = 0.1, 1.0
    cvar = RobustSpec.cvar(alpha)
    prob = bernoulli_linear(alpha, B)
    full = full_batch_value(prob, np.ones(1), cvar)
    ok = True
    parts = []
    for n in (10, 100, 1000, 10_000):
        bias = full - bernoulli_surrogate(cvar, alpha, n, B)
        lo, hi = 0.05 * B * math.sqrt(0.9) / math.sqrt(alpha * n), 3 * B / math.sqrt(alpha * n)
        ok &= lo <= bias <= hi
        parts.append(f"n={n}: {bias:.4f} in [{lo:.4f}, {hi:.4f}]")
    # chi2-pen with lambda >= B never clips weights, so the bias is Var/(2 lambda n)
    pen = RobustSpec.chi2_pen(1.0)
    bern = bernoulli_linear(0.5, B)
    exact = full_batch_value(bern, np.ones(1), pen)
    ns = [8, 16, 32, 64, 128]
    biases = [exact - mc_bias_estimate(bern, np.ones(1), pen, n, 50_000, stream(3, n))[0] for n in ns]
    slope = loglog_slope(ns, biases) if min(biases) > 0 else math.nan
    ok &= -1.3 <= slope <= -0.7
    parts.append(f"chi2-pen MC slope {slope:.3f}")
    return report(3, ok, "; ".join(parts), time.perf_counter() - t0, 120)


def criterion_4() -> bool:
    t0 = time.perf_counter()
    lam = 1.0
    prob = finite_linear(200, 5, seed=0)
    spec = RobustSpec.chi2_pen(lam)
    x = np.full(5, 0.2)
    ns = [10, 20, 40, 80]
    var = [mc_variance_estimate(prob, x, spec, n, 100_000, stream(4, n)) for n in ns]
    bounds = [8 * (1 + prob.bound_B / lam) * prob.bound_G ** 2 / n for n in ns]
    ratios = [var[i] / var[i + 1] for i in range(3)]
    ok = all(v <= b for v, b in zip(var, bounds)) and all(1.6 <= r <= 2.4 for r in ratios)
    detail = (f"Var = {', '.join(f'{v:.2e}' for v in var)} (bound at n=10 {bounds[0]:.3f}); "
              f"ratios {', '.join(f'{r:.3f}' for r in ratios)}")
    return report(4, ok, detail, time.perf_counter() - t0, 120)


def criterion_5() -> bool:
    t0 = time.perf_counter()
    ok = True
    parts = []
    # unbiasedness and cost against exact binomial surrogates
    cfg = MlmcConfig(10, 160)
    for spec in (RobustSpec.cvar(0.1), RobustSpec.chi2_pen(1.0)):
        reps = 100_000
        costs, est = bench_mlmc(bernoulli_linear(0.1), spec, np.ones(1), cfg, reps, stream(5, 0),
                                Target.VALUE)
        est = est[:, 0]
        target = bernoulli_surrogate(spec, 0.1, cfg.n)
        gap = abs(est.mean() - target) / (est.std(ddof=1) / math.sqrt(reps))
        cost_gap = abs(costs.mean() - cfg.expected_cost()) / (costs.std(ddof=1) / math.sqrt(reps))
        ok &= gap <= 3 and cost_gap <= 3
        parts.append(f"{spec.kind.value}: gap {gap:.2f} se, cost {costs.mean():.2f} vs {cfg.expected_cost():.0f} "
                     f"({cost_gap:.2f} se)")
    # second-moment growth over n in {2^4, ..., 2^10} n0
    reps = 20_000
    fl = finite_linear(200, 5, seed=0)
    x = np.full(5, 0.2)
    for spec, n0 in ((RobustSpec.cvar(0.1), 10), (RobustSpec.chi2_pen(1.0), 1)):
        ns = [n0 * 2 ** k for k in range(4, 11)]
        moments = [np.mean(np.sum(bench_mlmc(fl, spec, x, MlmcConfig(n0, n), reps, stream(5, 1, n))[1] ** 2,
                                  axis=1)) for n in ns]
        slope = loglog_slope(ns, moments)
        ok &= slope <= 0.2
        parts.append(f"{spec.kind.value} slope {slope:.3f}")
    ns = [2 ** k for k in range(4, 11)]
    moments = [np.mean(bench_mlmc(three_point_hard(1.0, 1.0, n), RobustSpec.chi2_con(1.0), np.zeros(1),
                                  MlmcConfig(1, n), reps, stream(5, 2, n))[1] ** 2) for n in ns]
    slope = loglog_slope(ns, moments)
    ok &= slope >= 0.7
    parts.append(f"chi2_con three-point slope {slope:.3f}")
    return report(5, ok, "; ".join(parts), time.perf_counter() - t0, 300)


def criterion_6() -> bool:
    t0 = time.perf_counter()
    ok = True
    parts = []
    G = R = 1.0
    pos, _ = cvar_lecam_pair(G, R, 0.1, 0.05)
    spec = RobustSpec.cvar(0.1)
    worst = 0.0
    for seed in range(5):
        est = make_estimator(pos, spec, "minibatch", n=10)
        x, _ = run_sgm(pos, est, SgmConfig(0.01, 10_000, averaging="full"), stream(6, seed), x0=np.array([R]))
        worst = max(worst, lecam_cvar_value(float(x[0]), G, 0.1, 0.05))
    ok &= worst <= 0.05 * G * R
    parts.append(f"Le Cam worst excess {worst:.4f}")

    prob = finite_linear(200, 5, seed=0)
    _, ref, ref_evals = full_batch_reference(prob, spec, iterations=100_000)
    ev = make_evaluator(prob, spec)
    T = 20_000
    for n in (10, 50):
        est = make_estimator(prob, spec, "minibatch", n=n)
        runs = {
            "sgm": run_sgm(prob, est, SgmConfig(1.0, T, averaging="suffix:3"), stream(6, 10, n))[0],
            "nesterov": run_nesterov(prob, est, SgmConfig(0.1, T, momentum=0.9, averaging="suffix:3"),
                                     stream(6, 11, n))[0],
        }
        for name, x in runs.items():
            gap = ev(x) / ref - 1
            frac = T * n / ref_evals
            ok &= gap <= 0.02 and frac <= 0.2
            parts.append(f"{name} n={n}: {100 * gap:+.2f}% at {frac:.3f} of budget")
    parts.insert(1, f"reference {ref:.5f}")
    return report(6, ok, "; ".join(parts), time.perf_counter() - t0, 300)


def criterion_7() -> bool:
    t0 = time.perf_counter()
    prob = finite_linear(200, 5, seed=0)
    rho, eps, B = 1.0, 0.05, prob.bound_B
    spec = RobustSpec.chi2_con(rho)
    _, ref, _ = full_batch_reference(prob, spec, iterations=100_000)
    cfg = DoublingConfig(rho=rho, epsilon=eps, B=B)
    K_expected = math.ceil(math.log2(2 * B / eps)) - 1
    ok = True
    gaps = []
    for seed in range(5):
        x, rep = doubling_minimize(prob, cfg, stream(7, seed))
        gap = full_batch_value(prob, x, spec) - ref
        gaps.append(gap)
        ok &= gap <= 2 * eps and rep.K == K_expected == len(rep.results)
    detail = f"reference {ref:.5f}, K = {K_expected}, gaps {', '.join(f'{g:+.4f}' for g in gaps)} (limit {2 * eps})"
    return report(7, ok, detail, time.perf_counter() - t0, 300)


def criterion_8() -> bool:
    t0 = time.perf_counter()
    prob = finite_linear(200, 5, seed=0)
    rng = np.random.default_rng(108)
    worst = 0.0
    for spec in (RobustSpec.kl_cvar(0.2, 0.3), RobustSpec.chi2_pen(0.5)):
        for _ in range(50):
            x = rng.normal(size=5)
            x *= rng.uniform(0.0, 1.0) / np.linalg.norm(x)
            samples = prob.sample(rng, int(rng.integers(2, 51)))
            values, grads = prob.loss_grad(x, samples)
            g = solve_arrays(values, spec)[0] @ grads
            fd = finite_diff_grad(lambda y: solve_arrays(prob.losses(y, samples), spec)[2], x, 1e-6)
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    return report(8, worst <= 1e-5, f"max rel err {worst:.2e} over 100 pairs", time.perf_counter() - t0, 30)


def criterion_9() -> bool:
    t0 = time.perf_counter()
    cfg = {"seed": 9, "problem": {"type": "finite_linear", "n_atoms": 200, "dim": 5},
           "objective": {"kind": "chi2_pen", "lambda": 0.5},
           "estimator": {"type": "mlmc", "n0": 2, "n": 64},
           "optimizer": {"type": "sgm", "step_size": 0.1, "iterations": 2000, "averaging": "suffix:3"}}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cfg.json"
        path.write_text(json.dumps(cfg))
        codes = [cli_main(["run", "--config", str(path), "--out", str(Path(tmp) / d)]) for d in ("a", "b")]
        a = (Path(tmp) / "a" / "trace.csv").read_bytes()
        b = (Path(tmp) / "b" / "trace.csv").read_bytes()
    ok = codes == [0, 0] and a == b and len(a) > 0
    return report(9, ok, f"exit codes {codes}, {len(a)} bytes, identical={a == b}", time.perf_counter() - t0, 60)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
