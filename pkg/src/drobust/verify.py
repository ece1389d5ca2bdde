"""Fast self-check suite behind ``drobust verify``.

Each check compares a production routine against an independent reference
(grid search, closed forms, finite differences, exact binomial sums) or
asserts a structural property. The whole suite runs in a few seconds.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import inner
from .core import Kind, RobustSpec, chi2_divergence
from .doubling import f_rho, lambda_intervals
from .estimators import MlmcConfig, level_distribution, minibatch_estimate, mlmc_estimate, stream, Target
from .inner import dual_value, primal_value, solve_arrays
from .optim import SgmConfig, project_ball, run_sgm
from .oracle import (
    bernoulli_cvar_surrogate,
    bernoulli_surrogate,
    finite_diff_grad,
    full_batch_value,
    mc_bias_estimate,
    simplex_grid_max,
)
from .problems import bernoulli_linear, finite_linear, multiclass_logistic, synthetic_subgroup_dataset

SPECS = {
    "cvar": RobustSpec.cvar(0.3),
    "kl_cvar": RobustSpec.kl_cvar(0.3, 0.2),
    "chi2_pen": RobustSpec.chi2_pen(0.5),
    "chi2_con": RobustSpec.chi2_con(0.4),
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


@contextlib.contextmanager
def injected_fault(shift: float = 1e-2):
    """Shift every robust value from the inner dispatcher (test-only)."""
    old = inner._FAULT_SHIFT
    inner._FAULT_SHIFT = float(shift)
    try:
        yield
    finally:
        inner._FAULT_SHIFT = old


def _random_batches(seed: int, count: int, n_max: int):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(1, n_max + 1))
        yield rng.uniform(0.0, 1.0, n)


def _grid_check(spec: RobustSpec, seed: int) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        v = rng.uniform(0.0, 1.0, 3)
        worst = max(worst, abs(solve_arrays(v, spec)[2] - simplex_grid_max(v, spec, 2e-3)))
    return worst <= 5e-3, f"max |solver - grid| = {worst:.2e}"


def check_primal_dual() -> Tuple[bool, str]:
    worst = 0.0
    for i, v in enumerate(_random_batches(1, 200, 60)):
        for spec in SPECS.values():
            q, eta, val = solve_arrays(v, spec)
            worst = max(worst, abs(primal_value(v, q, spec) - val), abs(dual_value(v, eta, spec) - val))
    return worst <= 1e-7, f"max gap = {worst:.2e}"


def check_feasibility() -> Tuple[bool, str]:
    bad = 0
    for v in _random_batches(2, 200, 40):
        n = v.size
        for spec in SPECS.values():
            q = solve_arrays(v, spec)[0]
            if q.min() < -1e-12 or abs(q.sum() - 1) > 1e-9:
                bad += 1
            elif spec.alpha is not None and q.max() > 1.0 / (spec.alpha * n) + 1e-9:
                bad += 1
            elif spec.kind is Kind.CHI2_CON and chi2_divergence(q) > spec.rho + 1e-7:
                bad += 1
    return bad == 0, f"{bad} infeasible solutions"


def check_prefix_vs_bisection() -> Tuple[bool, str]:
    worst = 0.0
    for v in _random_batches(3, 200, 80):
        p = np.full(v.size, 1.0 / v.size)
        a = inner.chi2_pen_eta_prefix(v, 0.3, p)
        b = inner.chi2_pen_eta_bisect(v, 0.3, p)
        worst = max(worst, abs(a - b))
    return worst <= 1e-8, f"max |eta_prefix - eta_bisect| = {worst:.2e}"


def check_chi2_con_active() -> Tuple[bool, str]:
    worst = 0.0
    for v in _random_batches(4, 200, 60):
        if v.size < 4:
            continue
        rho = 0.2
        q = solve_arrays(v, RobustSpec.chi2_con(rho))[0]
        if q.max() < 1 - 1e-12:
            worst = max(worst, abs(chi2_divergence(q) - rho))
    return worst <= 1e-7, f"max |D(q) - rho| = {worst:.2e}"


def check_translation() -> Tuple[bool, str]:
    worst = 0.0
    for v in _random_batches(5, 100, 40):
        for spec in SPECS.values():
            worst = max(worst, abs(solve_arrays(v + 0.7, spec)[2] - solve_arrays(v, spec)[2] - 0.7))
    return worst <= 1e-8, f"max translation error = {worst:.2e}"


def check_lambda_derivative() -> Tuple[bool, str]:
    worst = 0.0
    h = 1e-6
    for v in _random_batches(6, 50, 30):
        lam = 0.4
        fd = (solve_arrays(v, RobustSpec.chi2_pen(lam + h))[2] - solve_arrays(v, RobustSpec.chi2_pen(lam - h))[2]) / (2 * h)
        worst = max(worst, abs(fd - inner.lambda_derivative(v, lam)))
    return worst <= 1e-5, f"max |fd - analytic| = {worst:.2e}"


def check_bias_sign() -> Tuple[bool, str]:
    alpha = 0.2
    prob = bernoulli_linear(alpha, 1.0, 1.0)
    spec = RobustSpec.cvar(alpha)
    x = np.array([1.0])
    exact = full_batch_value(prob, x, spec)
    mean, se = mc_bias_estimate(prob, x, spec, 20, 4000, stream(7))
    sur = bernoulli_cvar_surrogate(alpha, 20)
    ok = exact >= mean - 3 * se and abs(mean - sur) <= 3 * se + 1e-12 and abs(exact - 1.0) < 1e-12
    return ok, f"L={exact:.4f} MC={mean:.4f}+-{se:.4f} exact surrogate={sur:.4f}"


def check_surrogate_monotone() -> Tuple[bool, str]:
    vals = [bernoulli_cvar_surrogate(0.1, n) for n in (10, 20, 40, 80, 160, 320)]
    pen = [bernoulli_surrogate(RobustSpec.chi2_pen(0.5), 0.3, n) for n in (5, 10, 20, 40)]
    ok = all(b >= a - 1e-12 for a, b in zip(vals, vals[1:])) and all(b >= a - 1e-12 for a, b in zip(pen, pen[1:]))
    return ok, "surrogates nondecreasing in n" if ok else f"cvar {vals} pen {pen}"


def check_mlmc_cost() -> Tuple[bool, str]:
    cfg = MlmcConfig(10, 160)
    dist = level_distribution(cfg)
    total = sum(pj for _, pj in dist)
    cost = sum(pj * (2 ** j) * cfg.n0 for j, pj in dist)
    ok = abs(total - 1) < 1e-12 and abs(cost - cfg.expected_cost()) < 1e-9 and cfg.expected_cost() == 50
    return ok, f"sum q = {total}, E cost = {cost}"


def check_mlmc_unbiased() -> Tuple[bool, str]:
    p0 = 0.3
    prob = bernoulli_linear(p0, 1.0, 1.0)
    spec = RobustSpec.chi2_pen(0.5)
    cfg = MlmcConfig(4, 32)
    rng = stream(11)
    x = np.array([1.0])
    vals = np.array([mlmc_estimate(prob, x, spec, cfg, Target.VALUE, rng).value_estimate for _ in range(6000)])
    target = bernoulli_surrogate(spec, p0, 32)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    gap = abs(vals.mean() - target)
    return gap <= 3 * se, f"gap {gap:.4f} vs 3 se {3 * se:.4f}"


def check_minibatch_fd() -> Tuple[bool, str]:
    prob = finite_linear(50, 4, seed=3)
    worst = 0.0
    rng = np.random.default_rng(12)
    for spec in (RobustSpec.kl_cvar(0.2, 0.3), RobustSpec.chi2_pen(0.5)):
        for _ in range(5):
            x = project_ball(rng.normal(size=4), 0.8)
            samples = prob.sample(rng, 20)
            values, grads = prob.loss_grad(x, samples)
            g = solve_arrays(values, spec)[0] @ grads
            fd = finite_diff_grad(lambda y: solve_arrays(prob.losses(y, samples), spec)[2], x,
                                  1e-6 * (1 + np.linalg.norm(x)))
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12))
    return worst <= 1e-5, f"max rel err = {worst:.2e}"


def check_logistic_fd() -> Tuple[bool, str]:
    ds = synthetic_subgroup_dataset(60, 3, 3, seed=1)
    prob = multiclass_logistic(ds, 0.1)
    rng = np.random.default_rng(13)
    x = rng.normal(size=prob.dim) * 0.3
    idx = np.arange(10)
    _, grads = prob.loss_grad(x, idx)
    worst = 0.0
    for i in range(3):
        fd = finite_diff_grad(lambda y: float(prob.losses(y, idx[i:i + 1])[0]), x, 1e-6)
        worst = max(worst, np.linalg.norm(grads[i] - fd) / np.linalg.norm(grads[i]))
    return worst <= 1e-6, f"max rel err = {worst:.2e}"


def check_projection() -> Tuple[bool, str]:
    rng = np.random.default_rng(14)
    ok = True
    for _ in range(200):
        x = rng.normal(size=5) * rng.uniform(0, 3)
        y = project_ball(x, 1.0)
        ok &= np.linalg.norm(y) <= 1 + 1e-12
        ok &= (np.linalg.norm(x) > 1) or np.array_equal(x, y)
    return bool(ok), "projections inside the ball"


def check_duality_sandwich() -> Tuple[bool, str]:
    prob = finite_linear(30, 3, seed=5)
    rho = 0.5
    spec = RobustSpec.chi2_con(rho)
    rng = np.random.default_rng(15)
    worst = math.inf
    grid = np.geomspace(1e-3, prob.bound_B / rho, 400)
    for _ in range(5):
        x = project_ball(rng.normal(size=3), 1.0)
        exact = full_batch_value(prob, x, spec)
        best = min(f_rho(prob, x, lam, rho) for lam in grid)
        worst = min(worst, best - exact)
    return worst >= -1e-9, f"min over probes of (min_lam f - L) = {worst:.2e}"


def check_intervals() -> Tuple[bool, str]:
    iv = lambda_intervals(1.0, 1.0, 0.25)
    ok = iv == [(0.5, 1.0), (0.25, 0.5)] and len(lambda_intervals(1.0, 1.0, 0.5)) == 1
    ok &= all(abs(hi / lo - 2) < 1e-12 for lo, hi in lambda_intervals(3.0, 0.7, 0.01))
    return ok, f"{iv}"


def check_determinism() -> Tuple[bool, str]:
    prob = finite_linear(40, 3, seed=6)
    spec = RobustSpec.cvar(0.2)
    est = lambda x, rng: minibatch_estimate(prob, x, spec, 5, rng)
    cfg = SgmConfig(0.05, 200, momentum=0.0, averaging="suffix:3", radius=1.0)
    runs = [run_sgm(prob, est, cfg, stream(3), evaluator=lambda x: full_batch_value(prob, x, spec)) for _ in range(2)]
    same = np.array_equal(runs[0][0], runs[1][0]) and \
        [(r.iteration, r.grad_evals, r.value) for r in runs[0][1]] == [(r.iteration, r.grad_evals, r.value) for r in runs[1][1]]
    return same, "identical iterates and traces" if same else "runs differ"


CHECKS: Dict[str, Callable[[], Tuple[bool, str]]] = {
    "grid_oracle_cvar": lambda: _grid_check(SPECS["cvar"], 21),
    "grid_oracle_kl_cvar": lambda: _grid_check(SPECS["kl_cvar"], 22),
    "grid_oracle_chi2_pen": lambda: _grid_check(SPECS["chi2_pen"], 23),
    "grid_oracle_chi2_con": lambda: _grid_check(SPECS["chi2_con"], 24),
    "primal_dual_gap": check_primal_dual,
    "weights_feasible": check_feasibility,
    "chi2_pen_prefix_matches_bisection": check_prefix_vs_bisection,
    "chi2_con_constraint_active": check_chi2_con_active,
    "translation_equivariance": check_translation,
    "lambda_derivative_fd": check_lambda_derivative,
    "bias_sign_bernoulli_cvar": check_bias_sign,
    "surrogate_monotone_in_n": check_surrogate_monotone,
    "mlmc_expected_cost": check_mlmc_cost,
    "mlmc_unbiased": check_mlmc_unbiased,
    "minibatch_grad_fd": check_minibatch_fd,
    "logistic_grad_fd": check_logistic_fd,
    "projection_feasible": check_projection,
    "duality_sandwich": check_duality_sandwich,
    "lambda_interval_geometry": check_intervals,
    "run_determinism": check_determinism,
}


def run_checks(names=None) -> List[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
