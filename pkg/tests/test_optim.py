import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drobust.core import EstimatorOutput, RobustSpec
from drobust.estimators import make_estimator, stream
from drobust.optim import (
    DivergenceError,
    RunTrace,
    SgmConfig,
    SuffixAverager,
    TraceRecord,
    make_evaluator,
    nesterov_theta,
    project_ball,
    run_dual_sgm,
    run_nesterov,
    run_sgm,
    suffix_average,
    theoretical_step_size,
)
from drobust.problems import cvar_lecam_pair, finite_linear, single_atom


def quadratic(x, rng):
    # f(x) = x^2 summed over coordinates
    return EstimatorOutput(2.0 * x, float(x @ x), 1)


def zero_grad(x, rng):
    return EstimatorOutput(np.zeros_like(x), 0.0, 1)


class TestProjection:
    def test_examples(self):
        np.testing.assert_allclose(project_ball([3.0, 4.0], 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(project_ball([0.0, 0.0], 1.0), [0.0, 0.0])
        np.testing.assert_array_equal(project_ball([5.0], None), [5.0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(0.01, 100))
    def test_feasible_and_idempotent(self, xs, R):
        y = project_ball(xs, R)
        assert np.linalg.norm(y) <= R * (1 + 1e-12)
        np.testing.assert_allclose(project_ball(y, R), y)


class TestSchedules:
    def test_theta(self):
        assert [nesterov_theta(t) for t in (1, 2, 3)] == pytest.approx([1.0, 2 / 3, 0.5])

    def test_step_sizes(self):
        assert theoretical_step_size("SGM", R=1.0, T=100, Gamma=1.0) == pytest.approx(0.1)
        assert theoretical_step_size("AGM", R=1.0, T=100, sigma=1.0) == pytest.approx(1e-3)
        assert theoretical_step_size("AGM", R=1.0, T=4, sigma=1.0, Lambda=10.0) == pytest.approx(0.1)
        with pytest.raises(ValueError):
            theoretical_step_size("SGM", R=1.0, T=10)

    def test_suffix_average(self):
        assert suffix_average([float(i) for i in range(1, 10)], 3) == pytest.approx(8.0)
        assert suffix_average([1.0, 2.0, 3.0, 4.0], 1) == pytest.approx(2.5)
        assert SuffixAverager(10, 3).start == 7

    @given(st.integers(1, 50), st.integers(1, 10), st.floats(-5, 5))
    def test_suffix_constant(self, T, k, c):
        assert suffix_average([c] * T, k) == pytest.approx(c)

    def test_config_validation(self):
        for bad in (dict(step_size=0.0, iterations=1), dict(step_size=1.0, iterations=0),
                    dict(step_size=1.0, iterations=1, momentum=1.0),
                    dict(step_size=1.0, iterations=1, momentum="heavy"),
                    dict(step_size=1.0, iterations=1, averaging="tail"),
                    dict(step_size=1.0, iterations=1, radius=-1.0)):
            with pytest.raises(ValueError):
                SgmConfig(**bad)


class TestRunners:
    def test_zero_gradient_fixed_point(self):
        prob = single_atom(0.0, [0.0, 0.0], radius=2.0)
        x0 = np.array([0.5, -0.5])
        for mom in (0.0, 0.9, "nesterov"):
            cfg = SgmConfig(0.1, 20, momentum=mom)
            runner = run_sgm if mom == 0.0 else run_nesterov
            x, _ = runner(prob, zero_grad, cfg, stream(0), x0=x0)
            np.testing.assert_allclose(x, x0)

    def test_quadratic_converges(self):
        prob = single_atom(0.0, [0.0], radius=10.0)
        x, _ = run_sgm(prob, quadratic, SgmConfig(0.25, 50), stream(0), x0=np.array([3.0]))
        assert abs(x[0]) <= 1e-6

    def test_nesterov_quadratic(self):
        prob = single_atom(0.0, [0.0], radius=10.0)
        x, _ = run_nesterov(prob, quadratic, SgmConfig(0.1, 200, momentum="nesterov"), stream(0),
                            x0=np.array([3.0]))
        assert abs(x[0]) < 0.05
        x, _ = run_nesterov(prob, quadratic, SgmConfig(0.05, 300, momentum=0.9), stream(0), x0=np.array([3.0]))
        assert abs(x[0]) < 1e-3

    def test_divergence_raises(self):
        prob = single_atom(0.0, [0.0])

        def bad(x, rng):
            return EstimatorOutput(np.array([np.nan]), 0.0, 1)

        with pytest.raises(DivergenceError) as info:
            run_sgm(prob, bad, SgmConfig(0.1, 10), stream(0), x0=np.array([1.0]))
        assert info.value.iteration == 1

    def test_iterates_stay_feasible(self):
        prob = finite_linear(50, 3, radius=0.5, seed=4)
        spec = RobustSpec.cvar(0.2)
        est = make_estimator(prob, spec, "minibatch", n=5)
        seen = []

        def evaluator(x):
            seen.append(np.linalg.norm(x))
            return 0.0

        for mom in (0.0, 0.9, "nesterov"):
            runner = run_sgm if mom == 0.0 else run_nesterov
            runner(prob, est, SgmConfig(5.0, 200, momentum=mom), stream(1), evaluator=evaluator, eval_every=1)
        assert max(seen) <= 0.5 + 1e-12

    def test_determinism(self):
        prob = finite_linear(50, 3, seed=4)
        spec = RobustSpec.chi2_pen(0.5)
        est = make_estimator(prob, spec, "mlmc", n=16, n0=2)
        ev = make_evaluator(prob, spec)
        a = run_sgm(prob, est, SgmConfig(0.1, 100, averaging="full"), stream(3), evaluator=ev)
        b = run_sgm(prob, est, SgmConfig(0.1, 100, averaging="full"), stream(3), evaluator=ev)
        np.testing.assert_array_equal(a[0], b[0])
        assert [r.value for r in a[1]] == [r.value for r in b[1]]

    def test_trace_monotone_evals(self):
        prob = finite_linear(50, 3, seed=4)
        spec = RobustSpec.cvar(0.2)
        est = make_estimator(prob, spec, "mlmc", n=16, n0=2)
        _, trace = run_sgm(prob, est, SgmConfig(0.1, 400), stream(3), evaluator=make_evaluator(prob, spec))
        evals = [r.grad_evals for r in trace]
        assert evals == sorted(evals) and trace.final.iteration == 400
        with pytest.raises(ValueError):
            trace.add(TraceRecord(401, 0, 0.0, 0.1, 0.0))

    def test_lecam_instance(self):
        pos, _ = cvar_lecam_pair(1.0, 1.0, 0.1, 0.05)
        spec = RobustSpec.cvar(0.1)
        est = make_estimator(pos, spec, "minibatch", n=10)
        ev = make_evaluator(pos, spec)
        x, _ = run_sgm(pos, est, SgmConfig(0.01, 10_000, averaging="full"), stream(0), x0=np.array([1.0]))
        opt = min(ev(np.array([v])) for v in np.linspace(-1, 1, 2001))
        assert ev(x) - opt < 0.05

    @pytest.mark.parametrize("spec", [RobustSpec.cvar(0.2), RobustSpec.chi2_pen(0.5)])
    def test_dual_sgm_descends(self, spec):
        prob = finite_linear(50, 3, seed=4)
        ev = make_evaluator(prob, spec)
        x0 = np.array([0.5, 0.5, 0.5])
        x, eta, _ = run_dual_sgm(prob, spec, SgmConfig(0.05, 5000, averaging="full"), stream(0), x0=x0)
        assert ev(x) < ev(x0)
        lo = 0.0 if spec.lam is None else -spec.lam
        assert lo <= eta <= prob.bound_B


def test_csv_format(tmp_path):
    trace = RunTrace()
    trace.add(TraceRecord(1, 10, 0.5, 0.1, 3.25))
    trace.add(TraceRecord(2, 20, 0.25, 0.1, 4.5))
    path = tmp_path / "t.csv"
    trace.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iter", "grad_evals", "value", "step_size", "wall_ms"]
    assert rows[1] == ["1", "10", "0.5", "0.1", ""]
    trace.write_csv(path, timing=True)
    assert list(csv.reader(open(path)))[2][4] == "4.500"
