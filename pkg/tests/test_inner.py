import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drobust.core import Kind, LossBatch, RobustSpec, chi2_divergence
from drobust.inner import (
    BisectionConfig,
    BisectionError,
    bisect_increasing,
    chi2_pen_eta_bisect,
    chi2_pen_eta_prefix,
    dual_value,
    lambda_derivative,
    primal_value,
    robust_grad_from_inner,
    solve,
    solve_chi2_con,
    solve_chi2_pen,
    solve_cvar,
    solve_kl_cvar,
)
from drobust.oracle import simplex_grid_max

losses = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=100).map(np.asarray)
SPECS = [RobustSpec.cvar(0.2), RobustSpec.kl_cvar(0.2, 0.3), RobustSpec.chi2_pen(0.4),
         RobustSpec.chi2_con(0.5)]


def dual_grid_min(values, spec, lo, hi, step=1e-5):
    etas = np.arange(lo, hi, step)
    return min(dual_value(values, e, spec) for e in etas)


class TestCvar:
    def test_examples(self):
        s = solve_cvar([3.0, 1.0, 2.0], 1 / 3)
        np.testing.assert_allclose(s.weights.q, [1, 0, 0], atol=1e-12)
        assert s.value == pytest.approx(3.0)
        s = solve_cvar([3.0, 1.0, 2.0], 1.0)
        np.testing.assert_allclose(s.weights.q, [1 / 3] * 3)
        assert s.value == pytest.approx(2.0)
        s = solve_cvar([3.0, 1.0, 2.0], 0.5)
        np.testing.assert_allclose(s.weights.q, [2 / 3, 0, 1 / 3])
        assert s.value == pytest.approx(8 / 3)

    def test_eta_is_var(self):
        assert solve_cvar([3.0, 1.0, 2.0], 0.5).eta == pytest.approx(2.0)

    def test_ties_lowest_index(self):
        s = solve_cvar([1.0, 2.0, 2.0, 0.0], 0.25)
        np.testing.assert_allclose(s.weights.q, [0, 1, 0, 0])


class TestKlCvar:
    def test_constant(self):
        s = solve_kl_cvar([0.0, 0.0], 0.3, 1.0)
        assert s.value == 0.0
        np.testing.assert_allclose(s.weights.q, [0.5, 0.5])

    def test_two_point_against_dual_grid(self):
        spec = RobustSpec.kl_cvar(0.5, 1.0)
        expected = dual_grid_min(np.array([1.0, 0.0]), spec, -1.0, 1.5, 1e-5)
        s = solve_kl_cvar([1.0, 0.0], 0.5, 1.0)
        assert s.value == pytest.approx(expected, abs=1e-8)
        assert s.value == pytest.approx(math.log((math.e + 1) / 2), abs=1e-6)

    def test_large_lambda_tends_to_mean(self):
        assert solve_kl_cvar([1.0, 0.0], 0.5, 1e6).value == pytest.approx(0.5, abs=1e-5)

    def test_softmax_closed_form_when_alpha_n_le_1(self):
        v = np.array([0.3, 0.9, 0.1, 0.5])
        lam = 0.2
        expected = lam * math.log(np.mean(np.exp(v / lam)))
        assert solve_kl_cvar(v, 0.25, lam).value == pytest.approx(expected, abs=1e-9)

    def test_bisection_failure_carries_bracket(self):
        with pytest.raises(BisectionError) as err:
            bisect_increasing(lambda e: e, -1.0, 1.0, tol=1e-30, max_iters=3)
        assert len(err.value.bracket) == 2


class TestChi2Pen:
    def test_examples(self):
        s = solve_chi2_pen([1.0, 0.0], 1.0)
        assert s.eta == pytest.approx(-0.5)
        np.testing.assert_allclose(s.weights.q, [0.75, 0.25])
        assert s.value == pytest.approx(0.625)
        s = solve_chi2_pen([1.0, 0.0], 0.25)
        assert s.eta == pytest.approx(0.5)
        np.testing.assert_allclose(s.weights.q, [1.0, 0.0], atol=1e-12)
        assert s.value == pytest.approx(0.875)

    def test_constant(self):
        s = solve_chi2_pen([0.4] * 5, 0.1)
        assert s.value == pytest.approx(0.4)
        np.testing.assert_allclose(s.weights.q, 0.2)

    def test_grid_oracle(self):
        assert solve_chi2_pen([1.0, 0.0], 0.25).value == pytest.approx(
            simplex_grid_max([1.0, 0.0], RobustSpec.chi2_pen(0.25), 1e-3), abs=2e-3)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            solve_chi2_pen([1.0, 0.0], 0.0)

    @settings(max_examples=200)
    @given(losses, st.floats(0.01, 2.0))
    def test_prefix_matches_bisection(self, v, lam):
        p = np.full(v.size, 1.0 / v.size)
        if v.max() == v.min():
            return
        assert chi2_pen_eta_prefix(v, lam, p) == pytest.approx(chi2_pen_eta_bisect(v, lam, p), abs=1e-8)
        cross = solve_chi2_pen(v, lam, cross_check=True)
        assert cross.value == pytest.approx(solve_chi2_pen(v, lam).value, abs=1e-12)


class TestChi2Con:
    def test_examples(self):
        s = solve_chi2_con([1.0, 0.0], 0.5)
        np.testing.assert_allclose(s.weights.q, [1, 0], atol=1e-12)
        assert s.value == pytest.approx(1.0)
        s = solve_chi2_con([1.0, 0.0], 0.125)
        np.testing.assert_allclose(s.weights.q, [0.75, 0.25], atol=1e-9)
        assert s.value == pytest.approx(0.75, abs=1e-9)

    def test_zero_radius_is_mean(self):
        s = solve_chi2_con([0.2, 0.9, 0.4], 0.0)
        assert s.value == pytest.approx(0.5)
        np.testing.assert_allclose(s.weights.q, 1 / 3)

    def test_slack_constraint_point_mass(self):
        s = solve_chi2_con([0.2, 0.9, 0.4], 1.0)  # (n-1)/2 = 1
        np.testing.assert_allclose(s.weights.q, [0, 1, 0], atol=1e-12)


class TestGradients:
    def test_single_sample(self):
        b = LossBatch([0.3], grads=[[1.0, 2.0]])
        s = solve(b, RobustSpec.chi2_con(1.0))
        np.testing.assert_allclose(robust_grad_from_inner(b, s), [1.0, 2.0])

    def test_uniform_weights_erm(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = LossBatch([0.5, 0.5, 0.5], grads=g)
        np.testing.assert_allclose(robust_grad_from_inner(b, solve(b, RobustSpec.cvar(0.1))), g.mean(axis=0))

    def test_cvar_max_loss_gradient(self):
        g = np.array([[1.0], [2.0], [3.0]])
        b = LossBatch([0.1, 0.7, 0.7], grads=g)
        np.testing.assert_allclose(robust_grad_from_inner(b, solve(b, RobustSpec.cvar(1 / 3))), [2.0])

    def test_missing_grads(self):
        b = LossBatch([0.1, 0.2])
        with pytest.raises(ValueError):
            robust_grad_from_inner(b, solve(b, RobustSpec.cvar(0.5)))

    def test_norm_bound(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(30, 4))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        b = LossBatch(rng.random(30), grads=g)
        for spec in SPECS:
            assert np.linalg.norm(robust_grad_from_inner(b, solve(b, spec))) <= 1 + 1e-12


class TestLambdaDerivative:
    def test_examples(self):
        assert lambda_derivative([0.3, 0.3], 0.5) == 0.0
        assert lambda_derivative([1.0, 0.0], 1.0) == pytest.approx(-0.125)
        assert lambda_derivative([1.0, 0.0], 0.25) == pytest.approx(-0.5)


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(losses, st.sampled_from(SPECS))
    def test_primal_dual_consistency(self, v, spec):
        s = solve(v, spec)
        assert primal_value(v, s.weights, spec) == pytest.approx(s.value, abs=1e-7)
        assert dual_value(v, s.eta, spec) == pytest.approx(s.value, abs=1e-7)

    @settings(max_examples=150, deadline=None)
    @given(losses, st.sampled_from(SPECS))
    def test_dominance_and_chi2_bounded(self, v, spec):
        s = solve(v, spec)
        assert s.value <= v.max() + 1e-9
        if spec.kind in (Kind.CVAR, Kind.CHI2_CON):
            assert s.value >= v.mean() - 1e-9
        bound = {Kind.CVAR: 1 / 0.2 - 1, Kind.KL_CVAR: 1 / 0.2 - 1,
                 Kind.CHI2_PEN: 1.0 / spec.lam if spec.lam else 0, Kind.CHI2_CON: 0.5}[spec.kind]
        assert chi2_divergence(s.weights) <= bound + 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40).map(np.asarray))
    def test_monotone_in_parameters(self, v):
        rhos = [0.0, 0.1, 0.5, 2.0]
        vals = [solve_chi2_con(v, r).value for r in rhos]
        assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
        lams = [0.05, 0.2, 1.0, 5.0]
        for f in (lambda l: solve_chi2_pen(v, l).value, lambda l: solve_kl_cvar(v, 0.3, l).value):
            vals = [f(l) for l in lams]
            assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
        alphas = [0.05, 0.2, 0.5, 1.0]
        vals = [solve_cvar(v, a).value for a in alphas]
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))

    def test_weighted_reference_matches_replication(self):
        # atom probabilities (1/4, 3/4) behave like a uniform batch with the second atom tripled
        v = np.array([0.9, 0.2])
        rep = np.array([0.9, 0.2, 0.2, 0.2])
        for spec in SPECS:
            assert solve(v, spec, p=[0.25, 0.75]).value == pytest.approx(solve(rep, spec).value, abs=1e-9)

    def test_bisection_config_validation(self):
        with pytest.raises(ValueError):
            BisectionConfig(tol_eta=0.0)
        assert BisectionConfig().tol_for(1.0) == 1e-10
        assert BisectionConfig().tol_for(0.0) == 1e-12
