"""Coefficient freezing, Picard iteration, and continuation in lambda."""

import numpy as np
import pytest

from bspde import (
    ConvergenceError,
    FrozenScenario,
    SpectralBasis,
    build_chain,
    build_tree,
    continuation_solve,
    freeze_and_iterate,
    mixed_norm_sq,
    pair_difference,
    solve_frozen,
    solve_tree,
)
from helpers import make_scenario
from oracles import scalar_mode_exact, scalar_theta_chain

BASIS = SpectralBasis(1, 8, np.pi)


def pair_gap(x, y):
    return np.sqrt(mixed_norm_sq(pair_difference(x, y), p_order=0, q_order=0))


def cos_scenario(**kw):
    kw.setdefault("phi", lambda t, X: np.cos(X[:, 0]))
    kw.setdefault("T", 0.5)
    return make_scenario(**kw)


def varying_a(delta):
    return lambda t, X, d=delta: 0.5 * (1.0 + d * np.sin(X[:, 0]))


class TestSolveFrozen:
    def test_matches_scalar_recursion_per_mode(self):
        sc = cos_scenario()
        chain = build_chain(1, 16, sc.horizon)
        frozen = FrozenScenario.from_scenario(sc, np.zeros(1))
        sol = solve_frozen(frozen, chain, BASIS)
        ref = scalar_theta_chain(-0.5, 0.5, lambda s: 0.0, sc.horizon, 16, 1.0)
        got = sol.p0().coeffs[BASIS.modes[:, 0] == 1][0]
        assert got == pytest.approx(ref, abs=1e-14)

    def test_converges_to_mode_ode(self):
        sc = cos_scenario()
        exact = scalar_mode_exact(-0.5, 0.5, lambda s: 0.0, sc.horizon)
        errs = []
        for n in (16, 32, 64):
            chain = build_chain(1, n, sc.horizon)
            frozen = FrozenScenario.from_scenario(sc, np.zeros(1))
            sol = solve_frozen(frozen, chain, BASIS)
            got = sol.p0().coeffs[BASIS.modes[:, 0] == 1][0]
            errs.append(abs(got - exact))
        assert errs[0] / errs[1] > 1.8
        assert errs[1] / errs[2] > 1.8

    def test_equals_tree_solve_for_constant_coefficients(self):
        sc = cos_scenario()
        chain = build_chain(1, 12, sc.horizon)
        frozen = FrozenScenario.from_scenario(sc, np.zeros(1))
        assert pair_gap(solve_frozen(frozen, chain, BASIS), solve_tree(sc, chain, BASIS)) < 1e-13

    def test_freeze_point_selects_coefficient_value(self):
        # a(x) = 0.5(1 + 0.5 sin x) frozen at x0 = pi/2 is the constant 0.75
        sc_var = cos_scenario(a=varying_a(0.5), K=2.0, kappa=0.1)
        sc_const = cos_scenario(a=0.75, K=2.0, kappa=0.1)
        chain = build_chain(1, 12, sc_var.horizon)
        frozen = FrozenScenario.from_scenario(sc_var, np.array([np.pi / 2]))
        assert pair_gap(solve_frozen(frozen, chain, BASIS),
                        solve_tree(sc_const, chain, BASIS)) < 1e-12


class TestFreezeAndIterate:
    def test_constant_coefficients_converge_immediately(self):
        sc = cos_scenario()
        chain = build_chain(1, 12, sc.horizon)
        sol, report = freeze_and_iterate(sc, np.zeros(1), chain, BASIS)
        assert report.converged
        assert report.iterations == 1
        assert report.final_defect == 0.0
        assert pair_gap(sol, solve_tree(sc, chain, BASIS)) < 1e-13

    def test_contraction_ratio_scales_with_oscillation(self):
        chain = build_chain(1, 16, 0.5)
        first_ratios = []
        for delta in (0.02, 0.04, 0.08):
            sc = cos_scenario(a=varying_a(delta), K=2.0, kappa=0.2)
            sol, report = freeze_and_iterate(sc, np.zeros(1), chain, BASIS)
            assert report.converged
            first_ratios.append(report.contraction_ratios[0])
        assert first_ratios[0] < first_ratios[1] < first_ratios[2]
        assert first_ratios[1] / first_ratios[0] == pytest.approx(2.0, rel=0.05)
        assert first_ratios[2] / first_ratios[1] == pytest.approx(2.0, rel=0.05)

    def test_iterate_limit_matches_tree_solve(self):
        sc = cos_scenario(a=varying_a(0.2), K=2.0, kappa=0.2)
        chain = build_chain(1, 16, sc.horizon)
        sol, report = freeze_and_iterate(sc, np.zeros(1), chain, BASIS, tol=1e-11)
        assert report.converged
        assert pair_gap(sol, solve_tree(sc, chain, BASIS)) < 1e-9

    def test_bad_freeze_point_stalls(self):
        # freezing where a is smallest doubles the relative oscillation, so
        # the Picard map stops contracting
        sc = cos_scenario(a=varying_a(0.5), K=2.0, kappa=0.1)
        chain = build_chain(1, 16, sc.horizon)
        sol, report = freeze_and_iterate(sc, np.array([-np.pi / 2]), chain, BASIS,
                                         max_iter=12)
        assert not report.converged
        assert report.contraction_ratios[-1] > 0.8
        assert report.final_defect > 1e-6

    def test_non_convergence_is_reported_not_raised(self):
        sc = cos_scenario(a=varying_a(0.5), K=2.0, kappa=0.1)
        chain = build_chain(1, 8, sc.horizon)
        sol, report = freeze_and_iterate(sc, np.array([-np.pi / 2]), chain, BASIS,
                                         max_iter=3)
        assert report.iterations == 3
        assert not report.converged


class TestContinuation:
    def test_single_step_equals_direct_iteration(self):
        sc = cos_scenario(a=varying_a(0.2), K=2.0, kappa=0.2)
        chain = build_chain(1, 16, sc.horizon)
        via_continuation, _ = continuation_solve(sc, 1, chain, BASIS)
        direct, _ = freeze_and_iterate(sc, np.zeros(1), chain, BASIS)
        assert pair_gap(via_continuation, direct) == 0.0

    def test_rescues_large_oscillation(self):
        sc = cos_scenario(a=varying_a(0.5), K=2.0, kappa=0.1)
        chain = build_chain(1, 16, sc.horizon)
        sol, reports = continuation_solve(sc, 4, chain, BASIS)
        assert all(r.converged for r in reports)
        assert pair_gap(sol, solve_tree(sc, chain, BASIS)) < 1e-6

    def test_failure_names_homotopy_parameter(self):
        sc = cos_scenario(a=varying_a(0.5), K=2.0, kappa=0.1)
        chain = build_chain(1, 16, sc.horizon)
        with pytest.raises(ConvergenceError, match="lambda"):
            continuation_solve(sc, 1, chain, BASIS,
                               freeze_point=np.array([-np.pi / 2]), max_iter=6)

    def test_works_on_stochastic_tree(self):
        sc = make_scenario(
            a=varying_a(0.2), K=2.0, kappa=0.2, T=0.5,
            phi=lambda t, X, hist: np.cos(X[:, 0]) * (1.0 + 0.2 * hist.w[0]),
        )
        tree = build_tree(1, 4, 2, sc.horizon)
        sol, reports = continuation_solve(sc, 2, tree, BASIS, tol=1e-10)
        assert all(r.converged for r in reports)
        assert pair_gap(sol, solve_tree(sc, tree, BASIS)) < 1e-8
