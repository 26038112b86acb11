"""Energy audits, the discrete Ito identity, positivity, mollification,
and derived higher-regularity systems."""

import numpy as np
import pytest

from bspde import (
    ESTIMATE_TAGS,
    DegenerateKernelError,
    MollifierConfig,
    MultiIndex,
    SchemeConfig,
    SpectralBasis,
    StructuralError,
    backward_solve,
    build_chain,
    build_tree,
    default_modulus,
    energy_audit,
    higher_regularity_solve,
    ito_identity_check,
    mollify,
    positivity_check,
    project,
    solve_tree,
    validate,
)
from helpers import make_scenario

BASIS = SpectralBasis(1, 6, np.pi)
TREE = build_tree(1, 4, 2, 0.5)


def cos_scenario(**kw):
    kw.setdefault("phi", lambda t, X: np.cos(X[:, 0]))
    kw.setdefault("T", 0.5)
    return make_scenario(**kw)


class TestEnergyAudit:
    def test_zero_data_passes_with_zero_constant(self):
        sc = make_scenario(phi=0.0, F=0.0, T=0.5)
        rep = energy_audit(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        assert rep.lhs == 0.0 and rep.rhs_data == 0.0
        assert rep.fitted_C == 0.0
        assert rep.passed

    def test_tag_registry(self):
        assert ESTIMATE_TAGS == ("weak_est_2_5", "strong_est_2_7",
                                 "higher_est_2_9", "negpart_5_2")
        sc = cos_scenario()
        sol = solve_tree(sc, TREE, BASIS)
        with pytest.raises(StructuralError, match="bogus"):
            energy_audit(sol, sc, TREE, BASIS, theorem_tag="bogus")

    def test_heat_weak_estimate_values(self):
        sc = cos_scenario()
        rep = energy_audit(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        # data side is the L2 norm squared of the terminal cosine
        assert rep.rhs_data == pytest.approx(0.5, abs=1e-12)
        assert rep.fitted_C == pytest.approx(rep.lhs / rep.rhs_data, rel=1e-12)
        assert rep.passed
        assert rep.e_sup_sq >= rep.sup_e_sq - 1e-14

    def test_order_ladder_scales_data_norms(self):
        # cosine: each extra Sobolev order doubles the squared data norm
        sc = cos_scenario()
        sol = solve_tree(sc, TREE, BASIS)
        weak = energy_audit(sol, sc, TREE, BASIS, theorem_tag="weak_est_2_5")
        strong = energy_audit(sol, sc, TREE, BASIS, theorem_tag="strong_est_2_7")
        higher = energy_audit(sol, sc, TREE, BASIS, theorem_tag="higher_est_2_9", order=1)
        assert strong.rhs_data == pytest.approx(2 * weak.rhs_data, rel=1e-12)
        assert higher.rhs_data == pytest.approx(4 * weak.rhs_data, rel=1e-12)
        # constant-coefficient heat keeps a single mode, so the fitted
        # constants of all three estimates coincide
        assert strong.fitted_C == pytest.approx(weak.fitted_C, rel=1e-12)
        assert higher.fitted_C == pytest.approx(weak.fitted_C, rel=1e-12)

    def test_ceiling_enforced(self):
        sc = cos_scenario()
        rep = energy_audit(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS, ceiling=0.5)
        assert not rep.passed
        assert rep.ceiling == 0.5

    def test_sign_flip_invariance(self):
        sc_plus = cos_scenario(c=-2.0, K=4.0)
        sc_minus = make_scenario(phi=lambda t, X: -np.cos(X[:, 0]), c=-2.0, K=4.0, T=0.5)
        r_plus = energy_audit(solve_tree(sc_plus, TREE, BASIS), sc_plus, TREE, BASIS)
        r_minus = energy_audit(solve_tree(sc_minus, TREE, BASIS), sc_minus, TREE, BASIS)
        assert r_plus.lhs == r_minus.lhs
        assert r_plus.fitted_C == r_minus.fitted_C

    def test_fitted_constant_refinement_stable(self):
        sc = cos_scenario()
        cs = []
        for n in (8, 16, 32):
            chain = build_chain(1, n, sc.horizon)
            rep = energy_audit(solve_tree(sc, chain, BASIS), sc, chain, BASIS)
            cs.append(rep.fitted_C)
        assert abs(cs[1] - cs[2]) / cs[2] < 0.1
        assert abs(cs[0] - cs[2]) / cs[2] < 0.2

    def test_adapted_data_feeds_martingale_part(self):
        # terminal cos(x)(1 + 0.2 W_T): the expected squared data norm is
        # 0.5 (1 + 0.04 T) because the tree matches the Wiener variance
        sc = make_scenario(
            phi=lambda t, X, hist: np.cos(X[:, 0]) * (1.0 + 0.2 * hist.w[0]), T=0.5,
        )
        sol = solve_tree(sc, TREE, BASIS)
        rep = energy_audit(sol, sc, TREE, BASIS)
        assert rep.rhs_data == pytest.approx(0.5 * 1.02, rel=1e-12)
        assert sol.q.time_norm_sq(0) > 1e-6
        assert rep.passed and np.isfinite(rep.fitted_C)


class TestItoIdentity:
    def test_zero_generator_is_exact(self):
        # identically zero operators are outside the validated scenario class;
        # the override lets the identity be checked in the exactly-solvable case
        tree = build_tree(1, 4, 2, 0.5)
        ghat = project(np.sin(BASIS.grid_points[:, 0]), BASIS).coeffs
        n = BASIS.n_modes
        zops = lambda level, node, hist: (np.zeros(n), [np.zeros(n)])
        sol = backward_solve(
            tree, BASIS, SchemeConfig(theta=1.0),
            lambda leaf, hist: ghat * hist.w[0],
            zops,
            lambda level, node, hist: np.zeros(n),
        )
        sc = cos_scenario()  # ignored when operators are supplied
        defects = ito_identity_check(sol, sc, tree, BASIS, operators=zops)
        assert np.max(np.abs(defects)) < 1e-12

    def test_martingale_energy_grows_linearly(self):
        tree = build_tree(1, 4, 2, 0.5)
        ghat = project(np.sin(BASIS.grid_points[:, 0]), BASIS).coeffs
        n = BASIS.n_modes
        zops = lambda level, node, hist: (np.zeros(n), [np.zeros(n)])
        sol = backward_solve(
            tree, BASIS, SchemeConfig(theta=1.0),
            lambda leaf, hist: ghat * hist.w[0],
            zops,
            lambda level, node, hist: np.zeros(n),
        )
        g_sq = BASIS.norm_sq(ghat, order=0)
        for level in range(tree.n_steps + 1):
            t = tree.time_of(level)
            assert sol.p.level_expected_norm_sq(level, 0) == pytest.approx(
                g_sq * t, abs=1e-12)

    def test_defect_first_order_in_dt(self):
        sc = cos_scenario()
        defects = []
        for n in (16, 32, 64):
            chain = build_chain(1, n, sc.horizon)
            sol = solve_tree(sc, chain, BASIS, SchemeConfig(theta=0.5))
            d = ito_identity_check(sol, sc, chain, BASIS, scheme=SchemeConfig(theta=0.5))
            defects.append(np.max(np.abs(d)))
        assert defects[0] / defects[1] > 1.8
        assert defects[1] / defects[2] > 1.8

    def test_reports_per_level(self):
        sc = cos_scenario()
        sol = solve_tree(sc, TREE, BASIS)
        d = ito_identity_check(sol, sc, TREE, BASIS)
        assert d.shape == (TREE.n_steps + 1,)


class TestPositivity:
    def test_nonnegative_data_nonnegative_solution(self):
        sc = make_scenario(phi=lambda t, X: 1.5 + np.cos(X[:, 0]), T=0.5)
        rep = positivity_check(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        assert rep.min_value > -1e-8
        assert rep.negpart_l2_per_level.max() < 1e-12
        assert rep.envelope.passed
        assert rep.envelope.theorem_tag == "negpart_5_2"

    def test_constant_negative_terminal(self):
        # heat flow preserves constants: p = -1 at every level, and the
        # squared negative part integrates to the torus volume
        sc = make_scenario(phi=-1.0, T=0.5)
        rep = positivity_check(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        assert rep.min_value == pytest.approx(-1.0, abs=1e-10)
        assert np.allclose(rep.negpart_l2_per_level, 2 * np.pi, atol=1e-8)
        assert rep.fitted_C == 0.0
        assert rep.envelope.passed

    def test_growth_scenario_fits_positive_rate(self):
        sc = make_scenario(phi=lambda t, X: np.cos(X[:, 0]) - 0.2, c=-2.0, K=4.0, T=0.5)
        rep = positivity_check(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        assert rep.envelope.passed
        assert rep.fitted_C > 1.0

    def test_manufactured_violation_flagged(self):
        # audit a genuinely negative solution against nonnegative data: the
        # domination inequality cannot hold at any rate
        sc_neg = make_scenario(phi=-1.0, T=0.5)
        sc_pos = make_scenario(phi=1.0, T=0.5)
        sol = solve_tree(sc_neg, TREE, BASIS)
        rep = positivity_check(sol, sc_pos, TREE, BASIS)
        assert not rep.envelope.passed

    def test_zero_data_requires_zero_solution(self):
        sc = make_scenario(phi=0.0, F=0.0, T=0.5)
        rep = positivity_check(solve_tree(sc, TREE, BASIS), sc, TREE, BASIS)
        assert rep.envelope.passed
        assert rep.negpart_l2_per_level.max() <= 1e-12


class TestMollify:
    def varying(self):
        return make_scenario(a=lambda t, X: 0.5 + 0.2 * np.sin(X[:, 0]), K=2.0,
                             kappa=0.2, phi=lambda t, X: np.cos(X[:, 0]), T=0.5)

    def test_constants_are_fixed_points(self):
        big = SpectralBasis(1, 64, np.pi)
        sc = make_scenario()
        out = mollify(sc, MollifierConfig(8), big)
        x = big.grid_points
        assert np.abs(out.a.evaluate(0.0, x)[:, 0, 0] - 0.5).max() < 1e-12
        assert np.abs(out.sigma.evaluate(0.0, x)).max() < 1e-12

    def test_defect_bounded_by_modulus_and_monotone(self):
        # |a(x) - a(y)| <= 0.2 |x - y|, so smoothing at scale 1/n moves a by
        # at most 0.2/n; the observed defect also shrinks monotonically
        big = SpectralBasis(1, 64, np.pi)
        sc = self.varying()
        x = big.grid_points
        a_exact = 0.5 + 0.2 * np.sin(x[:, 0])
        defects = []
        for n in (4, 8, 16):
            out = mollify(sc, MollifierConfig(n), big)
            a_n = out.a.evaluate(0.0, x)[:, 0, 0]
            defect = np.abs(a_n - a_exact).max()
            assert defect <= 0.2 / n
            defects.append(defect)
        assert defects[0] > defects[1] > defects[2]

    def test_smoothed_scenario_passes_relaxed_audit(self):
        big = SpectralBasis(1, 64, np.pi)
        out = mollify(self.varying(), MollifierConfig(8), big)
        relaxed = out.with_fields(bound_K=4.0, ellipticity_kappa=0.1)
        rep = validate(relaxed, default_modulus(4.0))
        assert rep.all_ok

    def test_degenerate_kernel_rejected(self):
        small = SpectralBasis(1, 4, np.pi)
        with pytest.raises(DegenerateKernelError, match="grid spacing"):
            mollify(self.varying(), MollifierConfig(16), small)

    def test_other_fields_untouched(self):
        big = SpectralBasis(1, 64, np.pi)
        sc = self.varying()
        out = mollify(sc, MollifierConfig(8), big)
        x = big.grid_points
        assert np.allclose(out.phi.evaluate(0.0, x), sc.phi.evaluate(0.0, x), atol=1e-14)
        assert out.bound_K == sc.bound_K


class TestHigherRegularity:
    def test_constant_coefficients_commute_with_derivative(self):
        sc = cos_scenario()
        chain = build_chain(1, 16, sc.horizon)
        basis = SpectralBasis(1, 8, np.pi)
        _, defect = higher_regularity_solve(sc, chain, basis, MultiIndex((1,)))
        assert defect < 1e-10

    def test_order_cap_and_form_guard(self):
        sc = cos_scenario()
        chain = build_chain(1, 8, sc.horizon)
        basis = SpectralBasis(1, 6, np.pi)
        with pytest.raises(StructuralError, match="order"):
            higher_regularity_solve(sc, chain, basis, MultiIndex((3,)))
        div = cos_scenario(form="divergence")
        with pytest.raises(StructuralError, match="divergence"):
            higher_regularity_solve(div, chain, basis, MultiIndex((1,)))

    def test_variable_coefficient_defect_shrinks_under_refinement(self):
        av = lambda t, X: np.exp(0.3 * np.sin(X[:, 0]))
        defects = []
        for modes, steps in ((8, 16), (16, 32)):
            basis = SpectralBasis(1, modes, np.pi)
            chain = build_chain(1, steps, 0.5)
            sc = make_scenario(a=av, K=4.0, kappa=0.2,
                               phi=lambda t, X: np.cos(X[:, 0]), T=0.5)
            _, defect = higher_regularity_solve(sc, chain, basis, MultiIndex((1,)))
            defects.append(defect)
        assert defects[1] < defects[0]
        assert defects[0] < 1e-8

    def test_second_order_derived_system(self):
        sc = cos_scenario()
        chain = build_chain(1, 16, sc.horizon)
        basis = SpectralBasis(1, 8, np.pi)
        derived, defect = higher_regularity_solve(sc, chain, basis, MultiIndex((2,)))
        assert defect < 1e-10
        # second derivative of the cosine solution flips its sign
        base = solve_tree(sc, chain, basis)
        assert np.allclose(derived.p0().coeffs, -base.p0().coeffs, atol=1e-10)

    def test_two_dimensional_partial(self):
        sc = make_scenario(
            d=2, T=0.25, a=0.5, K=2.0, kappa=0.25,
            phi=lambda t, X: np.cos(X[:, 0]) * np.cos(X[:, 1]),
        )
        chain = build_chain(1, 8, sc.horizon)
        basis = SpectralBasis(2, 3, np.pi)
        _, defect = higher_regularity_solve(sc, chain, basis, MultiIndex((1, 0)))
        assert defect < 1e-10

    def test_multi_index_bookkeeping(self):
        assert MultiIndex((2,)).order == 2
        assert MultiIndex((1, 1)).order == 2
        subs = dict(MultiIndex((2,)).sub_indices())
        assert subs == {(0,): 1, (1,): 2, (2,): 1}
