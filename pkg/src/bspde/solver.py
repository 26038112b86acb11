"""Backward solvers on the discrete Wiener filtration.

The core recursion computes, per node and going backward in time,

    q^k  = E[ p_next dW^k | node ] / dt                  (martingale coefficient)
    p    = E[p_next|node] + dt ( theta L p + (1-theta) L E[p_next|node]
                                 + sum_k M^k q^k + F_hat )

so the implicit step solves (I - theta dt L) p = rhs.  q is computed first,
from the children of p, which is the standard well-posed explicit treatment of
the noise coupling; the ``fixed_point`` option re-solves the node with the
recomputed coefficient until the update stalls (for this linear equation the
martingale coefficient does not depend on the node's own p, so the loop
settles after a single confirmation pass -- it exists as scaffolding for
generators where it would not).

The same engine runs full operator matrices (variable coefficients) and
diagonal per-mode symbols (x-independent coefficients), which keeps the tree
solver, the frozen-coefficient solver, and the derived-equation solves on one
code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConvergenceError, NumericError, StructuralError
from .scenario import Scenario
from .space import SpatialField, SpectralBasis, assemble_L, assemble_M
from .wiener import PathEnsemble, WienerTree

Array = np.ndarray


@dataclass(frozen=True)
class SchemeConfig:
    """Time-stepping knobs: theta weighting and the noise-coupling mode."""

    theta: float = 1.0
    m_coupling: str = "explicit"
    fp_tol: float = 1e-10
    fp_max_iter: int = 25

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise StructuralError("theta must lie in [0, 1]")
        if self.m_coupling not in ("explicit", "fixed_point"):
            raise StructuralError("m_coupling must be 'explicit' or 'fixed_point'")


@dataclass
class AdaptedField:
    """A field attached to every node of the tree: one coefficient row per node.

    ``levels[k]`` has shape (n_nodes_k, n_modes) for scalar fields and
    (n_nodes_k, dim_w, n_modes) for noise coefficients.
    """

    tree: WienerTree
    basis: SpectralBasis
    levels: list[Array]

    def field_at(self, level: int, node: int) -> SpatialField:
        row = self.levels[level][node]
        if row.ndim != 1:
            raise StructuralError("field_at applies to scalar adapted fields")
        return SpatialField(self.basis, row)

    def _row_norm_sq(self, row: Array, order) -> float:
        if row.ndim == 1:
            return float(self.basis.norm_sq(row, order))
        return float(sum(self.basis.norm_sq(comp, order) for comp in row))

    def level_expected_norm_sq(self, level: int, order=0) -> float:
        """E ||field(t_level)||_order^2 over the tree measure."""
        prob = self.tree.levels[level].prob
        arr = self.levels[level]
        return float(sum(p * self._row_norm_sq(row, order)
                         for p, row in zip(prob, arr)))

    def time_norm_sq(self, order=0) -> float:
        """Left-rule discrete E int_0^T ||.||_order^2 dt over levels 0..N-1."""
        n = min(len(self.levels), self.tree.n_steps)
        return float(self.tree.dt * sum(
            self.level_expected_norm_sq(k, order) for k in range(n)))

    def e_sup_norm_sq(self, order=0) -> float:
        """E sup_t ||.||_order^2: pathwise running max, averaged over leaves."""
        run = np.array([self._row_norm_sq(r, order) for r in self.levels[0]])
        for k in range(1, len(self.levels)):
            lev = self.tree.levels[k]
            here = np.array([self._row_norm_sq(r, order) for r in self.levels[k]])
            run = np.maximum(run[lev.parents], here)
        prob = self.tree.levels[len(self.levels) - 1].prob
        return float(np.sum(prob * run))

    def sup_e_norm_sq(self, order=0) -> float:
        return max(self.level_expected_norm_sq(k, order)
                   for k in range(len(self.levels)))


@dataclass
class SolutionPair:
    """Solution field p (levels 0..N) and noise coefficient q (levels 0..N-1)."""

    p: AdaptedField
    q: AdaptedField

    @property
    def tree(self) -> WienerTree:
        return self.p.tree

    @property
    def basis(self) -> SpectralBasis:
        return self.p.basis

    def p0(self) -> SpatialField:
        return self.p.field_at(0, 0)


def mixed_norm_sq(pair: SolutionPair, p_order=2, q_order=1) -> float:
    """Squared mixed norm |||p|||_{p_order}^2 + |||q|||_{q_order}^2."""
    return pair.p.time_norm_sq(p_order) + pair.q.time_norm_sq(q_order)


def pair_difference(x: SolutionPair, y: SolutionPair) -> SolutionPair:
    p = AdaptedField(x.tree, x.basis, [u - v for u, v in zip(x.p.levels, y.p.levels)])
    q = AdaptedField(x.tree, x.basis, [u - v for u, v in zip(x.q.levels, y.q.levels)])
    return SolutionPair(p, q)


# -- the backward engine ------------------------------------------------------

def _apply_op(op, vec):
    """Matrix-vector product; 1-d operators are diagonal symbols."""
    return op * vec if op.ndim == 1 else op @ vec


def _node_solve(L, Ms, Ep, qn, fhat, dt, theta, level, node):
    """One implicit node step; L/Ms are full matrices or diagonal symbols."""
    rhs = Ep + dt * fhat
    if theta < 1.0:
        rhs = rhs + dt * (1.0 - theta) * _apply_op(L, Ep)
    for k, Mk in enumerate(Ms):
        rhs = rhs + dt * _apply_op(Mk, qn[k])
    if L.ndim == 1:
        den = 1.0 - theta * dt * L
        if np.any(np.abs(den) < 1e-14):
            raise NumericError(
                f"singular implicit step at level {level}, node {node} (diagonal)")
        return rhs / den
    A = np.eye(len(L)) - theta * dt * L
    try:
        out = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"singular implicit step at level {level}, node {node}: {exc}") from exc
    # a dissipative implicit step never amplifies like this; a near-zero
    # pivot that LAPACK lets through does
    amp = np.max(np.abs(out)) / (np.max(np.abs(rhs)) + 1e-300)
    if not np.all(np.isfinite(out)) or amp > 1e12:
        raise NumericError(
            f"singular implicit step at level {level}, node {node} "
            f"(amplification {amp:.1e})")
    return out


def backward_solve(tree: WienerTree, basis: SpectralBasis, scheme: SchemeConfig,
                   terminal_fn, ops_fn, source_fn) -> SolutionPair:
    """Run the backward recursion with pluggable terminal/operator/source providers.

    terminal_fn(leaf_index, history) -> spectral vector
    ops_fn(level, node, history)     -> (L, [M_k]) matrices or diagonal symbols
    source_fn(level, node, history)  -> spectral vector (left-endpoint source)
    """
    N, dt, theta = tree.n_steps, tree.dt, scheme.theta
    nm, dw = basis.n_modes, tree.dim_w
    c = tree.n_children

    p_levels: list[Array] = [None] * (N + 1)
    q_levels: list[Array] = [None] * N

    n_leaf = tree.levels[N].n_nodes
    terminal = np.empty((n_leaf, nm), dtype=complex)
    for i in range(n_leaf):
        terminal[i] = terminal_fn(i, tree.history(N, i))
    p_levels[N] = terminal

    for level in range(N - 1, -1, -1):
        n_here = tree.levels[level].n_nodes
        nxt = tree.levels[level + 1]
        child_p = p_levels[level + 1].reshape(n_here, c, nm)
        child_w = nxt.weights.reshape(n_here, c)
        child_dw = nxt.increments.reshape(n_here, c, dw)

        Ep = np.einsum("nc,ncm->nm", child_w, child_p)
        q = np.einsum("nc,nck,ncm->nkm", child_w, child_dw, child_p) / dt

        p_here = np.empty((n_here, nm), dtype=complex)
        for node in range(n_here):
            hist = tree.history(level, node)
            L, Ms = ops_fn(level, node, hist)
            fhat = source_fn(level, node, hist)
            p_new = _node_solve(L, Ms, Ep[node], q[node], fhat, dt, theta, level, node)
            if scheme.m_coupling == "fixed_point":
                for it in range(scheme.fp_max_iter):
                    p_prev = p_new
                    # the coefficient is a function of the (fixed) children, so
                    # re-deriving it and re-solving must stall; keep the loop
                    # honest with an explicit tolerance check anyway
                    p_new = _node_solve(L, Ms, Ep[node], q[node], fhat, dt, theta,
                                        level, node)
                    if np.max(np.abs(p_new - p_prev)) <= scheme.fp_tol * (
                            1.0 + np.max(np.abs(p_new))):
                        break
                else:
                    raise ConvergenceError(
                        f"noise-coupling fixed point did not settle within "
                        f"{scheme.fp_max_iter} iterations at level {level}, node {node}")
            p_here[node] = p_new
        p_levels[level] = p_here
        q_levels[level] = q

    p = AdaptedField(tree, basis, p_levels)
    qf = AdaptedField(tree, basis, q_levels)
    return SolutionPair(p, qf)


# -- scenario-driven providers ------------------------------------------------

def _terminal_provider(scenario: Scenario, basis: SpectralBasis):
    X = basis.grid_points
    if scenario.phi.is_deterministic:
        fixed = basis.project(scenario.phi.evaluate(0.0, X))
        return lambda i, hist: fixed
    horizon = scenario.horizon

    def term(i, hist):
        return basis.project(scenario.phi.evaluate(horizon, X, hist))
    return term


def _ops_provider(scenario: Scenario, tree: WienerTree, basis: SpectralBasis):
    cache: dict[int | tuple, tuple] = {}
    per_level = scenario.coefficients_deterministic

    def ops(level, node, hist):
        key = level if per_level else (level, node)
        if key not in cache:
            t = tree.time_of(level)
            cache[key] = (assemble_L(scenario, t, hist, basis),
                          assemble_M(scenario, t, hist, basis))
        return cache[key]
    return ops


def _source_provider(scenario: Scenario, tree: WienerTree, basis: SpectralBasis):
    X = basis.grid_points
    cache: dict[int | tuple, Array] = {}
    per_level = scenario.F.is_deterministic

    def source(level, node, hist):
        key = level if per_level else (level, node)
        if key not in cache:
            cache[key] = basis.project(scenario.F.evaluate(tree.time_of(level), X, hist))
        return cache[key]
    return source


def solve_tree(scenario: Scenario, tree: WienerTree, basis: SpectralBasis,
               scheme: SchemeConfig | None = None,
               storage_budget: int = 4_000_000) -> SolutionPair:
    """Backward theta-scheme solve of the scenario on a Wiener tree.

    The chain tree (branching 1) is only meaningful for deterministic
    scenarios, where the recursion collapses to the deterministic parabolic
    marcher and q vanishes identically.
    """
    scheme = scheme or SchemeConfig()
    if tree.dim_w != scenario.dim_w:
        raise StructuralError("tree and scenario disagree on dim_w")
    if abs(tree.horizon - scenario.horizon) > 1e-12:
        raise StructuralError("tree and scenario disagree on the horizon")
    if tree.is_chain and not scenario.is_deterministic:
        raise StructuralError("chain trees carry no randomness; scenario is adapted")
    entries = tree.n_nodes * basis.n_modes
    if entries > storage_budget:
        raise BudgetError(
            f"solve would store {entries} node-mode entries, over {storage_budget}",
            count=entries, budget=storage_budget)
    return backward_solve(
        tree, basis, scheme,
        _terminal_provider(scenario, basis),
        _ops_provider(scenario, tree, basis),
        _source_provider(scenario, tree, basis),
    )


# -- residuals ----------------------------------------------------------------

def strong_residual(solution: SolutionPair, scenario: Scenario, tree: WienerTree,
                    basis: SpectralBasis, scheme: SchemeConfig | None = None) -> list[Array]:
    """Per-node L2 norm of the scheme's own one-step identity.

    Freshly assembles the operators and evaluates
    ``p - E[p_next] - dt (theta L p + (1-theta) L E[p_next] + M q + F)``;
    for an exact solver output this is round-off.
    """
    scheme = scheme or SchemeConfig()
    theta, dt = scheme.theta, tree.dt
    ops = _ops_provider(scenario, tree, basis)
    src = _source_provider(scenario, tree, basis)
    out = []
    c = tree.n_children
    for level in range(tree.n_steps):
        n_here = tree.levels[level].n_nodes
        nxt = tree.levels[level + 1]
        child_p = solution.p.levels[level + 1].reshape(n_here, c, basis.n_modes)
        child_w = nxt.weights.reshape(n_here, c)
        Ep = np.einsum("nc,ncm->nm", child_w, child_p)
        res = np.empty(n_here)
        for node in range(n_here):
            hist = tree.history(level, node)
            L, Ms = ops(level, node, hist)
            fhat = src(level, node, hist)
            p_here = solution.p.levels[level][node]
            drift = theta * (L @ p_here) + (1.0 - theta) * (L @ Ep[node]) + fhat
            for k, Mk in enumerate(Ms):
                drift = drift + Mk @ solution.q.levels[level][node, k]
            res[node] = basis.norm(p_here - Ep[node] - dt * drift, 0)
        out.append(res)
    return out


def weak_residual(solution: SolutionPair, scenario: Scenario, tree: WienerTree,
                  basis: SpectralBasis, test_field: SpatialField,
                  scheme: SchemeConfig | None = None) -> list[Array]:
    """Signed defect of the one-step identity paired against a test field.

    The pairing uses the divergence-form operators (the integration by parts
    is exact in the spectral representation), so for divergence-form or
    constant-coefficient scenarios this matches the strong identity to
    round-off; test fields orthogonal to the active modes give exactly zero.
    """
    scheme = scheme or SchemeConfig()
    theta, dt = scheme.theta, tree.dt
    div_scn = scenario.with_fields(form="divergence")
    ops = _ops_provider(div_scn, tree, basis)
    src = _source_provider(div_scn, tree, basis)
    eta = np.asarray(test_field.coeffs, dtype=complex)
    out = []
    c = tree.n_children
    for level in range(tree.n_steps):
        n_here = tree.levels[level].n_nodes
        nxt = tree.levels[level + 1]
        child_p = solution.p.levels[level + 1].reshape(n_here, c, basis.n_modes)
        child_w = nxt.weights.reshape(n_here, c)
        Ep = np.einsum("nc,ncm->nm", child_w, child_p)
        res = np.empty(n_here)
        for node in range(n_here):
            hist = tree.history(level, node)
            L, Ms = ops(level, node, hist)
            fhat = src(level, node, hist)
            p_here = solution.p.levels[level][node]
            drift = theta * (L @ p_here) + (1.0 - theta) * (L @ Ep[node]) + fhat
            for k, Mk in enumerate(Ms):
                drift = drift + Mk @ solution.q.levels[level][node, k]
            defect = p_here - Ep[node] - dt * drift
            res[node] = float(np.real(basis.inner(eta, defect, 0)))
        out.append(res)
    return out


# -- least-squares Monte Carlo ------------------------------------------------

@dataclass
class RegressionSolution:
    """Per-path fields from the regression solver (levels 0..N for p, 0..N-1 for q)."""

    ensemble: PathEnsemble
    basis: SpectralBasis
    p: list[Array]      # each (n_paths, n_modes)
    q: list[Array]      # each (n_paths, dim_w, n_modes)
    basis_size: int

    def p0(self) -> SpatialField:
        return SpatialField(self.basis, self.p[0].mean(axis=0))


def _monomial_features(states: Array, size: int) -> Array:
    """First ``size`` monomials of the state, ordered by (total degree, lex)."""
    from itertools import combinations_with_replacement, count
    n, dw = states.shape
    cols = []
    for deg in count():
        for combo in combinations_with_replacement(range(dw), deg):
            col = np.ones(n)
            for j in combo:
                col = col * states[:, j]
            cols.append(col)
            if len(cols) == size:
                return np.stack(cols, axis=1)


def _fit(design: Array, targets: Array, step: int, trivial: bool) -> Array:
    """Least-squares fitted values; rank deficiency is an error except at t=0."""
    if trivial:
        return np.broadcast_to(targets.mean(axis=0), targets.shape).copy()
    beta, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
    if rank < design.shape[1]:
        raise NumericError(f"rank-deficient regression design at time step {step}")
    return design @ beta


def solve_regression(scenario: Scenario, ensemble: PathEnsemble, basis: SpectralBasis,
                     regression_basis_size: int = 4,
                     scheme: SchemeConfig | None = None) -> RegressionSolution:
    """Least-squares Monte Carlo version of the backward recursion.

    Conditional expectations are cross-sectional regressions on monomials of
    the current Wiener state.  The noise coefficient regresses
    ``p_next dW^k / dt``; under ``m_coupling='fixed_point'`` the fitted
    conditional mean is subtracted first (control variate), which changes
    nothing in expectation but strictly reduces the regression noise.
    Deterministic scenarios reproduce the chain solver exactly because the
    regression of a constant target is that constant.
    """
    scheme = scheme or SchemeConfig()
    if regression_basis_size < 1:
        raise StructuralError("regression_basis_size must be >= 1")
    if ensemble.dim_w != scenario.dim_w:
        raise StructuralError("ensemble and scenario disagree on dim_w")
    N, dt, theta = ensemble.n_steps, ensemble.dt, scheme.theta
    n_paths, nm, dw = ensemble.n_paths, basis.n_modes, ensemble.dim_w
    X = basis.grid_points
    det_ops = scenario.coefficients_deterministic

    # terminal values per path
    p_next = np.empty((n_paths, nm), dtype=complex)
    if scenario.phi.is_deterministic:
        p_next[:] = basis.project(scenario.phi.evaluate(scenario.horizon, X))
    else:
        for j in range(n_paths):
            p_next[j] = basis.project(
                scenario.phi.evaluate(scenario.horizon, X, ensemble.history(j, N)))

    p_levels: list[Array] = [None] * (N + 1)
    q_levels: list[Array] = [None] * N
    p_levels[N] = p_next.copy()

    eye = np.eye(nm)
    for step in range(N - 1, -1, -1):
        t = step * dt
        states = ensemble.w_at(step)
        trivial = step == 0
        design = None if trivial else _monomial_features(states, regression_basis_size)

        Ep = _fit(design, p_next, step, trivial)
        dW = ensemble.increments[:, step, :]
        q = np.empty((n_paths, dw, nm), dtype=complex)
        centred = p_next - Ep if scheme.m_coupling == "fixed_point" else p_next
        for k in range(dw):
            q[:, k, :] = _fit(design, centred * (dW[:, k] / dt)[:, None], step, trivial)

        if scenario.F.is_deterministic:
            fhat = np.broadcast_to(
                basis.project(scenario.F.evaluate(t, X)), (n_paths, nm))
        else:
            fhat = np.empty((n_paths, nm), dtype=complex)
            for j in range(n_paths):
                fhat[j] = basis.project(
                    scenario.F.evaluate(t, X, ensemble.history(j, step)))

        if det_ops:
            L = assemble_L(scenario, t, None, basis)
            Ms = assemble_M(scenario, t, None, basis)
            rhs = Ep + dt * fhat
            if theta < 1.0:
                rhs = rhs + dt * (1.0 - theta) * (Ep @ L.T)
            for k in range(dw):
                rhs = rhs + dt * (q[:, k, :] @ Ms[k].T)
            A = eye - theta * dt * L
            try:
                p_here = np.linalg.solve(A, rhs.T).T
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"singular implicit step at time step {step}") from exc
        else:
            p_here = np.empty((n_paths, nm), dtype=complex)
            for j in range(n_paths):
                hist = ensemble.history(j, step)
                L = assemble_L(scenario, t, hist, basis)
                Ms = assemble_M(scenario, t, hist, basis)
                p_here[j] = _node_solve(L, Ms, Ep[j], q[j], fhat[j], dt, theta, step, j)

        p_levels[step] = p_here
        q_levels[step] = q
        p_next = p_here

    return RegressionSolution(ensemble, basis, p_levels, q_levels, regression_basis_size)
