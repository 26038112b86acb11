"""Frozen-coefficient solves, the freezing fixed point, and continuation in lambda.

With the second-order coefficients frozen at a spatial point x0 (keeping any
time/randomness dependence) the equation decouples mode by mode:

    dp_hat = -[ -(a0 k k) p_hat + i (sigma0 k) . q_hat + F_hat ] dt + q_hat dW,

so the backward recursion runs with scalar algebra per mode.  The freezing
iteration solves the variable-coefficient problem by Picard: the perturbation
(a - a0):D2 u + (sigma - sigma0).grad v and all lower-order terms are folded
into the source of the frozen solve, and the map contracts when the spatial
oscillation of (a, sigma) is small.  Continuation blends the second-order
coefficients between their frozen and true values on a uniform lambda grid,
warm-starting each step at the previous solution, which reaches coefficient
families whose direct freezing iteration diverges.

The folded source enters the step at the left endpoint without theta
splitting, so the fixed point reproduces the full tree solve exactly at
theta = 1 (the default); use theta = 1 whenever agreement with ``solve_tree``
matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, StructuralError
from .scenario import CoefficientField, PathHistory, Scenario
from .solver import (AdaptedField, SchemeConfig, SolutionPair, backward_solve,
                     pair_difference)
from .space import SpectralBasis
from .wiener import WienerTree

Array = np.ndarray


@dataclass
class FrozenScenario:
    """Reduced problem: x-independent a0, sigma0, no lower-order terms."""

    dim_x: int
    dim_w: int
    horizon: float
    domain_halfwidth: float
    a0: CoefficientField       # (d, d), x-independent
    sigma0: CoefficientField   # (d, dim_w), x-independent
    F: CoefficientField
    phi: CoefficientField
    bound_K: float
    ellipticity_kappa: float

    @classmethod
    def from_scenario(cls, scenario: Scenario, x0: Array) -> "FrozenScenario":
        """Freeze a and sigma of a scenario at the point x0 (t, omega kept)."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if x0.shape != (scenario.dim_x,):
            raise StructuralError("freeze point must have shape (dim_x,)")
        a0 = _frozen_field(scenario.a, x0)
        s0 = _frozen_field(scenario.sigma, x0)
        return cls(scenario.dim_x, scenario.dim_w, scenario.horizon,
                   scenario.domain_halfwidth, a0, s0, scenario.F, scenario.phi,
                   scenario.bound_K, scenario.ellipticity_kappa)


def _frozen_field(field_: CoefficientField, x0: Array) -> CoefficientField:
    """The same field evaluated only at x0, hence independent of x."""
    point = x0[None, :]
    if field_.kind == "deterministic_const":
        return field_
    if field_.kind == "deterministic_fn_of_tx":
        return CoefficientField.of_tx(
            lambda t, X: np.broadcast_to(field_.evaluate(t, point)[0],
                                         (len(X),) + field_.shape),
            field_.shape)
    return CoefficientField.adapted(
        lambda t, X, hist: np.broadcast_to(field_.evaluate(t, point, hist)[0],
                                           (len(X),) + field_.shape),
        field_.shape)


def _frozen_symbols(frozen: FrozenScenario, basis: SpectralBasis,
                    t: float, hist: PathHistory):
    """Diagonal symbols of a0:D2 and sigma0.grad at (t, history)."""
    origin = np.zeros((1, frozen.dim_x))
    a0 = frozen.a0.evaluate(t, origin, hist)[0]        # (d, d)
    s0 = frozen.sigma0.evaluate(t, origin, hist)[0]    # (d, dw)
    k = basis.freqs
    diagL = -np.einsum("ij,mi,mj->m", a0, k, k).astype(complex)
    diagM = [1j * (k @ s0[:, kk]) for kk in range(frozen.dim_w)]
    return diagL, diagM


def solve_frozen(frozen: FrozenScenario, tree: WienerTree, basis: SpectralBasis,
                 scheme: SchemeConfig | None = None,
                 source_levels: list[Array] | None = None) -> SolutionPair:
    """Backward solve with per-mode scalar algebra (coefficients frozen in x).

    ``source_levels`` optionally replaces the scenario source with tabulated
    per-node spectral vectors (one array of shape (n_nodes, n_modes) per
    level); the freezing iteration and the continuation march use this hook.
    """
    scheme = scheme or SchemeConfig()
    X = basis.grid_points

    sym_cache: dict = {}

    def ops(level, node, hist):
        key = level if (frozen.a0.is_deterministic and frozen.sigma0.is_deterministic) \
            else (level, node)
        if key not in sym_cache:
            sym_cache[key] = _frozen_symbols(frozen, basis, tree.time_of(level), hist)
        return sym_cache[key]

    if source_levels is not None:
        def source(level, node, hist):
            return source_levels[level][node]
    else:
        src_cache: dict = {}
        per_level = frozen.F.is_deterministic

        def source(level, node, hist):
            key = level if per_level else (level, node)
            if key not in src_cache:
                src_cache[key] = basis.project(
                    frozen.F.evaluate(tree.time_of(level), X, hist))
            return src_cache[key]

    if frozen.phi.is_deterministic:
        fixed_term = basis.project(frozen.phi.evaluate(frozen.horizon, X))
        terminal = lambda i, hist: fixed_term
    else:
        terminal = lambda i, hist: basis.project(
            frozen.phi.evaluate(frozen.horizon, X, hist))

    return backward_solve(tree, basis, scheme, terminal, ops, source)


@dataclass(frozen=True)
class IterationReport:
    """Convergence record of the freezing Picard iteration.

    ``contraction_ratios`` lists successive update-distance ratios (available
    from the second update on); the first entry is the observed one-step
    contraction factor of the map.
    """

    iterations: int
    contraction_ratios: list[float]
    converged: bool
    final_defect: float


def _iteration_sources(scenario: Scenario, frozen: FrozenScenario,
                       current: SolutionPair, tree: WienerTree,
                       basis: SpectralBasis) -> list[Array]:
    """Folded source F + (a-a0):D2u + (sigma-sigma0).grad v + b.grad u - cu + nu.v."""
    X = basis.grid_points
    d, dw, nm = scenario.dim_x, scenario.dim_w, basis.n_modes
    origin = np.zeros((1, d))
    dd_mult = [[basis.derivative_multiplier(_unit2(d, i, j)) for j in range(d)]
               for i in range(d)]
    d_mult = [basis.derivative_multiplier(_unit1(d, i)) for i in range(d)]
    out = []
    for level in range(tree.n_steps):
        t = tree.time_of(level)
        n_here = tree.levels[level].n_nodes
        lev_src = np.empty((n_here, nm), dtype=complex)
        for node in range(n_here):
            hist = tree.history(level, node)
            u = current.p.levels[level][node]
            v = current.q.levels[level][node]          # (dw, n_modes)
            a = scenario.a.evaluate(t, X, hist)
            s = scenario.sigma.evaluate(t, X, hist)
            b = scenario.b.evaluate(t, X, hist)
            cf = scenario.c.evaluate(t, X, hist)
            nu = scenario.nu.evaluate(t, X, hist)
            a0 = frozen.a0.evaluate(t, origin, hist)[0]
            s0 = frozen.sigma0.evaluate(t, origin, hist)[0]

            grid = scenario.F.evaluate(t, X, hist).astype(complex)
            for i in range(d):
                for j in range(d):
                    da = a[:, i, j] - a0[i, j]
                    if np.any(np.abs(da) > 0):
                        grid += da * basis.reconstruct(dd_mult[i][j] * u)
                db = b[:, i]
                if np.any(db):
                    grid += db * basis.reconstruct(d_mult[i] * u)
            for kk in range(dw):
                for i in range(d):
                    ds = s[:, i, kk] - s0[i, kk]
                    if np.any(np.abs(ds) > 0):
                        grid += ds * basis.reconstruct(d_mult[i] * v[kk])
                if np.any(nu[:, kk]):
                    grid += nu[:, kk] * basis.reconstruct(v[kk])
            if np.any(cf):
                grid -= cf * basis.reconstruct(u)
            lev_src[node] = basis.project(grid)
        out.append(lev_src)
    return out


def _unit1(d, i):
    alpha = [0] * d
    alpha[i] = 1
    return tuple(alpha)


def _unit2(d, i, j):
    alpha = [0] * d
    alpha[i] += 1
    alpha[j] += 1
    return tuple(alpha)


def _pair_distance(x: SolutionPair, y: SolutionPair) -> float:
    diff = pair_difference(x, y)
    return float(np.sqrt(diff.p.time_norm_sq(2) + diff.q.time_norm_sq(1)))


def freeze_and_iterate(scenario: Scenario, freeze_point: Array, tree: WienerTree,
                       basis: SpectralBasis, tol: float = 1e-9, max_iter: int = 40,
                       scheme: SchemeConfig | None = None,
                       initial: SolutionPair | None = None
                       ) -> tuple[SolutionPair, IterationReport]:
    """Picard iteration on the frozen-coefficient solve (see module doc).

    Non-convergence is reported, not raised: the caller gets the last iterate
    with ``converged=False`` and the observed ratios, which is what the
    continuation march needs to decide the step failed.
    """
    scheme = scheme or SchemeConfig()
    frozen = FrozenScenario.from_scenario(scenario, freeze_point)
    current = initial if initial is not None else solve_frozen(frozen, tree, basis, scheme)

    distances: list[float] = []
    for it in range(1, max_iter + 1):
        sources = _iteration_sources(scenario, frozen, current, tree, basis)
        nxt = solve_frozen(frozen, tree, basis, scheme, source_levels=sources)
        dist = _pair_distance(nxt, current)
        distances.append(dist)
        current = nxt
        if dist <= tol:
            ratios = [distances[m] / distances[m - 1]
                      for m in range(1, len(distances)) if distances[m - 1] > 0]
            return current, IterationReport(it, ratios, True, dist)
        if not np.isfinite(dist):
            break
    ratios = [distances[m] / distances[m - 1]
              for m in range(1, len(distances)) if distances[m - 1] > 0]
    return current, IterationReport(len(distances), ratios, False,
                                    distances[-1] if distances else np.inf)


def _blend_field(f0: CoefficientField, f1: CoefficientField, lam: float,
                 shape: tuple) -> CoefficientField:
    """(1-lam) f0 + lam f1, preserving determinism where both sides have it."""
    if f0.is_deterministic and f1.is_deterministic:
        return CoefficientField.of_tx(
            lambda t, X: (1 - lam) * f0.evaluate(t, X) + lam * f1.evaluate(t, X),
            shape)
    return CoefficientField.adapted(
        lambda t, X, hist: (1 - lam) * f0.evaluate(t, X, hist)
        + lam * f1.evaluate(t, X, hist), shape)


def continuation_solve(scenario: Scenario, n_lambda_steps: int, tree: WienerTree,
                       basis: SpectralBasis, tol: float = 1e-9,
                       max_iter: int = 40, freeze_point: Array | None = None,
                       scheme: SchemeConfig | None = None
                       ) -> tuple[SolutionPair, list[IterationReport]]:
    """March the second-order coefficients from frozen to true values.

    The lambda-grid is uniform on [0, 1] including both endpoints; lambda = 0
    is the frozen-in-x family (lower-order terms stay as given throughout) and
    every step is solved by ``freeze_and_iterate`` seeded at the previous
    solution.  A non-convergent step raises ``ConvergenceError`` naming the
    failing lambda.
    """
    if n_lambda_steps < 1:
        raise StructuralError("n_lambda_steps must be >= 1")
    x0 = np.zeros(scenario.dim_x) if freeze_point is None \
        else np.asarray(freeze_point, dtype=float)
    a0 = _frozen_field(scenario.a, x0)
    s0 = _frozen_field(scenario.sigma, x0)

    reports: list[IterationReport] = []
    current: SolutionPair | None = None
    for j in range(n_lambda_steps + 1):
        lam = j / n_lambda_steps
        blended = scenario.with_fields(
            a=_blend_field(a0, scenario.a, lam, (scenario.dim_x, scenario.dim_x)),
            sigma=_blend_field(s0, scenario.sigma, lam,
                               (scenario.dim_x, scenario.dim_w)),
        )
        current, report = freeze_and_iterate(
            blended, x0, tree, basis, tol=tol, max_iter=max_iter,
            scheme=scheme, initial=current)
        reports.append(report)
        if not report.converged:
            raise ConvergenceError(
                f"continuation step at lambda={lam:g} did not converge "
                f"(last defect {report.final_defect:.3e})")
    return current, reports
