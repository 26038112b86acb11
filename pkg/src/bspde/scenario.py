"""Problem data for linear parabolic backward stochastic PDEs on the torus.

A scenario bundles the coefficient fields of

    dp = -[ div(a grad p) + b.grad p - c p + (M q + nu q) + F ] dt + q dW

(or its non-divergence counterpart a:D2p + b.grad p - c p + sigma.grad q + nu q)
together with the structural constants: the ellipticity floor kappa and the
uniform bound K of the standing assumption

    kappa I + sigma sigma^T <= 2 a <= K I,   0 < kappa < 1 < K.

Coefficients may be constant, deterministic functions of (t, x), or adapted
functions of (t, x, W-history).  Nothing here knows about discretisation; the
spectral basis and the Wiener tree consume scenarios through ``evaluate_field``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import StructuralError

Array = np.ndarray

FIELD_KINDS = ("deterministic_const", "deterministic_fn_of_tx", "adapted_fn_of_txW")
FORMS = ("divergence", "non_divergence")


@dataclass(frozen=True)
class PathHistory:
    """Discrete Wiener history prefix: elapsed increments and their running sum.

    ``increments`` has one row per elapsed step (shape ``(n_elapsed, dim_w)``);
    ``w`` is the current value of the driving process, i.e. the row sum.
    ``t`` is the time the history reaches.
    """

    t: float
    dt: float
    increments: Array
    w: Array

    @classmethod
    def empty(cls, dim_w: int) -> "PathHistory":
        return cls(0.0, 0.0, np.zeros((0, dim_w)), np.zeros(dim_w))

    @classmethod
    def from_increments(cls, increments: Array, dt: float) -> "PathHistory":
        increments = np.atleast_2d(np.asarray(increments, dtype=float))
        t = dt * increments.shape[0]
        return cls(t, dt, increments, increments.sum(axis=0))

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]


@dataclass(frozen=True)
class CoefficientField:
    """One coefficient of the equation, tagged by how much it may depend on.

    kind
        ``deterministic_const``    -- a fixed array,
        ``deterministic_fn_of_tx`` -- ``fn(t, X) -> (n_points, *shape)``,
        ``adapted_fn_of_txW``      -- ``fn(t, X, history) -> (n_points, *shape)``.
    shape
        Component shape: ``()`` scalar, ``(d,)`` drift, ``(d, d)`` diffusion
        matrix, ``(d, dim_w)`` noise coupling.
    derivatives
        Optional analytic spatial derivatives, keyed by multi-index tuple.
        When absent, consumers fall back to spectral differentiation of the
        sampled field.
    """

    kind: str
    shape: tuple
    fn: Callable | None = None
    value: Array | None = None
    derivatives: Mapping[tuple, Callable] | None = None

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise StructuralError(f"unknown coefficient kind {self.kind!r}")

    @classmethod
    def constant(cls, value, shape: tuple | None = None) -> "CoefficientField":
        value = np.asarray(value, dtype=float)
        if shape is not None and value.shape != tuple(shape):
            raise StructuralError(
                f"constant coefficient has shape {value.shape}, declared {tuple(shape)}"
            )
        return cls("deterministic_const", value.shape, value=value)

    @classmethod
    def of_tx(cls, fn: Callable, shape: tuple = (), derivatives=None) -> "CoefficientField":
        return cls("deterministic_fn_of_tx", tuple(shape), fn=fn, derivatives=derivatives)

    @classmethod
    def adapted(cls, fn: Callable, shape: tuple = (), derivatives=None) -> "CoefficientField":
        return cls("adapted_fn_of_txW", tuple(shape), fn=fn, derivatives=derivatives)

    @classmethod
    def zero(cls, shape: tuple = ()) -> "CoefficientField":
        return cls.constant(np.zeros(shape))

    @property
    def is_deterministic(self) -> bool:
        return self.kind != "adapted_fn_of_txW"

    @property
    def is_zero(self) -> bool:
        return self.kind == "deterministic_const" and not np.any(self.value)

    def evaluate(self, t: float, x_points: Array, history: PathHistory | None = None) -> Array:
        """Values at ``x_points`` (shape ``(n_points, d)``), as ``(n_points, *shape)``."""
        x_points = np.asarray(x_points, dtype=float)
        if x_points.ndim != 2:
            raise StructuralError("x_points must be a (n_points, dim_x) array")
        n = x_points.shape[0]
        if self.kind == "deterministic_const":
            out = np.broadcast_to(self.value, (n,) + self.shape)
            return np.array(out, dtype=float)
        if self.kind == "deterministic_fn_of_tx":
            raw = self.fn(t, x_points)
        else:
            if history is None:
                raise ValueError("adapted coefficient needs a Wiener history")
            if history.t + 1e-12 < t:
                raise ValueError(
                    f"history covers [0, {history.t:g}] but the field is evaluated at t={t:g}"
                )
            raw = self.fn(t, x_points, history)
        return self._normalise(raw, n)

    def _normalise(self, raw, n: int) -> Array:
        out = np.asarray(raw, dtype=float)
        want = (n,) + self.shape
        if out.shape == want:
            return out
        if out.shape == self.shape:  # x-independent evaluator
            return np.array(np.broadcast_to(out, want), dtype=float)
        if out.ndim == 0 and self.shape == ():
            return np.full(n, float(out))
        raise StructuralError(
            f"coefficient evaluator returned shape {out.shape}, expected {want}"
        )


def evaluate_field(field_: CoefficientField, t: float, x_points: Array,
                   history: PathHistory | None = None) -> Array:
    """Evaluate a coefficient field on a batch of spatial points.

    ``x_points`` are taken as given (the torus identification is the caller's
    business); adapted fields require a history at least as long as ``t``.
    """
    return field_.evaluate(t, x_points, history)


@dataclass(frozen=True)
class ModulusOfContinuity:
    """Spatial modulus gamma: nonnegative, vanishing at 0, nondecreasing."""

    gamma: Callable[[Array], Array]

    def __call__(self, r):
        return np.asarray(self.gamma(np.asarray(r, dtype=float)), dtype=float)


@dataclass
class Scenario:
    """Full problem statement: geometry, coefficients, data, structural constants."""

    dim_x: int
    dim_w: int
    horizon: float
    domain_halfwidth: float
    a: CoefficientField
    b: CoefficientField
    c: CoefficientField
    sigma: CoefficientField
    nu: CoefficientField
    F: CoefficientField
    phi: CoefficientField
    bound_K: float
    ellipticity_kappa: float
    form: str = "non_divergence"
    sources: dict | None = None  # raw expression text when loaded from a file
    validation: object | None = None  # report embedded by the file loader

    def __post_init__(self):
        d, dw = self.dim_x, self.dim_w
        if d < 1 or dw < 1:
            raise StructuralError("dim_x and dim_w must be >= 1")
        if self.horizon <= 0 or self.domain_halfwidth <= 0:
            raise StructuralError("horizon and domain halfwidth must be positive")
        if not (0 < self.ellipticity_kappa < 1 < self.bound_K):
            raise StructuralError(
                "constants must satisfy 0 < kappa < 1 < K "
                f"(got kappa={self.ellipticity_kappa}, K={self.bound_K})"
            )
        if self.form not in FORMS:
            raise StructuralError(f"form must be one of {FORMS}")
        expected = {
            "a": (d, d), "b": (d,), "c": (), "sigma": (d, dw), "nu": (dw,),
            "F": (), "phi": (),
        }
        for name, shape in expected.items():
            fld = getattr(self, name)
            if fld.shape != shape:
                raise StructuralError(
                    f"field {name!r} has component shape {fld.shape}, expected {shape}"
                )

    def coefficient_fields(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "sigma": self.sigma, "nu": self.nu}

    @property
    def coefficients_deterministic(self) -> bool:
        return all(f.is_deterministic for f in self.coefficient_fields().values())

    @property
    def is_deterministic(self) -> bool:
        """True when nothing (coefficients or data) reads the Wiener history."""
        return self.coefficients_deterministic and self.F.is_deterministic \
            and self.phi.is_deterministic

    def with_fields(self, **fields) -> "Scenario":
        return replace(self, **fields)


@dataclass(frozen=True)
class SampleGrid:
    """Finite (t, x) probe set used by the sampled standing-assumption audit."""

    ts: Array
    xs: Array  # (n_x, dim_x)


def default_sample_grid(scenario: Scenario, n_t: int = 5, n_x_per_dim: int = 7,
                        n_random: int = 8, seed: int = 1234) -> SampleGrid:
    """Uniform lattice over the torus plus a few seeded random points."""
    L, d = scenario.domain_halfwidth, scenario.dim_x
    ts = np.linspace(0.0, scenario.horizon, n_t)
    axes = [np.linspace(-L, L, n_x_per_dim, endpoint=False) for _ in range(d)]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    rng = np.random.default_rng(seed)
    extra = rng.uniform(-L, L, size=(n_random, d))
    return SampleGrid(ts, np.vstack([lattice, extra]))


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the sampled audit of the standing assumptions.

    ``min_margin`` is the smallest sampled eigenvalue of
    ``2a - sigma sigma^T - kappa I``; the superparabolicity flag is exactly
    ``min_margin >= 0``.  This is a sampled audit, not a certification: it
    speaks only for the probed (t, x, history) set.
    """

    symmetry_ok: bool
    superparabolic_ok: bool
    min_margin: float
    bounds_ok: bool
    modulus_ok: bool
    sample_count: int

    @property
    def all_ok(self) -> bool:
        return (self.symmetry_ok and self.superparabolic_ok
                and self.bounds_ok and self.modulus_ok)


def _probe_histories(scenario: Scenario, t: float, n_histories: int, seed: int):
    """Deterministic histories for sampling adapted fields at time t."""
    if scenario.is_deterministic or t == 0.0:
        return [PathHistory.empty(scenario.dim_w)]
    steps = 8
    dt = t / steps
    rng = np.random.default_rng(seed)
    hists = [PathHistory.from_increments(np.zeros((steps, scenario.dim_w)), dt)]
    for _ in range(n_histories - 1):
        inc = rng.standard_normal((steps, scenario.dim_w)) * np.sqrt(dt)
        hists.append(PathHistory.from_increments(inc, dt))
    return hists


def validate(scenario: Scenario, modulus: ModulusOfContinuity | None,
             sample_grid: SampleGrid | None = None, n_histories: int = 3) -> ValidationReport:
    """Sampled audit of symmetry, superparabolicity, bounds, and the modulus.

    Pure: the same scenario and grid always produce the identical report (the
    histories used for adapted fields come from a fixed internal seed).  Shape
    problems (non-square a, wrong sigma width) raise ``StructuralError`` and
    are deliberately distinct from a failed check.
    """
    if sample_grid is None:
        sample_grid = default_sample_grid(scenario)
    d = scenario.dim_x
    kappa, K = scenario.ellipticity_kappa, scenario.bound_K
    slack = 1e-9

    symmetry_ok = True
    bounds_ok = True
    modulus_ok = True
    min_margin = np.inf
    count = 0

    if modulus is not None:
        radii = np.linspace(0.0, 2 * scenario.domain_halfwidth * np.sqrt(d), 17)
        gvals = modulus(radii)
        if not (abs(gvals[0]) <= 1e-12 and np.all(np.diff(gvals) >= -1e-12)
                and np.all(gvals >= -1e-12)):
            modulus_ok = False

    xs = sample_grid.xs
    n_pairs_cap = 64
    pair_idx = np.arange(len(xs))
    for t in sample_grid.ts:
        hists = _probe_histories(scenario, float(t), n_histories, seed=9 + int(1000 * t))
        for hist in hists:
            a_vals = scenario.a.evaluate(t, xs, hist)          # (n, d, d)
            sig_vals = scenario.sigma.evaluate(t, xs, hist)    # (n, d, dw)
            b_vals = scenario.b.evaluate(t, xs, hist)
            c_vals = scenario.c.evaluate(t, xs, hist)
            nu_vals = scenario.nu.evaluate(t, xs, hist)
            count += len(xs)

            asym = np.max(np.abs(a_vals - np.swapaxes(a_vals, -1, -2)))
            if asym > slack * (1.0 + np.max(np.abs(a_vals))):
                symmetry_ok = False

            a_sym = 0.5 * (a_vals + np.swapaxes(a_vals, -1, -2))
            gram = np.einsum("nik,njk->nij", sig_vals, sig_vals)
            margin = np.linalg.eigvalsh(2.0 * a_sym - gram - kappa * np.eye(d))
            min_margin = min(min_margin, float(margin.min()))
            upper = np.linalg.eigvalsh(2.0 * a_sym)
            if upper.max() > K + slack:
                bounds_ok = False

            for vals in (a_vals, b_vals, c_vals, sig_vals, nu_vals):
                if not np.all(np.isfinite(vals)):
                    bounds_ok = False
                elif np.max(np.abs(vals)) > K + slack:
                    bounds_ok = False

            if modulus is not None and modulus_ok:
                # pairwise Frobenius continuity of a and sigma at fixed (t, history)
                idx = pair_idx if len(xs) ** 2 <= n_pairs_cap ** 2 else pair_idx[::3]
                xa, aa, ss = xs[idx], a_vals[idx], sig_vals[idx]
                diff_x = np.linalg.norm(xa[:, None, :] - xa[None, :, :], axis=-1)
                diff_a = np.sqrt(np.sum((aa[:, None] - aa[None, :]) ** 2, axis=(-1, -2)))
                diff_s = np.sqrt(np.sum((ss[:, None] - ss[None, :]) ** 2, axis=(-1, -2)))
                cap = modulus(diff_x) + slack
                if np.any(diff_a > cap) or np.any(diff_s > cap):
                    modulus_ok = False

    superparabolic_ok = bool(min_margin >= 0.0)
    return ValidationReport(
        symmetry_ok=symmetry_ok,
        superparabolic_ok=superparabolic_ok,
        min_margin=float(min_margin),
        bounds_ok=bounds_ok,
        modulus_ok=modulus_ok,
        sample_count=count,
    )
