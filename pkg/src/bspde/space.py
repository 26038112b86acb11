"""Spectral Galerkin space on the torus [-L, L)^d and operator assembly.

The basis is the complex exponential family exp(i pi xi . x / L) for integer
multi-indices xi in {-M..M}^d, orthonormal under the *normalised* torus inner
product (2L)^{-d} int u conj(v) dx.  Under this convention the constant field
has coefficient 1 at xi = 0 and Parseval reads ||u||_0^2 = sum |u_hat|^2.
Sobolev norms of any integer order use the scaled frequencies k = pi xi / L:

    ||u||_n^2 = sum_xi (1 + |k_xi|^2)^n |u_hat_xi|^2.

Coefficient products are collocational (pointwise on the uniform grid), which
is the pseudo-spectral treatment of variable coefficients; an optional 3/2
dealias grid reduces the aliasing committed by those products.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as iter_product

import numpy as np

from .errors import StructuralError
from .scenario import PathHistory, Scenario

Array = np.ndarray


class SpectralBasis:
    """Truncated Fourier basis with its collocation grid and assembly caches.

    Parameters
    ----------
    dim_x : spatial dimension d
    modes_per_dim : M; the per-axis mode set is -M..M (2M+1 modes)
    domain_halfwidth : L of the torus [-L, L)^d
    dealias : use a 3/2-refined collocation grid for products
    """

    def __init__(self, dim_x: int, modes_per_dim: int, domain_halfwidth: float,
                 dealias: bool = False):
        if dim_x < 1 or modes_per_dim < 1:
            raise StructuralError("dim_x and modes_per_dim must be >= 1")
        self.dim_x = dim_x
        self.modes_per_dim = modes_per_dim
        self.domain_halfwidth = float(domain_halfwidth)
        self.dealias = bool(dealias)

        M, L, d = modes_per_dim, self.domain_halfwidth, dim_x
        per_axis = np.arange(-M, M + 1)
        self.modes = np.array(list(iter_product(per_axis, repeat=d)), dtype=int)
        self.n_modes = self.modes.shape[0]
        self.freqs = np.pi * self.modes / L          # (n_modes, d) scaled frequencies
        self.freq_sq = np.sum(self.freqs ** 2, axis=1)

        g = 3 * M + 2 if dealias else 2 * M + 1
        if g % 2 == 0:
            g += 1
        self.grid_per_dim = g
        axis_pts = -L + 2 * L * np.arange(g) / g
        self.grid_axes = [axis_pts] * d
        mesh = np.meshgrid(*self.grid_axes, indexing="ij")
        self.grid_points = np.stack([m.ravel() for m in mesh], axis=-1)
        self.n_grid = self.grid_points.shape[0]

        # Synthesis S (grid x modes) and exact analysis A = S^H / n_grid.
        self._S = np.exp(1j * self.grid_points @ self.freqs.T)
        self._A = self._S.conj().T / self.n_grid
        self._synth_d: dict[int, Array] = {}
        self._synth_dd: dict[tuple[int, int], Array] = {}

    # -- transforms -----------------------------------------------------------

    def project(self, values: Array) -> Array:
        """Coefficients of the grid samples (exact for band-limited fields)."""
        values = np.asarray(values)
        if values.shape[0] != self.n_grid:
            raise StructuralError(
                f"expected {self.n_grid} grid values, got {values.shape[0]}")
        return self._A @ values

    def reconstruct(self, coeffs: Array) -> Array:
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-1] != self.n_modes:
            raise StructuralError(
                f"expected {self.n_modes} coefficients, got {coeffs.shape[-1]}")
        return coeffs @ self._S.T

    def evaluate_at(self, coeffs: Array, x_points: Array) -> Array:
        """Trigonometric evaluation at arbitrary points (not just the grid)."""
        synth = np.exp(1j * np.asarray(x_points) @ self.freqs.T)
        return np.asarray(coeffs) @ synth.T

    # -- norms ----------------------------------------------------------------

    def sobolev_weight(self, order: int | float) -> Array:
        return (1.0 + self.freq_sq) ** order

    def norm_sq(self, coeffs: Array, order: int | float = 0) -> float:
        w = self.sobolev_weight(order)
        return float(np.sum(w * np.abs(coeffs) ** 2, axis=-1).real) \
            if np.ndim(coeffs) == 1 else np.sum(w * np.abs(coeffs) ** 2, axis=-1).real

    def norm(self, coeffs: Array, order: int | float = 0):
        return np.sqrt(self.norm_sq(coeffs, order))

    def inner(self, u: Array, v: Array, order: int | float = 0) -> complex:
        w = self.sobolev_weight(order)
        return complex(np.sum(w * np.conj(u) * v))

    # -- differentiation ------------------------------------------------------

    def derivative_multiplier(self, alpha: tuple[int, ...]) -> Array:
        """Spectral multiplier of D^alpha: prod (i k_j)^alpha_j per mode."""
        if len(alpha) != self.dim_x:
            raise StructuralError("multi-index length must equal dim_x")
        mult = np.ones(self.n_modes, dtype=complex)
        for j, a in enumerate(alpha):
            if a:
                mult = mult * (1j * self.freqs[:, j]) ** a
        return mult

    def _sd(self, i: int) -> Array:
        if i not in self._synth_d:
            self._synth_d[i] = self._S * (1j * self.freqs[:, i])[None, :]
        return self._synth_d[i]

    def _sdd(self, i: int, j: int) -> Array:
        key = (min(i, j), max(i, j))
        if key not in self._synth_dd:
            self._synth_dd[key] = self._S * (-self.freqs[:, i] * self.freqs[:, j])[None, :]
        return self._synth_dd[key]


@dataclass(frozen=True)
class SpatialField:
    """A field given by its spectral coefficients on a shared basis."""

    basis: SpectralBasis
    coeffs: Array

    def values(self) -> Array:
        return self.basis.reconstruct(self.coeffs)

    def norm(self, order: int | float = 0) -> float:
        return float(self.basis.norm(self.coeffs, order))


def project(values: Array, basis: SpectralBasis) -> SpatialField:
    """Collocation projection of grid samples onto the basis."""
    return SpatialField(basis, basis.project(values))


def sobolev_norm(field: SpatialField, order: int | float) -> float:
    """Spectral Sobolev norm of any integer (or real) order; 0 is L^2."""
    return field.norm(order)


@dataclass(frozen=True)
class OperatorMatrices:
    """Assembled spatial operators at one (t, history): drift L and noise M^k."""

    L: Array            # (n_modes, n_modes)
    M: list[Array]      # dim_w matrices (n_modes, n_modes)
    form: str


def assemble_L(scenario: Scenario, t: float, history: PathHistory | None,
               basis: SpectralBasis) -> Array:
    """Drift operator matrix on spectral coefficients at (t, history).

    Divergence form:      L u = D_i(a^{ij} D_j u) + b^i D_i u - c u
    Non-divergence form:  L u = a^{ij} D_{ij} u + b^i D_i u - c u

    Variable coefficients enter by collocation: synthesise, multiply on the
    grid, analyse back.  Constant coefficients therefore produce the exact
    diagonal symbol, and the two forms coincide for x-independent a.
    """
    d = scenario.dim_x
    X = basis.grid_points
    a = scenario.a.evaluate(t, X, history)      # (n_grid, d, d)
    b = scenario.b.evaluate(t, X, history)      # (n_grid, d)
    c = scenario.c.evaluate(t, X, history)      # (n_grid,)

    low = np.zeros((basis.n_grid, basis.n_modes), dtype=complex)
    for i in range(d):
        if np.any(b[:, i]):
            low += b[:, i, None] * basis._sd(i)
    if np.any(c):
        low -= c[:, None] * basis._S

    if scenario.form == "non_divergence":
        body = low.copy()
        for i in range(d):
            for j in range(d):
                if np.any(a[:, i, j]):
                    body += a[:, i, j, None] * basis._sdd(i, j)
        return basis._A @ body

    # divergence form: outer D_i applied spectrally after the grid product
    L = basis._A @ low
    for i in range(d):
        flux = np.zeros((basis.n_grid, basis.n_modes), dtype=complex)
        for j in range(d):
            if np.any(a[:, i, j]):
                flux += a[:, i, j, None] * basis._sd(j)
        if np.any(flux):
            L += (1j * basis.freqs[:, i])[:, None] * (basis._A @ flux)
    return L


def assemble_M(scenario: Scenario, t: float, history: PathHistory | None,
               basis: SpectralBasis) -> list[Array]:
    """Noise operators M^k, one matrix per Wiener dimension.

    Divergence form:      M^k v = D_i(sigma^{ik} v) + nu^k v
    Non-divergence form:  M^k v = sigma^{ik} D_i v + nu^k v
    """
    d, dw = scenario.dim_x, scenario.dim_w
    X = basis.grid_points
    sig = scenario.sigma.evaluate(t, X, history)   # (n_grid, d, dw)
    nu = scenario.nu.evaluate(t, X, history)       # (n_grid, dw)

    out = []
    for k in range(dw):
        if scenario.form == "non_divergence":
            body = np.zeros((basis.n_grid, basis.n_modes), dtype=complex)
            for i in range(d):
                if np.any(sig[:, i, k]):
                    body += sig[:, i, k, None] * basis._sd(i)
            if np.any(nu[:, k]):
                body += nu[:, k, None] * basis._S
            out.append(basis._A @ body)
        else:
            Mk = np.zeros((basis.n_modes, basis.n_modes), dtype=complex)
            for i in range(d):
                if np.any(sig[:, i, k]):
                    Mk += (1j * basis.freqs[:, i])[:, None] * (
                        basis._A @ (sig[:, i, k, None] * basis._S))
            if np.any(nu[:, k]):
                Mk += basis._A @ (nu[:, k, None] * basis._S)
            out.append(Mk)
    return out


def assemble_operators(scenario: Scenario, t: float, history: PathHistory | None,
                       basis: SpectralBasis) -> OperatorMatrices:
    return OperatorMatrices(
        L=assemble_L(scenario, t, history, basis),
        M=assemble_M(scenario, t, history, basis),
        form=scenario.form,
    )


def coercivity_probe(basis: SpectralBasis, L_mat: Array, M_mats: list[Array],
                     trial_fields: list[Array], v_order: int = 1, h_order: int = 0,
                     slack: float = 1e-8) -> tuple[float, float, bool]:
    """Empirical coercivity constants for 2<x, Lx> + ||M* x||^2 <= -lam ||x||_V^2 + Lam ||x||_H^2.

    Inner products and adjoints are taken in H^{h_order}; the dissipation norm
    is H^{v_order}.  lambda comes from a least-squares fit over the trial
    fields; Lambda is then the smallest constant making the inequality hold on
    every trial at that lambda, so the reported pair is always feasible on the
    sample.  ``ok`` is the real verdict: the fitted lambda must be strictly
    positive (a zero operator dissipates nothing and is flagged), and the
    feasible Lambda must be finite.
    """
    wh = basis.sobolev_weight(h_order)
    g, v, h = [], [], []
    for x in trial_fields:
        x = np.asarray(x, dtype=complex)
        quad = 2.0 * np.real(np.sum(wh * np.conj(x) * (L_mat @ x)))
        for Mk in M_mats:
            # adjoint in H^{h_order}: W^{-h} M^H W^{h}
            mstar_x = (Mk.conj().T @ (wh * x)) / wh
            quad += float(np.sum(wh * np.abs(mstar_x) ** 2))
        g.append(quad)
        v.append(basis.norm_sq(x, v_order))
        h.append(basis.norm_sq(x, h_order))
    g, v, h = np.array(g), np.array(v), np.array(h)
    design = np.stack([-v, h], axis=1)
    coef, *_ = np.linalg.lstsq(design, g, rcond=None)
    lam = float(coef[0])
    Lam = float(np.max((g + lam * v) / h)) if len(h) else float(coef[1])
    Lam = max(Lam, 0.0)
    ok = bool(lam > slack and np.isfinite(Lam))
    return lam, Lam, ok
