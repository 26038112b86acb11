"""Discrete Wiener filtration: quadrature trees and path ensembles.

The tree realises the driving noise as a non-recombining Gauss-Hermite tree:
every node at level k spawns ``branching**dim_w`` children whose edge
increments are the tensorised Gauss-Hermite abscissae scaled by sqrt(dt), with
the matching product weights.  Conditional expectations on the tree are then
plain weighted sums, exact for the represented filtration, and the discrete
martingale-representation coefficient is the increment-weighted sum divided
by dt.

``build_chain`` is the degenerate single-path variant (zero increments, unit
weight) used to run deterministic scenarios at large step counts, where a
branching tree would be astronomically large; it does not satisfy the
second-moment matching and must not be used with adapted data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import BudgetError
from .scenario import PathHistory

Array = np.ndarray

ALLOWED_BRANCHING = (2, 3, 5)


def gauss_hermite_standard(n_points: int) -> tuple[Array, Array]:
    """Nodes and weights integrating a standard normal exactly to degree 2n-1."""
    x, w = hermgauss(n_points)
    z = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    return z, w / w.sum()


@dataclass(frozen=True)
class TreeLevel:
    """All nodes at one time level, stored columnwise.

    ``parents[i]`` indexes into the previous level (-1 at the root),
    ``increments[i]`` is the edge increment from the parent, ``weights[i]``
    the conditional probability of that edge, ``prob[i]`` the unconditional
    node probability, and ``w_cum[i]`` the running Wiener value at the node.
    """

    parents: Array
    increments: Array
    weights: Array
    prob: Array
    w_cum: Array

    @property
    def n_nodes(self) -> int:
        return len(self.parents)


@dataclass(frozen=True)
class WienerTree:
    dim_w: int
    n_steps: int
    branching: int
    horizon: float
    dt: float
    levels: list[TreeLevel]

    @property
    def n_children(self) -> int:
        return self.branching ** self.dim_w if self.branching > 1 else 1

    @property
    def n_nodes(self) -> int:
        return sum(level.n_nodes for level in self.levels)

    @property
    def is_chain(self) -> bool:
        return self.branching == 1

    def time_of(self, level: int) -> float:
        return level * self.dt

    def children_slice(self, level: int, index: int) -> slice:
        """Indices of the children of node ``index`` at ``level`` in level+1."""
        c = self.n_children
        return slice(index * c, (index + 1) * c)

    def history(self, level: int, index: int) -> PathHistory:
        """Increment prefix along the root-to-node chain."""
        incs = np.zeros((level, self.dim_w))
        lev, idx = level, index
        while lev > 0:
            incs[lev - 1] = self.levels[lev].increments[idx]
            idx = int(self.levels[lev].parents[idx])
            lev -= 1
        return PathHistory(level * self.dt, self.dt, incs, incs.sum(axis=0))


def _branch_pattern(dim_w: int, branching: int, dt: float) -> tuple[Array, Array]:
    """Tensorised child increments (C, dim_w) and product weights (C,)."""
    z, w = gauss_hermite_standard(branching)
    grids = np.meshgrid(*([z] * dim_w), indexing="ij")
    incs = np.stack([g.ravel() for g in grids], axis=-1) * np.sqrt(dt)
    wgrids = np.meshgrid(*([w] * dim_w), indexing="ij")
    weights = np.ones(branching ** dim_w)
    for g in wgrids:
        weights = weights * g.ravel()
    return incs, weights


def build_tree(dim_w: int, n_steps: int, branching: int, horizon: float,
               node_budget: int = 200_000) -> WienerTree:
    """Non-recombining Gauss-Hermite tree over [0, horizon] with n_steps levels."""
    if branching not in ALLOWED_BRANCHING:
        raise ValueError(f"branching must be one of {ALLOWED_BRANCHING}, got {branching}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    c = branching ** dim_w
    total = sum(c ** k for k in range(n_steps + 1))
    if total > node_budget:
        raise BudgetError(
            f"tree would hold {total} nodes, over the budget of {node_budget}",
            count=total, budget=node_budget,
        )
    dt = horizon / n_steps
    pattern_inc, pattern_w = _branch_pattern(dim_w, branching, dt)

    levels = [TreeLevel(
        parents=np.array([-1]),
        increments=np.zeros((1, dim_w)),
        weights=np.ones(1),
        prob=np.ones(1),
        w_cum=np.zeros((1, dim_w)),
    )]
    for _ in range(n_steps):
        prev = levels[-1]
        n_prev = prev.n_nodes
        parents = np.repeat(np.arange(n_prev), c)
        increments = np.tile(pattern_inc, (n_prev, 1))
        weights = np.tile(pattern_w, n_prev)
        prob = np.repeat(prev.prob, c) * weights
        w_cum = np.repeat(prev.w_cum, c, axis=0) + increments
        levels.append(TreeLevel(parents, increments, weights, prob, w_cum))
    return WienerTree(dim_w, n_steps, branching, horizon, dt, levels)


def build_chain(dim_w: int, n_steps: int, horizon: float) -> WienerTree:
    """Single-path degenerate tree for deterministic scenarios (see module doc)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = horizon / n_steps
    levels = [TreeLevel(
        parents=np.array([-1 if k == 0 else 0]),
        increments=np.zeros((1, dim_w)),
        weights=np.ones(1),
        prob=np.ones(1),
        w_cum=np.zeros((1, dim_w)),
    ) for k in range(n_steps + 1)]
    return WienerTree(dim_w, n_steps, 1, horizon, dt, levels)


def conditional_expectation(tree: WienerTree, node: tuple[int, int], child_values: Array):
    """Exact E[. | node]: the weight-averaged child values (children on axis 0)."""
    level, index = node
    if level >= tree.n_steps:
        raise ValueError("terminal nodes have no children")
    sl = tree.children_slice(level, index)
    w = tree.levels[level + 1].weights[sl]
    vals = np.asarray(child_values)
    if vals.shape[0] != len(w):
        raise ValueError(f"expected {len(w)} child values, got {vals.shape[0]}")
    return np.tensordot(w, vals, axes=(0, 0))


def martingale_coefficient(tree: WienerTree, node: tuple[int, int], child_values: Array):
    """Discrete martingale-representation coefficient E[X dW | node] / dt.

    Component k of the result is the weighted child average of
    ``child_values * increment_k`` divided by dt; for affine child data this
    recovers the representation coefficient exactly.
    """
    level, index = node
    if level >= tree.n_steps:
        raise ValueError("terminal nodes have no children")
    sl = tree.children_slice(level, index)
    nxt = tree.levels[level + 1]
    w, dw = nxt.weights[sl], nxt.increments[sl]
    vals = np.asarray(child_values)
    if vals.shape[0] != len(w):
        raise ValueError(f"expected {len(w)} child values, got {vals.shape[0]}")
    return np.einsum("c,ck,c...->k...", w, dw, vals) / tree.dt


@dataclass(frozen=True)
class PathEnsemble:
    """Seeded bundle of sampled Wiener paths on a uniform time grid."""

    dim_w: int
    n_steps: int
    n_paths: int
    seed: int
    horizon: float
    dt: float
    increments: Array  # (n_paths, n_steps, dim_w)

    def w_at(self, step: int) -> Array:
        """Wiener values at time step*dt, shape (n_paths, dim_w)."""
        if step == 0:
            return np.zeros((self.n_paths, self.dim_w))
        return self.increments[:, :step, :].sum(axis=1)

    def history(self, path: int, step: int) -> PathHistory:
        return PathHistory.from_increments(self.increments[path, :step, :], self.dt) \
            if step > 0 else PathHistory.empty(self.dim_w)


def sample_paths(dim_w: int, n_steps: int, n_paths: int, horizon: float,
                 seed: int) -> PathEnsemble:
    """Draw iid Gaussian increments; bit-reproducible for a given seed."""
    if n_paths < 1 or n_steps < 1:
        raise ValueError("n_paths and n_steps must be >= 1")
    dt = horizon / n_steps
    rng = np.random.default_rng(seed)
    inc = rng.standard_normal((n_paths, n_steps, dim_w)) * np.sqrt(dt)
    return PathEnsemble(dim_w, n_steps, n_paths, seed, horizon, dt, inc)
