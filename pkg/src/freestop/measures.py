"""Discrete probability measures and transport plans.

Measures are finite lists of weighted atoms in R^n.  Continuous (uniform)
densities are discretized as midpoint-quadrature atom lists, which keeps the
weak-convergence error O(1/N) and is the only continuous representation the
suite supports.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import FreestopError
from .lattice import LatticeSpec

_MERGE_TOL = 1e-12
_MASS_TOL = 1e-12
_MARGINAL_TOL = 1e-9


class DiscreteMeasure:
    """Probability measure with positive weights on duplicate-free atoms."""

    def __init__(self, atoms, weights):
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if atoms.shape[0] != weights.shape[0]:
            raise FreestopError("atoms and weights length mismatch")
        if np.any(weights <= 0.0):
            raise FreestopError("weights must be positive")
        atoms, weights = _merge_duplicates(atoms, weights)
        total = math.fsum(weights.tolist())
        if abs(total - 1.0) > _MASS_TOL:
            raise FreestopError(f"total mass {total} differs from 1 beyond {_MASS_TOL}")
        self.atoms = atoms
        self.weights = weights
        self.total_mass = total

    @property
    def dimension(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.atoms.shape[0]

    def support_radius_box(self) -> np.ndarray:
        return np.stack([self.atoms.min(axis=0), self.atoms.max(axis=0)])

    def to_json(self) -> dict:
        return {"atoms": [[*map(float, a), float(w)]
                          for a, w in zip(self.atoms, self.weights)]}

    @staticmethod
    def from_json(spec: dict) -> "DiscreteMeasure":
        """Accepts {"atoms": [[x..., w], ...]}, a 1D uniform density
        {"density": "uniform", "a": .., "b": .., "n_atoms": ..}, or a
        {"mixture": [component-with-weight, ...]} of those."""
        if "atoms" in spec:
            rows = np.asarray(spec["atoms"], dtype=float)
            return DiscreteMeasure(rows[:, :-1], rows[:, -1])
        if "mixture" in spec:
            parts, weights = [], []
            for comp in spec["mixture"]:
                w = float(comp.get("weight", 1.0 / len(spec["mixture"])))
                c = dict(comp)
                c.pop("weight", None)
                parts.append(DiscreteMeasure.from_json(c))
                weights.append(w)
            return mixture(parts, weights)
        if spec.get("density") == "uniform":
            return uniform_measure_1d(float(spec["a"]), float(spec["b"]),
                                      int(spec.get("n_atoms", 200)))
        raise FreestopError(f"unrecognized measure spec: {spec}")


def _merge_duplicates(atoms: np.ndarray, weights: np.ndarray):
    keys = np.round(atoms / _MERGE_TOL).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    if np.all(counts == 1):
        return atoms, weights
    order = np.argsort(inverse, kind="stable")
    merged_atoms = np.empty((counts.size, atoms.shape[1]))
    merged_weights = np.zeros(counts.size)
    first = np.full(counts.size, -1, dtype=int)
    for pos in order:
        g = inverse[pos]
        if first[g] < 0:
            first[g] = pos
            merged_atoms[g] = atoms[pos]
        merged_weights[g] += weights[pos]
    # keep original ordering by first occurrence
    by_first = np.argsort(first, kind="stable")
    return merged_atoms[by_first], merged_weights[by_first]


def uniform_measure_1d(a: float, b: float, n_atoms: int) -> DiscreteMeasure:
    """Midpoint quadrature of the uniform density on [a, b]."""
    if b <= a:
        raise FreestopError("uniform density needs a < b")
    mids = a + (np.arange(n_atoms) + 0.5) * (b - a) / n_atoms
    return DiscreteMeasure(mids.reshape(-1, 1), np.full(n_atoms, 1.0 / n_atoms))


def mixture(parts, weights) -> DiscreteMeasure:
    weights = np.asarray(weights, dtype=float)
    if abs(math.fsum(weights.tolist()) - 1.0) > _MASS_TOL:
        raise FreestopError("mixture weights must sum to 1")
    atoms = np.concatenate([p.atoms for p in parts])
    w = np.concatenate([wi * p.weights for wi, p in zip(weights, parts)])
    return DiscreteMeasure(atoms, w)


class TransportPlan:
    """Coupling matrix pi[i, j] >= 0 with prescribed row/column marginals."""

    def __init__(self, source: DiscreteMeasure, target: DiscreteMeasure, coupling):
        coupling = np.asarray(coupling, dtype=float)
        if coupling.shape != (len(source), len(target)):
            raise FreestopError("coupling shape does not match the measures")
        if np.any(coupling < 0.0):
            raise FreestopError("coupling must be non-negative")
        row = coupling.sum(axis=1)
        col = coupling.sum(axis=0)
        if np.max(np.abs(row - source.weights)) > _MARGINAL_TOL:
            raise FreestopError("row sums do not reproduce the source weights")
        if np.max(np.abs(col - target.weights)) > _MARGINAL_TOL:
            raise FreestopError("column sums do not reproduce the target weights")
        self.source = source
        self.target = target
        self.coupling = coupling

    def support(self):
        """Index pairs (i, j) carrying positive mass."""
        ii, jj = np.nonzero(self.coupling)
        return list(zip(ii.tolist(), jj.tolist()))


def identity_plan(measure: DiscreteMeasure) -> TransportPlan:
    return TransportPlan(measure, measure, np.diag(measure.weights))


def product_plan(source: DiscreteMeasure, target: DiscreteMeasure) -> TransportPlan:
    return TransportPlan(source, target, np.outer(source.weights, target.weights))


def marginals(plan: TransportPlan):
    """Row and column marginal measures of the coupling."""
    row = DiscreteMeasure(plan.source.atoms, plan.coupling.sum(axis=1))
    col = DiscreteMeasure(plan.target.atoms, plan.coupling.sum(axis=0))
    return row, col


def plan_cost(plan: TransportPlan, cost_matrix) -> float:
    """Total cost sum_ij c[i, j] * pi[i, j]."""
    c = np.asarray(cost_matrix, dtype=float)
    if c.shape != plan.coupling.shape:
        raise FreestopError("cost matrix shape does not match the plan")
    return float(np.sum(c * plan.coupling))


def w1_distance_1d(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """1-Wasserstein distance between 1D measures: integral of the absolute
    difference of the quantile functions."""
    if a.dimension != 1 or b.dimension != 1:
        raise FreestopError("w1_distance_1d is one-dimensional")

    def sorted_cdf(m):
        order = np.argsort(m.atoms[:, 0], kind="stable")
        return m.atoms[order, 0], np.cumsum(m.weights[order])

    xa, ca = sorted_cdf(a)
    xb, cb = sorted_cdf(b)
    levels = np.unique(np.concatenate([[0.0], ca, cb]))
    levels = levels[levels < 1.0 - 1e-15]
    total = 0.0
    for lo, hi in zip(levels, np.append(levels[1:], 1.0)):
        mid = 0.5 * (lo + hi)
        qa = xa[min(np.searchsorted(ca, mid), xa.size - 1)]
        qb = xb[min(np.searchsorted(cb, mid), xb.size - 1)]
        total += (hi - lo) * abs(qa - qb)
    return float(total)


def snap_plan(plan: TransportPlan, lattice: LatticeSpec) -> TransportPlan:
    """Plan between the snapped marginals, masses aggregated over collisions."""
    src = snap_to_grid(plan.source, lattice)
    tgt = snap_to_grid(plan.target, lattice)

    def group(measure, snapped):
        idx = {tuple(np.round(a / 1e-12).astype(np.int64)): k
               for k, a in enumerate(snapped.atoms)}
        out = np.empty(len(measure), dtype=int)
        for k, a in enumerate(measure.atoms):
            node = np.array([lattice.point_at(lattice.nearest_index(a))]).ravel()
            out[k] = idx[tuple(np.round(node / 1e-12).astype(np.int64))]
        return out

    gi = group(plan.source, src)
    gj = group(plan.target, tgt)
    coupling = np.zeros((len(src), len(tgt)))
    np.add.at(coupling, (gi[:, None], gj[None, :]), plan.coupling)
    return TransportPlan(src, tgt, coupling)


def snap_to_grid(measure: DiscreteMeasure, lattice: LatticeSpec) -> DiscreteMeasure:
    """Move each atom to its nearest lattice node, summing colliding weights.

    Preserves total mass; per-atom displacement is at most dx/2 per axis.
    Raises if the support is not covered by the lattice box.
    """
    indices = np.array([lattice.nearest_index(a) for a in measure.atoms], dtype=int)
    flat = np.ravel_multi_index(indices.T, lattice.n_axis)
    uniq, inverse = np.unique(flat, return_inverse=True)
    weights = np.zeros(uniq.size)
    np.add.at(weights, inverse, measure.weights)
    multi = np.stack(np.unravel_index(uniq, lattice.n_axis), axis=-1)
    atoms = np.array([lattice.point_at(m) for m in multi])
    return DiscreteMeasure(atoms, weights)
