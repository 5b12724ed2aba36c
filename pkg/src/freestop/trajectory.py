"""Point-to-point controlled transport cost.

For the registered speed-limited families the cost has the closed form
g(d(x, y)) with d the norm induced by the control set (Euclidean for the
sphere, taxicab for signed axis vectors).  For general discrete-control
problems the cost is computed by a forward label-correcting dynamic program
on the space-time lattice: arcs (t_i, q) -> (t_{i+1}, q + dt f(q, A)) carry
the left-endpoint quadrature cost K(t_i, q, A) dt, and the point cost is the
cheapest arrival at the target over all time layers up to the horizon.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .control import ControlProblem
from .errors import FreestopError, OffLatticeError, UnreachableTargetError
from .lattice import LatticeSpec

_INF = np.inf


@dataclass
class LatticePath:
    """One lattice trajectory: node states, chosen controls, end time."""

    times: np.ndarray      # (k+1,)
    points: np.ndarray     # (k+1, n)
    controls: np.ndarray   # (k, n) control vectors, empty for k = 0
    cost: float

    @property
    def end_time(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0

    @property
    def n_steps(self) -> int:
        return max(self.times.size - 1, 0)


@dataclass
class CostMatrix:
    sources: np.ndarray
    targets: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if np.any(~np.isfinite(c)) or np.any(c < 0.0):
            raise FreestopError("cost matrix entries must be finite and non-negative")
        self.c = c


def induced_norm(problem: ControlProblem, displacement) -> float:
    """Travel-time norm of the family's control set."""
    d = np.asarray(displacement, dtype=float)
    if problem.control_set.kind == "sphere":
        return float(np.linalg.norm(d))
    return float(np.abs(d).sum())


def point_cost_analytic(problem: ControlProblem, x, y) -> float:
    """Closed-form cost g(d(x, y)) of the speed-limited time-penalty family."""
    if problem.family != "speed_limited_time_penalty" or problem.penalty is None:
        raise FreestopError("no analytic cost registered for this problem")
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    return float(problem.penalty.value(induced_norm(problem, d)))


def _shift_min(dest: np.ndarray, src: np.ndarray, shift: np.ndarray):
    """dest = min(dest, src moved by integer node shift), out-of-box dropped."""
    n = src.ndim
    src_sl, dst_sl = [], []
    for a in range(n):
        s = int(shift[a])
        size = src.shape[a]
        if abs(s) >= size:
            return
        if s >= 0:
            src_sl.append(slice(0, size - s))
            dst_sl.append(slice(s, size))
        else:
            src_sl.append(slice(-s, size))
            dst_sl.append(slice(0, size + s))
    view = dest[tuple(dst_sl)]
    np.minimum(view, src[tuple(src_sl)], out=view)


def forward_sweep(problem: ControlProblem, lattice: LatticeSpec, start_index,
                  with_backpointers: bool = False):
    """Minimal accumulated cost from (t=0, start) to every lattice node.

    Returns reach (nt, *n_axis) and, when requested, the backpointer array
    bp (nt, *n_axis) of int8 control indices (-1 where unreached); ties take
    the lowest control index.
    """
    shifts = lattice.control_shifts(problem)
    n_controls = shifts.shape[0]
    shape = lattice.n_axis
    points = lattice.points()
    reach = np.full((lattice.nt,) + shape, _INF)
    reach[(0,) + tuple(start_index)] = 0.0
    bp = None
    if with_backpointers:
        bp = np.full((lattice.nt,) + shape, -1, dtype=np.int8)
    for i in range(lattice.nt - 1):
        t = i * lattice.dt
        nxt = np.full(shape, _INF)
        chosen = None
        for ci in range(n_controls):
            a = problem.control_set.vectors[ci]
            step_cost = np.asarray(problem.running_cost(t, points, a),
                                   dtype=float).reshape(shape) * lattice.dt
            cand = np.full(shape, _INF)
            _shift_min(cand, reach[i] + step_cost, shifts[ci])
            if with_backpointers:
                better = cand < nxt
                if chosen is None:
                    chosen = np.where(np.isfinite(cand), np.int8(ci), np.int8(-1))
                else:
                    chosen = np.where(better, np.int8(ci), chosen)
            np.minimum(nxt, cand, out=nxt)
        reach[i + 1] = nxt
        if with_backpointers:
            bp[i + 1] = np.where(np.isfinite(nxt), chosen, np.int8(-1))
    return (reach, bp) if with_backpointers else reach


def _backtrack(problem: ControlProblem, lattice: LatticeSpec, reach, bp,
               start_index, target_index, arrival_layer: int) -> LatticePath:
    shifts = lattice.control_shifts(problem)
    idx = np.array(target_index, dtype=int)
    layers = [arrival_layer]
    nodes = [idx.copy()]
    ctrl = []
    i = arrival_layer
    while i > 0:
        ci = int(bp[(i,) + tuple(idx)])
        if ci < 0:
            raise FreestopError("backpointer chain broken; unreachable state")
        ctrl.append(ci)
        idx = idx - shifts[ci]
        i -= 1
        layers.append(i)
        nodes.append(idx.copy())
    if tuple(idx) != tuple(start_index):
        raise FreestopError("backtracking did not close at the start node")
    layers.reverse()
    nodes.reverse()
    ctrl.reverse()
    times = np.array(layers, dtype=float) * lattice.dt
    pts = np.array([lattice.point_at(m) for m in nodes])
    controls = problem.control_set.vectors[np.array(ctrl, dtype=int)] if ctrl \
        else np.empty((0, lattice.dimension))
    return LatticePath(times=times, points=pts, controls=controls,
                       cost=float(reach[(arrival_layer,) + tuple(target_index)]))


def point_cost_lattice(problem: ControlProblem, lattice: LatticeSpec, x, y):
    """Minimal lattice path cost from (0, x) to y at any time <= t_max.

    Returns (cost, LatticePath).  x and y must be lattice nodes; raises
    UnreachableTargetError when no admissible path reaches y in time.
    """
    xi = lattice.index_of(x)
    yi = lattice.index_of(y)
    if xi == yi:
        p = np.asarray(x, dtype=float).reshape(1, -1)
        return 0.0, LatticePath(np.zeros(1), p, np.empty((0, lattice.dimension)), 0.0)
    reach, bp = forward_sweep(problem, lattice, xi, with_backpointers=True)
    column = reach[(slice(None),) + tuple(yi)]
    if not np.any(np.isfinite(column)):
        raise UnreachableTargetError(
            f"target {y} unreachable from {x} within t_max={lattice.t_max}")
    arrival = int(np.argmin(column))
    path = _backtrack(problem, lattice, reach, bp, xi, yi, arrival)
    return float(column[arrival]), path


def cost_matrix(problem: ControlProblem, lattice_or_none, sources, targets) -> CostMatrix:
    """Pairwise point costs; analytic when registered, else one DP sweep per
    source (sweeps run in parallel when FREESTOP_THREADS > 1)."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if lattice_or_none is None:
        c = np.array([[point_cost_analytic(problem, x, y) for y in targets]
                      for x in sources])
        return CostMatrix(sources, targets, c)
    lattice = lattice_or_none
    tgt_idx = [lattice.index_of(y) for y in targets]

    def row(x):
        xi = lattice.index_of(x)
        reach = forward_sweep(problem, lattice, xi)
        vals = np.empty(len(tgt_idx))
        for j, yi in enumerate(tgt_idx):
            col = reach[(slice(None),) + tuple(yi)]
            m = col.min()
            if not np.isfinite(m):
                raise UnreachableTargetError(
                    f"target {targets[j]} unreachable within t_max={lattice.t_max}")
            vals[j] = m
        return vals

    threads = int(os.environ.get("FREESTOP_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, sources))
    else:
        rows = [row(x) for x in sources]
    return CostMatrix(sources, targets, np.array(rows))


def paths_for_pairs(problem: ControlProblem, lattice: LatticeSpec, pairs):
    """Optimal lattice paths for (x, y) pairs, grouped to reuse one sweep per
    distinct source.  Returns a list parallel to pairs."""
    pairs = [(np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in pairs]
    by_source: dict = {}
    for k, (x, _) in enumerate(pairs):
        by_source.setdefault(lattice.index_of(x), []).append(k)
    out = [None] * len(pairs)
    for xi, ks in by_source.items():
        reach, bp = forward_sweep(problem, lattice, xi, with_backpointers=True)
        for k in ks:
            yi = lattice.index_of(pairs[k][1])
            if yi == xi:
                p = pairs[k][0].reshape(1, -1)
                out[k] = LatticePath(np.zeros(1), p, np.empty((0, lattice.dimension)), 0.0)
                continue
            col = reach[(slice(None),) + tuple(yi)]
            if not np.any(np.isfinite(col)):
                raise UnreachableTargetError(f"pair {pairs[k]} unreachable")
            arrival = int(np.argmin(col))
            out[k] = _backtrack(problem, lattice, reach, bp, xi, yi, arrival)
    return out


def quadrature_error_bound(problem: ControlProblem, lattice: LatticeSpec) -> float:
    """First-order bound on |lattice cost - analytic cost| for the
    speed-limited family: monotone g' makes the left-sum error at most
    (g'(0) + g'(t_max)) dt."""
    if problem.penalty is None:
        raise FreestopError("bound available only for registered penalty families")
    g = problem.penalty
    return (abs(g.slope(0.0)) + abs(g.slope(lattice.t_max))) * lattice.dt
