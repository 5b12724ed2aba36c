"""Exact transportation solver: successive shortest paths with potentials.

Costs are scaled to integers (factor 10^9, rounded once) and masses are
quantized by largest-remainder rounding to integers summing to the scale, so
every pivot, every conservation identity, and the final primal = dual
equality are exact integer arithmetic.  Dijkstra runs on reduced costs,
which the potential update keeps non-negative; shortest-path ties resolve to
the lowest node index, making the solution deterministic.

The lattice flow problems reduce to this bipartite form because their
intermediate arcs are uncapacitated: any min-cost flow decomposes into
source-to-sink paths, each routed along a cheapest path.
"""

from __future__ import annotations

import numpy as np

from .errors import InfeasibleError

MASS_SCALE = 10 ** 9
COST_SCALE = 10 ** 9
_BIG = np.int64(2 ** 62)


def quantize_masses(weights, scale: int = MASS_SCALE) -> np.ndarray:
    """Largest-remainder rounding of probability weights to integers summing
    to scale; per-entry error is below 1/scale.  Ties go to the lowest index."""
    w = np.asarray(weights, dtype=float)
    raw = w * scale
    base = np.floor(raw).astype(np.int64)
    residual = int(scale - base.sum())
    if residual < 0:
        raise InfeasibleError("weights exceed total mass 1")
    if residual > 0:
        remainders = raw - base
        order = np.lexsort((np.arange(w.size), -remainders))
        base[order[:residual]] += 1
    return base


def scale_costs(cost, scale: int = COST_SCALE) -> np.ndarray:
    c = np.asarray(cost, dtype=float)
    out = np.full(c.shape, _BIG, dtype=np.int64)
    finite = np.isfinite(c)
    out[finite] = np.round(c[finite] * scale).astype(np.int64)
    if np.any(out[finite] < 0):
        raise InfeasibleError("negative arc cost after scaling")
    return out


def solve_transportation_int(cost_int: np.ndarray, supply: np.ndarray, demand: np.ndarray):
    """Min-cost transportation on integer data.

    cost_int[i, j] is the arc cost (entries >= _BIG mean 'no arc'), supply
    and demand are integer vectors with equal totals.  Returns (flow, pi_src,
    pi_snk): an integer flow matrix and the node potentials, which satisfy
    cost - pi_src[:, None] + pi_snk[None, :] >= 0 with equality wherever
    flow > 0.
    """
    cost_int = np.asarray(cost_int, dtype=np.int64)
    supply = np.asarray(supply, dtype=np.int64).copy()
    demand = np.asarray(demand, dtype=np.int64).copy()
    m, n = cost_int.shape
    if supply.sum() != demand.sum():
        raise InfeasibleError("total supply and demand differ")
    has_arc = cost_int < _BIG

    flow = np.zeros((m, n), dtype=np.int64)
    pi_src = np.zeros(m, dtype=np.int64)
    pi_snk = np.zeros(n, dtype=np.int64)
    remaining = int(supply.sum())

    while remaining > 0:
        active = supply > 0
        base = pi_src[active].min()
        d_src = np.where(active, pi_src - base, _BIG)
        d_snk = np.full(n, _BIG, dtype=np.int64)
        done_src = np.zeros(m, dtype=bool)
        done_snk = np.zeros(n, dtype=bool)
        parent_snk = np.full(n, -1, dtype=np.int64)   # source that relaxed the sink
        parent_src = np.full(m, -1, dtype=np.int64)   # sink behind a backward arc
        end_sink = -1
        d_end = _BIG

        while True:
            ds = np.where(done_src, _BIG, d_src)
            dn = np.where(done_snk, _BIG, d_snk)
            i_best = int(np.argmin(ds))
            j_best = int(np.argmin(dn))
            if ds[i_best] >= _BIG and dn[j_best] >= _BIG:
                raise InfeasibleError("no unsaturated sink reachable")
            if dn[j_best] < ds[i_best] or (dn[j_best] == ds[i_best] and dn[j_best] < _BIG
                                           and demand[j_best] > 0):
                j = j_best
                done_snk[j] = True
                if demand[j] > 0:
                    end_sink, d_end = j, dn[j]
                    break
                # traverse backward residual arcs of flow-carrying columns
                backs = (flow[:, j] > 0) & ~done_src
                if np.any(backs):
                    cand = dn[j] - cost_int[:, j] + pi_src - pi_snk[j]
                    improve = backs & (cand < d_src)
                    d_src = np.where(improve, cand, d_src)
                    parent_src = np.where(improve, j, parent_src)
            else:
                i = i_best
                done_src[i] = True
                cand = ds[i] + cost_int[i] - pi_src[i] + pi_snk
                improve = has_arc[i] & ~done_snk & (cand < d_snk)
                d_snk = np.where(improve, cand, d_snk)
                parent_snk = np.where(improve, i, parent_snk)

        # trace the augmenting path back to an active source
        path = []  # forward arcs (i, j, +1) and backward arcs (i, j, -1)
        j = end_sink
        while True:
            i = int(parent_snk[j])
            path.append((i, j, +1))
            if parent_src[i] < 0:
                break
            jb = int(parent_src[i])
            path.append((i, jb, -1))
            j = jb
        first_source = path[-1][0]
        push = min(int(supply[first_source]), int(demand[end_sink]))
        for i, j, sgn in path:
            if sgn < 0:
                push = min(push, int(flow[i, j]))
        for i, j, sgn in path:
            flow[i, j] += sgn * push
        supply[first_source] -= push
        demand[end_sink] -= push
        remaining -= push

        pi_src = pi_src - np.minimum(np.where(done_src, d_src, _BIG), d_end)
        pi_snk = pi_snk - np.minimum(np.where(done_snk, d_snk, _BIG), d_end)

    return flow, pi_src, pi_snk


def transportation_duals(pi_src, pi_snk):
    """Kantorovich-form duals from the engine potentials.

    The engine keeps cost[i, j] - pi_src[i] + pi_snk[j] >= 0 with equality on
    flow-carrying arcs, so psi = -pi_snk on sinks and phi = -pi_src on
    sources satisfy psi[j] - phi[i] <= cost[i, j], tight on the support.
    Returns (psi, phi) as int64 arrays in the scaled cost units.
    """
    return -np.asarray(pi_snk, dtype=np.int64), -np.asarray(pi_src, dtype=np.int64)
