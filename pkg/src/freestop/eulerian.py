"""Eulerian formulation: min-cost flow on the space-time-control lattice.

Mass starts distributed as mu on the t = 0 layer, moves along arcs
(t_i, q) -> (t_{i+1}, q + dt f(q, A)) paying K(t_i, q, A) dt, and leaves the
system through zero-cost stop arcs that exist only at target-support nodes;
the stop-arc flow is the discrete stopping distribution.  Because move arcs
are uncapacitated, the optimum decomposes into source-to-sink paths routed
along cheapest paths, so the solve reduces exactly to a transportation
problem between supplies and sinks with shortest-path costs; masses and
costs are integer-scaled throughout, making conservation identities exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .control import ControlProblem
from .errors import FreestopError, InfeasibleError, OffLatticeError
from .hjb import ValueField, _gather
from .lattice import LatticeSpec
from .measures import DiscreteMeasure, TransportPlan
from .mincostflow import (COST_SCALE, MASS_SCALE, quantize_masses,
                          solve_transportation_int, transportation_duals)
from .trajectory import LatticePath

_BIG = np.int64(2 ** 62)


@dataclass
class FlowNetwork:
    """Implicit arc structure of the lattice flow problem."""

    problem: ControlProblem
    lattice: LatticeSpec
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    shifts: np.ndarray         # (m_controls, n) integer node displacements
    arc_cost_int: np.ndarray   # (nt-1, m_controls, *shape) scaled left-endpoint costs
    supply_idx: list           # multi-indices of supply nodes
    supply_int: np.ndarray
    sink_idx: list             # multi-indices of sink nodes
    demand_int: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.lattice.nt * self.lattice.n_space

    @property
    def n_move_arcs(self) -> int:
        total = 0
        for _ in range(self.lattice.nt - 1):
            for s in self.shifts:
                inside = 1
                for a, size in enumerate(self.lattice.n_axis):
                    inside *= max(size - abs(int(s[a])), 0)
                total += inside
        return total

    @property
    def n_stop_arcs(self) -> int:
        return self.lattice.nt * len(self.sink_idx)

    def sink_mask(self) -> np.ndarray:
        mask = np.zeros(self.lattice.n_axis, dtype=bool)
        for idx in self.sink_idx:
            mask[idx] = True
        return mask


def _gather_bool(src: np.ndarray, shift) -> np.ndarray:
    out = np.zeros(src.shape, dtype=bool)
    src_sl, dst_sl = [], []
    for a in range(src.ndim):
        s = int(shift[a])
        size = src.shape[a]
        if abs(s) >= size:
            return out
        if s >= 0:
            dst_sl.append(slice(0, size - s))
            src_sl.append(slice(s, size))
        else:
            dst_sl.append(slice(-s, size))
            src_sl.append(slice(0, size + s))
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    return out


def build_network(problem: ControlProblem, lattice: LatticeSpec,
                  mu_snapped: DiscreteMeasure, nu_snapped: DiscreteMeasure) -> FlowNetwork:
    """Assemble the implicit flow network; validates lattice alignment of the
    measures and reachability of the sinks."""
    shifts = lattice.control_shifts(problem)
    points = lattice.points()
    shape = lattice.n_axis
    nt = lattice.nt
    m = shifts.shape[0]
    arc_cost = np.empty((nt - 1, m) + shape, dtype=np.int64)
    for i in range(nt - 1):
        t = i * lattice.dt
        for ci in range(m):
            a = problem.control_set.vectors[ci]
            k = np.asarray(problem.running_cost(t, points, a), dtype=float).reshape(shape)
            if np.any(k < 0.0):
                raise FreestopError("negative running cost on the lattice")
            arc_cost[i, ci] = np.round(k * lattice.dt * COST_SCALE).astype(np.int64)

    try:
        supply_idx = [lattice.index_of(x) for x in mu_snapped.atoms]
        sink_idx = [lattice.index_of(y) for y in nu_snapped.atoms]
    except OffLatticeError as exc:
        raise OffLatticeError(f"measure atom off lattice: {exc}") from exc
    supply_int = quantize_masses(mu_snapped.weights)
    demand_int = quantize_masses(nu_snapped.weights)

    net = FlowNetwork(problem, lattice, mu_snapped, nu_snapped, shifts, arc_cost,
                      supply_idx, supply_int, sink_idx, demand_int)

    # reachability: every supply must reach some sink within the horizon
    sink_mask = net.sink_mask()
    can = sink_mask.copy()
    for i in range(nt - 2, -1, -1):
        nxt = sink_mask.copy()
        for ci in range(m):
            nxt |= _gather_bool(can, shifts[ci])
        can = nxt
    for idx, x in zip(supply_idx, mu_snapped.atoms):
        if not can[idx]:
            raise InfeasibleError(
                f"supply atom {x} cannot reach any target within t_max={lattice.t_max}")
    # and every sink must be reachable from some supply
    fwd = np.zeros(shape, dtype=bool)
    for idx in supply_idx:
        fwd[idx] = True
    seen = fwd.copy()
    for i in range(nt - 1):
        nxt = np.zeros(shape, dtype=bool)
        for ci in range(m):
            nxt |= _gather_bool(fwd, -shifts[ci])
        fwd = nxt
        seen |= fwd
    for idx, y in zip(sink_idx, nu_snapped.atoms):
        if not seen[idx]:
            raise InfeasibleError(
                f"target atom {y} unreachable from every supply within t_max={lattice.t_max}")
    return net


@dataclass
class FlowSolution:
    """Integer-exact density process and stopping distribution.

    move[i, c, q] holds the scaled mass departing node q at layer i under
    control c; stop[i, q] the scaled mass stopping at (t_i, q).  value is the
    total cost in unscaled units.
    """

    network: FlowNetwork
    move: np.ndarray   # int64 (nt-1, m_controls, *shape)
    stop: np.ndarray   # int64 (nt, *shape)
    value: float
    sink_potentials: np.ndarray = dataclass_field(default=None)
    source_potentials: np.ndarray = dataclass_field(default=None)

    def move_mass(self) -> np.ndarray:
        return self.move.astype(float) / MASS_SCALE

    def stop_mass(self) -> np.ndarray:
        return self.stop.astype(float) / MASS_SCALE

    def conservation_violations(self) -> int:
        """Exact integer check of inflow = outflow + stopflow at every node."""
        net = self.network
        lat = net.lattice
        shape = lat.n_axis
        supply = np.zeros(shape, dtype=np.int64)
        for idx, s in zip(net.supply_idx, net.supply_int):
            supply[idx] += s
        bad = 0
        for i in range(lat.nt):
            inflow = supply if i == 0 else _shift_int_sum(self.move[i - 1], net.shifts)
            outflow = self.move[i].sum(axis=0) if i < lat.nt - 1 \
                else np.zeros(shape, dtype=np.int64)
            bad += int(np.count_nonzero(inflow - outflow - self.stop[i]))
        return bad

    def stop_mass_per_sink(self) -> np.ndarray:
        net = self.network
        out = np.empty(len(net.sink_idx), dtype=np.int64)
        for j, idx in enumerate(net.sink_idx):
            out[j] = self.stop[(slice(None),) + idx].sum()
        return out


def _shift_int_sum(move_layer: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Arrivals at each node produced by a layer of move flows."""
    shape = move_layer.shape[1:]
    out = np.zeros(shape, dtype=np.int64)
    for ci in range(move_layer.shape[0]):
        src = move_layer[ci]
        s = shifts[ci]
        src_sl, dst_sl = [], []
        ok = True
        for a in range(len(shape)):
            k = int(s[a])
            size = shape[a]
            if abs(k) >= size:
                ok = False
                break
            if k >= 0:
                src_sl.append(slice(0, size - k))
                dst_sl.append(slice(k, size))
            else:
                src_sl.append(slice(-k, size))
                dst_sl.append(slice(0, size + k))
        if ok:
            out[tuple(dst_sl)] += src[tuple(src_sl)]
    return out


def _int_sweep(net: FlowNetwork, start_idx, with_backpointers: bool = False):
    lat = net.lattice
    shape = lat.n_axis
    m = net.shifts.shape[0]
    reach = np.full((lat.nt,) + shape, _BIG, dtype=np.int64)
    reach[(0,) + tuple(start_idx)] = 0
    bp = np.full((lat.nt,) + shape, -1, dtype=np.int8) if with_backpointers else None
    for i in range(lat.nt - 1):
        nxt = np.full(shape, _BIG, dtype=np.int64)
        chosen = np.full(shape, -1, dtype=np.int8)
        for ci in range(m):
            moved = np.full(shape, _BIG, dtype=np.int64)
            src = np.minimum(reach[i] + net.arc_cost_int[i, ci], _BIG)
            s = net.shifts[ci]
            src_sl, dst_sl = [], []
            ok = True
            for a in range(len(shape)):
                k = int(s[a])
                size = shape[a]
                if abs(k) >= size:
                    ok = False
                    break
                if k >= 0:
                    dst_sl.append(slice(k, size))
                    src_sl.append(slice(0, size - k))
                else:
                    dst_sl.append(slice(0, size + k))
                    src_sl.append(slice(-k, size))
            if ok:
                moved[tuple(dst_sl)] = src[tuple(src_sl)]
            better = moved < nxt
            if with_backpointers:
                chosen = np.where(better, np.int8(ci), chosen)
            np.minimum(nxt, moved, out=nxt)
        reach[i + 1] = nxt
        if with_backpointers:
            bp[i + 1] = chosen
    return (reach, bp) if with_backpointers else reach


def _int_backtrack(net: FlowNetwork, reach, bp, start_idx, target_idx, arrival: int):
    """Node sequence and control indices of one optimal path."""
    idx = np.array(target_idx, dtype=int)
    nodes = [tuple(idx)]
    ctrl = []
    i = arrival
    while i > 0:
        ci = int(bp[(i,) + tuple(idx)])
        if ci < 0:
            raise FreestopError("flow path reconstruction failed")
        ctrl.append(ci)
        idx = idx - net.shifts[ci]
        nodes.append(tuple(idx))
        i -= 1
    if nodes[-1] != tuple(start_idx):
        raise FreestopError("flow path does not close at its supply node")
    nodes.reverse()
    ctrl.reverse()
    return nodes, ctrl


def solve_flow(network: FlowNetwork) -> FlowSolution:
    """Exact min-cost flow via the transportation reduction.

    Shortest supply-to-sink distances come from integer DP sweeps in
    topological (time) order, the reduced bipartite problem is solved by
    successive shortest paths with potentials, and the optimal plan is
    superposed back onto the arcs; ties take the lowest control index and
    the earliest arrival layer.
    """
    net = network
    lat = net.lattice
    n_sup, n_snk = len(net.supply_idx), len(net.sink_idx)
    dist = np.full((n_sup, n_snk), _BIG, dtype=np.int64)
    arrivals = np.zeros((n_sup, n_snk), dtype=np.int64)
    sweeps = []
    for i, sidx in enumerate(net.supply_idx):
        reach, bp = _int_sweep(net, sidx, with_backpointers=True)
        sweeps.append((reach, bp))
        for j, tidx in enumerate(net.sink_idx):
            col = reach[(slice(None),) + tuple(tidx)]
            a = int(np.argmin(col))
            dist[i, j] = col[a]
            arrivals[i, j] = a
    if np.any(dist.min(axis=1) >= _BIG):
        raise InfeasibleError("some supply cannot reach any sink")
    plan_int, pi_src, pi_snk = solve_transportation_int(dist, net.supply_int,
                                                        net.demand_int)
    psi_int, phi_int = transportation_duals(pi_src, pi_snk)

    move = np.zeros((lat.nt - 1, net.shifts.shape[0]) + lat.n_axis, dtype=np.int64)
    stop = np.zeros((lat.nt,) + lat.n_axis, dtype=np.int64)
    total_cost = 0
    for i, j in zip(*np.nonzero(plan_int)):
        mass = int(plan_int[i, j])
        reach, bp = sweeps[i]
        arrival = int(arrivals[i, j])
        nodes, ctrl = _int_backtrack(net, reach, bp, net.supply_idx[i],
                                     net.sink_idx[j], arrival)
        for step, ci in enumerate(ctrl):
            move[(step, ci) + nodes[step]] += mass
        stop[(arrival,) + nodes[-1]] += mass
        total_cost += int(dist[i, j]) * mass
    value = total_cost / (MASS_SCALE * COST_SCALE)
    psi = psi_int.astype(float) / COST_SCALE
    phi = phi_int.astype(float) / COST_SCALE
    shift = phi.min()
    return FlowSolution(network=net, move=move, stop=stop, value=value,
                        sink_potentials=psi - shift, source_potentials=phi - shift)


def embed_plan(problem: ControlProblem, lattice: LatticeSpec, plan: TransportPlan,
               paths) -> FlowSolution:
    """Superpose per-pair optimal lattice paths weighted by the plan.

    paths is a list parallel to plan.support() (as produced by
    trajectory.paths_for_pairs).  The embedding is feasible by construction,
    so its value upper-bounds the solved flow's.
    """
    net = build_network(problem, lattice, plan.source, plan.target)
    support = plan.support()
    if len(paths) != len(support):
        raise FreestopError("one path per support pair required")
    masses = quantize_masses(np.array([plan.coupling[i, j] for i, j in support]))
    move = np.zeros((lattice.nt - 1, net.shifts.shape[0]) + lattice.n_axis,
                    dtype=np.int64)
    stop = np.zeros((lattice.nt,) + lattice.n_axis, dtype=np.int64)
    value = 0.0
    vec_by_row = {tuple(np.round(v, 12)): ci
                  for ci, v in enumerate(problem.control_set.vectors)}
    for (pair, path, mass) in zip(support, paths, masses):
        mass = int(mass)
        idx = lattice.index_of(path.points[0])
        layer = lattice.time_index(float(path.times[0]))
        if layer != 0:
            raise FreestopError("embedded paths must start at t = 0")
        for k in range(path.n_steps):
            ci = vec_by_row.get(tuple(np.round(path.controls[k], 12)))
            if ci is None:
                raise OffLatticeError("path control not in the problem's control set")
            move[(k, ci) + idx] += mass
            idx = tuple(np.array(idx) + net.shifts[ci])
        stop[(path.n_steps,) + idx] += mass
        value += path.cost * (mass / MASS_SCALE)
    return FlowSolution(network=net, move=move, stop=stop, value=value)


@dataclass
class WeakDualityReport:
    dual_value: float
    primal_value: float
    gap: float
    max_arc_residual: float
    holds: bool


def weak_duality_audit(network: FlowNetwork, flow: FlowSolution, field: ValueField,
                       psi=None, tol: float = None) -> WeakDualityReport:
    """Dual objective against the flow cost, plus per-arc feasibility
    residuals of the discrete transport inequality
    J(t+dt, q + dt f) - J(t, q) <= K dt."""
    lat = network.lattice
    if field.lattice.n_axis != lat.n_axis or field.lattice.nt < lat.nt:
        raise FreestopError("field and network must share the lattice")
    if psi is None:
        psi_sinks = np.array([field.psi[idx] for idx in network.sink_idx])
    else:
        psi_sinks = np.asarray(psi, dtype=float).reshape(len(network.sink_idx))
    j0_sources = np.array([field.J[(0,) + idx] for idx in network.supply_idx])
    dual = float(psi_sinks @ (network.demand_int / MASS_SCALE)
                 - j0_sources @ (network.supply_int / MASS_SCALE))
    primal = flow.value
    worst = -np.inf
    for i in range(lat.nt - 1):
        t = i * lat.dt
        for ci in range(network.shifts.shape[0]):
            kdt = network.arc_cost_int[i, ci].astype(float) / COST_SCALE
            ahead = _gather(field.J[i + 1], network.shifts[ci])
            finite = np.isfinite(ahead) & np.isfinite(field.J[i])
            if np.any(finite):
                res = ahead[finite] - field.J[i][finite] - kdt[finite]
                worst = max(worst, float(res.max()))
    if tol is None:
        scale = float(np.abs(field.J[np.isfinite(field.J)]).max())
        tol = 1e-9 * (1.0 + scale)
    return WeakDualityReport(dual_value=dual, primal_value=primal,
                             gap=primal - dual, max_arc_residual=worst,
                             holds=bool(dual <= primal + tol))


@dataclass
class SlacknessReport:
    stop_violation_mass: float
    move_violation_mass: float
    stop_mass_total: float
    move_mass_total: float


def slackness_audit(flow: FlowSolution, field: ValueField, tol: float = None) -> SlacknessReport:
    """Mass on stop arcs off the contact set, and on move arcs whose control
    fails to maximize the field's one-step continuation."""
    net = flow.network
    lat = net.lattice
    if tol is None:
        tol = field.eps_contact
    stop_viol = 0
    for i in range(lat.nt):
        layer = flow.stop[i]
        if not layer.any():
            continue
        gap = np.abs(field.J[i] - field.psi)
        bad = ~(gap <= tol)
        stop_viol += int(layer[bad & (layer > 0)].sum())
    move_viol = 0
    for i in range(lat.nt - 1):
        if not flow.move[i].any():
            continue
        cands = []
        for ci in range(net.shifts.shape[0]):
            kdt = net.arc_cost_int[i, ci].astype(float) / COST_SCALE
            cands.append(_gather(field.J[i + 1], net.shifts[ci]) - kdt)
        cands = np.stack(cands)
        best = cands.max(axis=0)
        for ci in range(net.shifts.shape[0]):
            layer = flow.move[i, ci]
            if not layer.any():
                continue
            bad = cands[ci] < best - tol
            move_viol += int(layer[bad & (layer > 0)].sum())
    return SlacknessReport(stop_violation_mass=stop_viol / MASS_SCALE,
                           move_violation_mass=move_viol / MASS_SCALE,
                           stop_mass_total=float(flow.stop.sum()) / MASS_SCALE,
                           move_mass_total=float(flow.move.sum()) / MASS_SCALE)


def stopping_distribution_profile(flow: FlowSolution) -> np.ndarray:
    """Rows (t, q..., mass) of the stopping distribution, positive entries
    only, ordered by time then node index."""
    net = flow.network
    lat = net.lattice
    rows = []
    for i in range(lat.nt):
        layer = flow.stop[i]
        if not layer.any():
            continue
        for flat in np.flatnonzero(layer.ravel()):
            idx = np.unravel_index(flat, lat.n_axis)
            q = lat.point_at(idx)
            rows.append([i * lat.dt, *q, layer[idx] / MASS_SCALE])
    return np.array(rows) if rows else np.empty((0, lat.dimension + 2))


def audit_obstacle_from_duals(flow: FlowSolution) -> np.ndarray:
    """Grid obstacle carrying the flow's own sink potentials, -inf elsewhere.

    Solving the QVI with this masked obstacle reproduces the exact dual field
    of the lattice transport program, against which complementary slackness
    holds with zero violation mass.
    """
    net = flow.network
    if flow.sink_potentials is None:
        raise FreestopError("flow was not produced by solve_flow; no duals attached")
    psi = np.full(net.lattice.n_axis, -np.inf)
    for j, idx in enumerate(net.sink_idx):
        psi[idx] = flow.sink_potentials[j]
    return psi
