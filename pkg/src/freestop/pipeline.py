"""Scenario runner: orchestrates the solver stages and cross-checks.

The full pipeline computes the same transport value four ways and audits the
structural identities between them:

  V   primal plan value (exact LP between the measure atoms),
  D1  its internal dual value (strong duality is exact by construction),
  D   the obstacle-field dual read off the optimized pair,
  W   the Eulerian flow value on the lattice.

V = D1 holds to quantization; W and D approach V at first order in the mesh;
slackness between the flow and the field built from the flow's own duals is
exact.  Every enabled audit lands in the report with its measured residual.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import eulerian as eul
from . import hjb as hjbmod
from . import pontryagin as pmp
from .errors import (FreestopError, NonDifferentiableError,
                     UnreachableTargetError)
from .kantorovich import solve_primal_dual
from .lattice import LatticeSpec
from .measures import snap_plan, snap_to_grid, w1_distance_1d
from .oracle1d import (oracle_boundary, oracle_monge, oracle_obstacle,
                       oracle_potentials, oracle_total_cost, oracle_travel_time)
from .penalties import TIME_STATIONARY
from .scenario import Scenario
from .tableio import field_header, field_rows, fmt, write_csv
from .trajectory import cost_matrix, induced_norm, paths_for_pairs


@dataclass
class AuditEntry:
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""

    def to_json(self):
        return {"name": self.name, "value": self.value, "tol": self.tol,
                "passed": bool(self.passed), "note": self.note}


@dataclass
class VerificationReport:
    name: str
    values: dict = dataclass_field(default_factory=dict)
    gaps: dict = dataclass_field(default_factory=dict)
    audits: list = dataclass_field(default_factory=list)
    artifacts: dict = dataclass_field(default_factory=dict)
    notes: list = dataclass_field(default_factory=list)
    failed_stage: str = None
    error: str = None

    def audit(self, name, value, tol, passed=None, note=""):
        if passed is None:
            passed = bool(value <= tol)
        entry = AuditEntry(name, float(value), float(tol), bool(passed), note)
        self.audits.append(entry)
        return entry

    @property
    def all_passed(self) -> bool:
        return self.failed_stage is None and all(a.passed for a in self.audits)

    def to_json(self):
        return {
            "name": self.name,
            "values": {k: float(v) for k, v in self.values.items()},
            "gaps": {k: float(v) for k, v in self.gaps.items()},
            "audits": [a.to_json() for a in self.audits],
            "artifacts": self.artifacts,
            "notes": self.notes,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "all_passed": self.all_passed,
        }


def run(scenario: Scenario, output_dir: str = None) -> VerificationReport:
    """Execute the enabled stages; any module error is recorded with the
    failing stage named and aborts the remaining stages."""
    report = VerificationReport(name=scenario.name)
    state = {}
    stages = [
        ("validate", _stage_validate),
        ("trajectory_cost", _stage_cost),
        ("kantorovich", _stage_kantorovich),
        ("hjb", _stage_hjb),
        ("eulerian", _stage_eulerian),
        ("pontryagin", _stage_pontryagin),
        ("oracle", _stage_oracle),
    ]
    for name, fn in stages:
        try:
            fn(scenario, state, report)
        except FreestopError as exc:
            report.failed_stage = name
            report.error = f"{name}: {exc}"
            return report
    if output_dir:
        try:
            _emit_artifacts(scenario, state, report, output_dir)
        except FreestopError as exc:
            report.failed_stage = "artifacts"
            report.error = f"artifacts: {exc}"
    return report


def _tol(scenario, key, default):
    return float(scenario.tolerances.get(key, default))


def _stage_validate(scenario, state, report):
    state["grid"] = scenario.validate()
    state["flow_lattice"] = scenario.flow_lattice()


def _stage_cost(scenario, state, report):
    mu, nu = scenario.mu, scenario.nu
    flow_lat = state["flow_lattice"]
    state["mu_snap"] = snap_to_grid(mu, flow_lat)
    state["nu_snap"] = snap_to_grid(nu, flow_lat)
    if not scenario.pipeline.get("cost", True):
        return
    # reachability within the horizon: minimum travel time is the induced
    # distance for the registered families
    worst = 0.0
    for y in nu.atoms:
        d = min(induced_norm(scenario.problem, y - x) for x in mu.atoms)
        worst = max(worst, d)
    for x in mu.atoms:
        d = min(induced_norm(scenario.problem, y - x) for y in nu.atoms)
        worst = max(worst, d)
    if worst > scenario.t_max + 1e-12:
        raise UnreachableTargetError(
            f"unreachable: travel time {worst:.4g} exceeds t_max={scenario.t_max}")
    state["cost_atoms"] = cost_matrix(scenario.problem, None, mu.atoms, nu.atoms)


def _stage_kantorovich(scenario, state, report):
    if not scenario.pipeline.get("kantorovich", True):
        return
    sol = solve_primal_dual(state["cost_atoms"], scenario.mu, scenario.nu)
    state["lp"] = sol
    report.values["V"] = sol.value
    report.values["D1"] = sol.dual_value()
    report.gaps["V_vs_D1"] = abs(sol.value - sol.dual_value())
    report.audit("kantorovich_strong_duality", report.gaps["V_vs_D1"],
                 _tol(scenario, "lp_gap", 1e-8))


def _obstacle_on_grid(scenario, state, grid: LatticeSpec):
    """Oracle obstacle for the worked scenarios, else the LP duals masked to
    the snapped target nodes (stopping forbidden elsewhere)."""
    if scenario.oracle_case:
        nodes = grid.points()[:, 0].reshape(grid.n_axis)
        return oracle_obstacle(scenario.oracle_case, scenario.problem.penalty, nodes)
    if "lp" not in state:
        raise FreestopError("field obstacle needs the kantorovich stage or an oracle case")
    sol = state["lp"]
    psi = np.full(grid.n_axis, -np.inf)
    for y, val in zip(scenario.nu.atoms, sol.potentials.psi):
        idx = grid.nearest_index(y)
        psi[idx] = max(psi[idx], val)
    return psi


def _stage_hjb(scenario, state, report):
    if not scenario.pipeline.get("hjb", True):
        return
    grid = state["grid"]
    problem = scenario.problem
    psi = _obstacle_on_grid(scenario, state, grid)
    field = hjbmod.solve_qvi(
        problem, grid, psi,
        horizon_factor=_tol(scenario, "horizon_factor", 2.0),
        eps_horizon=scenario.tolerances.get("eps_horizon"))
    state["field"] = field
    boundary = hjbmod.extract_free_boundary(field)
    state["boundary"] = boundary
    if boundary.stationary:
        report.notes.append("TS field: boundary undefined, J identical to the obstacle")
    report.audit("hjb_obstacle_violation", field.obstacle_violation(),
                 field.eps_contact)
    report.audit("hjb_monotonicity_violation", field.monotonicity_violation(),
                 field.eps_mono)
    report.audit("hjb_contact_closure_violations",
                 hjbmod.contact_closure_violations(field), 0)
    if field.scheme == "dp":
        viols, worst = hjbmod.qvi_complementarity_violations(problem, field)
        report.audit("hjb_complementarity_violations", viols, 0,
                     note=f"worst continuation residual {worst:.3e}")
    res = hjbmod.boundary_equation_residual(problem, field, boundary)
    res_tol = _tol(scenario, "boundary_residual",
                   10.0 * (grid.dx + grid.dt) * (1.0 + field.k_scale))
    if scenario.problem.time_class == TIME_STATIONARY:
        finite = np.isfinite(res.residual)
        worst = float(-res.residual[finite].min()) if np.any(finite) else 0.0
        report.audit("boundary_supersolution_violation", worst, res_tol)
    elif np.isfinite(res.max_abs):
        report.audit("boundary_equation_max_residual", res.max_abs, res_tol)

    psi_star, phi_star = hjbmod.optimized_pair(field)
    if scenario.oracle_case:
        d_val = _pair_objective_interpolated(field, psi_star, phi_star,
                                             scenario.mu, scenario.nu)
    else:
        d_val = _pair_objective_snapped(field, psi_star, phi_star,
                                        state["mu_snap"], state["nu_snap"], state["grid"])
    report.values["D"] = d_val
    if "V" in report.values:
        report.gaps["V_vs_D"] = abs(report.values["V"] - d_val)
        gap_tol = _tol(scenario, "field_dual_gap",
                       20.0 * (grid.dx + grid.dt) * (1.0 + field.k_scale)
                       + 2.0 / max(len(scenario.mu), 1))
        report.audit("field_dual_matches_lp", report.gaps["V_vs_D"], gap_tol)

    if problem.penalty is not None and problem.penalty.kind == "power" \
            and scenario.pipeline.get("audits", True):
        diff = _fixed_horizon_gap(scenario, state, field)
        report.audit("fixed_horizon_cross_check", diff,
                     _tol(scenario, "fixed_horizon", 10.0 * grid.dx))


def _pair_objective_interpolated(field, psi_star, phi_star, mu, nu):
    lat = field.lattice
    val = 0.0
    for y, w in zip(nu.atoms, nu.weights):
        val += w * hjbmod._interp_space(psi_star, lat, y)
    for x, w in zip(mu.atoms, mu.weights):
        val -= w * hjbmod._interp_space(phi_star, lat, x)
    return val


def _pair_objective_snapped(field, psi_star, phi_star, mu_snap, nu_snap, grid):
    val = 0.0
    for y, w in zip(nu_snap.atoms, nu_snap.weights):
        val += w * psi_star[grid.nearest_index(y)]
    for x, w in zip(mu_snap.atoms, mu_snap.weights):
        val -= w * phi_star[grid.nearest_index(x)]
    return val


def _fixed_horizon_gap(scenario, state, field) -> float:
    """max |I(0, x) - J(0, x)| over source atoms, with I from the classical
    fixed-horizon solve on a sub-box sized to its domain of dependence."""
    grid = field.lattice
    g = scenario.problem.penalty
    src = scenario.mu.atoms[:, 0]
    b = float(np.abs(src).max()) + 1.0
    for _ in range(6):
        sub = _sub_lattice(grid, b)
        psi_sub = _restrict(field.psi, grid, sub)
        rmax = float(np.abs(np.gradient(psi_sub, sub.dx)).max())
        eps = 1e-9
        alpha = (g.conjugate(rmax + eps) - g.conjugate(max(rmax - eps, 0.0))) / (2 * eps)
        b_new = float(np.abs(src).max()) + 1.1 * alpha + 2 * grid.dx
        if b_new <= b + 1e-12:
            break
        b = b_new
    sub = _sub_lattice(grid, b)
    psi_sub = _restrict(field.psi, grid, sub)
    ifield = hjbmod.solve_fixed_horizon(scenario.problem, sub, psi_sub)
    if not np.all(np.isfinite(ifield.J)):
        raise FreestopError("fixed-horizon solve produced non-finite values")
    worst = 0.0
    for x in scenario.mu.atoms:
        i_val = ifield.value_at(0.0, x)
        j_val = field.value_at(0.0, x)
        worst = max(worst, abs(i_val - j_val))
    return worst


def _sub_lattice(grid: LatticeSpec, half_width: float) -> LatticeSpec:
    lo, hi = grid.box[0]
    lo_n = max(lo, -np.ceil(half_width / grid.dx) * grid.dx)
    hi_n = min(hi, np.ceil(half_width / grid.dx) * grid.dx)
    return LatticeSpec(grid.dx, grid.dt, grid.t_max, ((lo_n, hi_n),))


def _restrict(values: np.ndarray, grid: LatticeSpec, sub: LatticeSpec) -> np.ndarray:
    i0 = grid.index_of([sub.box[0][0]])[0]
    return values[i0:i0 + sub.n_axis[0]].copy()


def _stage_eulerian(scenario, state, report):
    if not scenario.pipeline.get("eulerian", True):
        return
    problem = scenario.problem
    if problem.control_set.kind != "discrete":
        report.notes.append("eulerian stage skipped: needs a discrete control set")
        return
    lat = state["flow_lattice"]
    net = eul.build_network(problem, lat, state["mu_snap"], state["nu_snap"])
    flow = eul.solve_flow(net)
    state["flow"] = flow
    report.values["W"] = flow.value
    report.audit("flow_conservation_violations", flow.conservation_violations(), 0)
    if "V" in report.values:
        report.gaps["V_vs_W"] = abs(report.values["V"] - flow.value)
        report.audit("four_way_value_agreement", report.gaps["V_vs_W"],
                     _tol(scenario, "value_gap",
                          20.0 * (lat.dx + lat.dt) * (1.0 + field_k(state))
                          + 2.0 / max(len(scenario.mu), 1)))

    if "lp" in state and scenario.pipeline.get("audits", True):
        plan_snapped = snap_plan(state["lp"].plan, lat)
        paths = paths_for_pairs(problem, lat,
                                [(plan_snapped.source.atoms[i], plan_snapped.target.atoms[j])
                                 for i, j in plan_snapped.support()])
        embedded = eul.embed_plan(problem, lat, plan_snapped, paths)
        state["embedded"] = embedded
        report.values["W_embedded_plan"] = embedded.value
        report.audit("flow_below_embedded_plan",
                     flow.value - embedded.value, 1e-6,
                     note="solved flow must not exceed the embedded plan")

    if scenario.pipeline.get("audits", True):
        # exact pair: field built from the flow's own duals
        psi_audit = eul.audit_obstacle_from_duals(flow)
        audit_field = hjbmod.solve_qvi(problem, lat, psi_audit,
                                       horizon_factor=_tol(scenario, "horizon_factor", 2.0))
        slack = eul.slackness_audit(flow, audit_field)
        report.audit("slackness_stop_violation_mass", slack.stop_violation_mass,
                     _tol(scenario, "slackness", 1e-6))
        report.audit("slackness_move_violation_mass", slack.move_violation_mass,
                     _tol(scenario, "slackness", 1e-6))
        wd = eul.weak_duality_audit(net, flow, audit_field)
        report.audit("weak_duality_exact_pair_gap", abs(wd.gap),
                     _tol(scenario, "exact_gap", 1e-6),
                     note="flow value against its own dual field")
        if "field" in state and state["field"].lattice.n_axis == lat.n_axis:
            wd2 = eul.weak_duality_audit(net, flow, state["field"])
            report.audit("weak_duality_holds", 0.0 if wd2.holds else 1.0, 0,
                         note=f"gap {wd2.gap:.4g}")
        if scenario.oracle_case:
            frac = _stop_concentration(scenario, flow)
            report.audit("stop_profile_concentration", 1.0 - frac,
                         0.05, note="mass within two layers of the barrier")


def field_k(state) -> float:
    return state["field"].k_scale if "field" in state else 1.0


def _stop_concentration(scenario, flow) -> float:
    """Smallest per-sink fraction of stop mass within two layers of the
    oracle barrier time."""
    net = flow.network
    lat = net.lattice
    worst = 1.0
    for j, idx in enumerate(net.sink_idx):
        y = lat.point_at(idx)[0]
        s_true = oracle_boundary(scenario.oracle_case, y)
        column = flow.stop[(slice(None),) + idx].astype(float)
        total = column.sum()
        if total <= 0:
            continue
        times = lat.times
        near = np.abs(times - s_true) <= 2.0 * lat.dt + 1e-12
        worst = min(worst, float(column[near].sum() / total))
    return worst


def _stage_pontryagin(scenario, state, report):
    if not scenario.pipeline.get("pontryagin", True) or "field" not in state:
        return
    problem = scenario.problem
    if problem.time_class == TIME_STATIONARY:
        report.notes.append("pontryagin stage skipped: TS has no unique end time")
        return
    field = state["field"]
    lat = field.lattice
    endpoints, taus, used_atoms, used_w, skipped = [], [], [], [], 0
    residual_worst = 0.0
    mono_ok = True
    contact_ok = True
    want = "decreasing" if problem.time_class == "TC" else "increasing"
    for x, wx in zip(scenario.mu.atoms, scenario.mu.weights):
        try:
            y, tau, traj = pmp.monge_map(problem, field, x)
        except NonDifferentiableError:
            skipped += 1
            continue
        endpoints.append(y)
        taus.append(tau)
        used_atoms.append(x)
        used_w.append(wx)
        audit = pmp.maximum_principle_audit(problem, traj)
        residual_worst = max(residual_worst, audit.max_residual)
        if audit.monotone != want:
            mono_ok = False
        if not pmp.endpoint_contact_check(field, y, tau):
            contact_ok = False
    state["monge"] = {"sources": np.array(used_atoms).reshape(-1, problem.dimension),
                      "endpoints": np.array(endpoints).reshape(-1, problem.dimension),
                      "taus": np.array(taus), "skipped": skipped}
    report.audit("pontryagin_max_principle_residual", residual_worst,
                 _tol(scenario, "pmp_residual", 1e-10))
    report.audit("hamiltonian_monotone_along_trajectories",
                 0.0 if mono_ok else 1.0, 0)
    report.audit("endpoint_contact_check", 0.0 if contact_ok else 1.0, 0)
    if skipped:
        report.notes.append(
            f"pontryagin: {skipped} atoms within one cell of a field kink "
            "were reported as non-unique and skipped")
    if endpoints and scenario.mu.dimension == 1:
        from .measures import DiscreteMeasure
        w = np.array(used_w)
        w = w / w.sum()
        image = DiscreteMeasure(np.array(endpoints).reshape(-1, 1), w)
        dist = w1_distance_1d(image, scenario.nu)
        report.audit("pushforward_w1_distance", dist,
                     _tol(scenario, "pushforward",
                          10.0 * (lat.dx + 1.0 / max(len(scenario.mu), 1))))


def _stage_oracle(scenario, state, report):
    if not scenario.oracle_case:
        return
    case = scenario.oracle_case
    g = scenario.problem.penalty
    dx = scenario.dx
    total = oracle_total_cost(case, g)
    report.values["V_oracle"] = total
    if "V" in report.values:
        report.audit("primal_value_vs_oracle", abs(report.values["V"] - total),
                     _tol(scenario, "oracle_value", 0.02))
    if "boundary" in state and not state["boundary"].stationary:
        worst = 0.0
        for y in scenario.nu.atoms:
            s = state["boundary"].at(y)
            worst = max(worst, abs(s - oracle_boundary(case, float(y[0]))))
        report.audit("boundary_vs_oracle", worst, _tol(scenario, "boundary", 3 * dx))
    if "field" in state:
        worst = 0.0
        for x in scenario.mu.atoms:
            _, j0, _ = oracle_potentials(case, g, float(x[0]), 0.0)
            worst = max(worst, abs(state["field"].value_at(0.0, x) - j0))
        report.audit("initial_value_vs_oracle", worst, _tol(scenario, "j0", 5 * dx))
    if "monge" in state:
        m = state["monge"]
        worst = 0.0
        worst_tau = 0.0
        for x, y, tau in zip(m["sources"], m["endpoints"], m["taus"]):
            if abs(float(x[0])) < 2 * dx:
                continue
            worst = max(worst, abs(float(y[0]) - oracle_monge(case, float(x[0]))))
            worst_tau = max(worst_tau, abs(tau - oracle_travel_time(case, float(x[0]))))
        report.audit("monge_endpoint_vs_oracle", worst, _tol(scenario, "monge", 5 * dx))
        report.audit("end_time_vs_oracle", worst_tau,
                     _tol(scenario, "end_time", 2 * scenario.dt))


def _emit_artifacts(scenario, state, report, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    dim = scenario.problem.dimension

    def path(name):
        p = os.path.join(output_dir, name)
        report.artifacts[name] = p
        return p

    if "lp" in state:
        sol = state["lp"]
        payload = {
            "value": sol.value,
            "plan": [[int(i), int(j), float(sol.plan.coupling[i, j])]
                     for i, j in sol.plan.support()],
            "psi": [float(v) for v in sol.potentials.psi],
            "phi": [float(v) for v in sol.potentials.phi],
        }
        with open(path("plan.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    if "field" in state:
        write_csv(path("field.csv"), field_header(dim), field_rows(state["field"]))
        emit_figures_data(scenario, state["field"], state.get("boundary"), output_dir,
                          report)
    if "boundary" in state:
        lat = state["field"].lattice
        rows = [[*lat.point_at(idx), state["boundary"].s[idx]]
                for idx in np.ndindex(*lat.n_axis)]
        write_csv(path("boundary.csv"),
                  [*[f"q{a}" for a in range(dim)], "s"], rows)
    if "flow" in state:
        flow = state["flow"]
        lat = flow.network.lattice
        from .mincostflow import MASS_SCALE
        rows = []
        for i in range(lat.nt - 1):
            for ci in range(flow.move.shape[1]):
                layer = flow.move[i, ci]
                for flat in np.flatnonzero(layer.ravel()):
                    idx = np.unravel_index(flat, lat.n_axis)
                    rows.append([i * lat.dt, *lat.point_at(idx), ci,
                                 layer[idx] / MASS_SCALE])
        write_csv(path("flow.csv"),
                  ["t", *[f"q{a}" for a in range(dim)], "A_index", "mass"], rows)
        prof = eul.stopping_distribution_profile(flow)
        write_csv(path("stops.csv"),
                  ["t", *[f"q{a}" for a in range(dim)], "mass"], prof)
    if "monge" in state:
        m = state["monge"]
        rows = [[*x, *y, tau] for x, y, tau in
                zip(m["sources"], m["endpoints"], m["taus"])]
        write_csv(path("map.csv"),
                  [*[f"x{a}" for a in range(dim)], *[f"y{a}" for a in range(dim)], "tau"],
                  rows)
    with open(path("report.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)


def emit_figures_data(scenario, field, boundary, output_dir, report=None):
    """CSV tables with the data content of the survey figures: time slices
    of J and psi, the boundary curve, and a fan of optimal trajectories."""
    if field is None:
        return []
    lat = field.lattice
    dim = lat.dimension
    made = []

    def path(name):
        p = os.path.join(output_dir, name)
        if report is not None:
            report.artifacts[name] = p
        made.append(p)
        return p

    slice_ids = np.unique(np.linspace(0, lat.nt - 1, 9).astype(int))
    rows = []
    points = lat.points()
    for i in slice_ids:
        for k in range(points.shape[0]):
            rows.append([i * lat.dt, *points[k], field.J[i].ravel()[k],
                         field.psi.ravel()[k]])
    write_csv(path("slices.csv"),
              ["t", *[f"q{a}" for a in range(dim)], "J", "psi"], rows)

    if boundary is not None and not boundary.stationary and dim == 1:
        rows = []
        for idx in np.ndindex(*lat.n_axis):
            q = lat.point_at(idx)[0]
            row = [q, boundary.s[idx]]
            if scenario.oracle_case:
                try:
                    row.append(oracle_boundary(scenario.oracle_case, q))
                except FreestopError:
                    row.append(np.nan)
            rows.append(row)
        hdr = ["q0", "s"] + (["s_oracle"] if scenario.oracle_case else [])
        write_csv(path("boundary_curve.csv"), hdr, rows)

    if scenario.problem.time_class != TIME_STATIONARY and dim == 1:
        rows = []
        fan = np.linspace(-0.45, 0.45, 13)
        for tid, x0 in enumerate(fan):
            try:
                _, tau, traj = pmp.monge_map(scenario.problem, field, [x0])
            except (NonDifferentiableError, FreestopError):
                continue
            for t, qv in zip(traj.times, traj.states):
                rows.append([tid, t, qv[0]])
        write_csv(path("trajectories.csv"), ["trajectory", "t", "q0"], rows)
    return made
