"""Command line interface: scenario-driven solver runs emitting CSV/JSON.

Subcommands: cost, plan, hjb, monge, eulerian, oracle, verify.  Scenario
files are JSON; all numeric output prints with 17 significant digits so runs
are reproducible byte-for-byte.  FREESTOP_THREADS caps intra-stage
parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import eulerian as eul
from . import hjb as hjbmod
from . import pipeline as pl
from . import pontryagin as pmp
from .errors import FreestopError, NonDifferentiableError
from .kantorovich import solve_primal_dual
from .measures import snap_to_grid
from .oracle1d import oracle_boundary, oracle_field_tables, oracle_obstacle
from .penalties import TimePenalty
from .scenario import Scenario
from .tableio import field_header, field_rows, parse_field_csv, read_csv, write_csv
from .trajectory import cost_matrix, point_cost_analytic, point_cost_lattice


def _load_scenario(args) -> Scenario:
    return Scenario.load(args.scenario)


def cmd_cost(args) -> int:
    scenario = _load_scenario(args)
    header, pairs = read_csv(args.pairs)
    n = scenario.problem.dimension
    if pairs.shape[1] != 2 * n:
        raise FreestopError(f"pairs file must have {2 * n} coordinate columns")
    rows = []
    lattice = scenario.grid() if args.method == "lattice" else None
    for row in pairs:
        x, y = row[:n], row[n:]
        if lattice is None:
            c = point_cost_analytic(scenario.problem, x, y)
        else:
            c, _ = point_cost_lattice(scenario.problem, lattice, x, y)
        rows.append([*x, *y, c])
    write_csv(args.out, [*[f"x{a}" for a in range(n)],
                         *[f"y{a}" for a in range(n)], "c"], rows)
    return 0


def cmd_plan(args) -> int:
    scenario = _load_scenario(args)
    cm = cost_matrix(scenario.problem, None, scenario.mu.atoms, scenario.nu.atoms)
    sol = solve_primal_dual(cm, scenario.mu, scenario.nu)
    payload = {
        "value": sol.value,
        "plan": [[int(i), int(j), float(sol.plan.coupling[i, j])]
                 for i, j in sol.plan.support()],
        "psi": [float(v) for v in sol.potentials.psi],
        "phi": [float(v) for v in sol.potentials.phi],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return 0


def _solve_field(scenario):
    grid = scenario.validate()
    if scenario.oracle_case:
        nodes = grid.points()[:, 0].reshape(grid.n_axis)
        psi = oracle_obstacle(scenario.oracle_case, scenario.problem.penalty, nodes)
    else:
        cm = cost_matrix(scenario.problem, None, scenario.mu.atoms, scenario.nu.atoms)
        sol = solve_primal_dual(cm, scenario.mu, scenario.nu)
        psi = np.full(grid.n_axis, -np.inf)
        for y, val in zip(scenario.nu.atoms, sol.potentials.psi):
            idx = grid.nearest_index(y)
            psi[idx] = max(psi[idx], val)
    return grid, hjbmod.solve_qvi(scenario.problem, grid, psi)


def cmd_hjb(args) -> int:
    scenario = _load_scenario(args)
    grid, field = _solve_field(scenario)
    write_csv(args.out, field_header(grid.dimension), field_rows(field))
    boundary = hjbmod.extract_free_boundary(field)
    rows = [[*grid.point_at(idx), boundary.s[idx]] for idx in np.ndindex(*grid.n_axis)]
    write_csv(args.boundary, [*[f"q{a}" for a in range(grid.dimension)], "s"], rows)
    return 0


def cmd_monge(args) -> int:
    scenario = _load_scenario(args)
    if args.field and os.path.exists(args.field):
        field = parse_field_csv(args.field, scenario.problem)
    else:
        _, field = _solve_field(scenario)
    n = scenario.problem.dimension
    rows = []
    for x in scenario.mu.atoms:
        try:
            y, tau, traj = pmp.monge_map(scenario.problem, field, x)
        except (NonDifferentiableError, FreestopError) as exc:
            print(f"skipping atom {x}: {exc}", file=sys.stderr)
            continue
        rows.append([*x, *y, tau, *traj.costates[0]])
    write_csv(args.out, [*[f"x{a}" for a in range(n)],
                         *[f"y{a}" for a in range(n)], "tau",
                         *[f"p0_{a}" for a in range(n)]], rows)
    return 0


def cmd_eulerian(args) -> int:
    scenario = _load_scenario(args)
    lat = scenario.flow_lattice()
    mu_s = snap_to_grid(scenario.mu, lat)
    nu_s = snap_to_grid(scenario.nu, lat)
    net = eul.build_network(scenario.problem, lat, mu_s, nu_s)
    flow = eul.solve_flow(net)
    from .mincostflow import MASS_SCALE
    rows = []
    for i in range(lat.nt - 1):
        for ci in range(flow.move.shape[1]):
            layer = flow.move[i, ci]
            for flat in np.flatnonzero(layer.ravel()):
                idx = np.unravel_index(flat, lat.n_axis)
                rows.append([i * lat.dt, *lat.point_at(idx), ci, layer[idx] / MASS_SCALE])
    d = lat.dimension
    write_csv(args.out, ["t", *[f"q{a}" for a in range(d)], "A_index", "mass"], rows)
    write_csv(args.stops, ["t", *[f"q{a}" for a in range(d)], "mass"],
              eul.stopping_distribution_profile(flow))
    print(f"W = {flow.value:.17g}")
    return 0


def cmd_oracle(args) -> int:
    kind, _, param = args.g.partition(":")
    if kind == "power":
        g = TimePenalty("power", exponent=float(param or 2.0))
    elif kind == "one_minus_exp":
        g = TimePenalty("one_minus_exp", rate=float(param or 1.0))
    elif kind == "linear":
        g = TimePenalty("linear")
    else:
        raise FreestopError(f"unknown penalty spec {args.g!r}")
    ys = np.linspace(-args.half_width, args.half_width, args.nodes)
    ts = np.linspace(0.0, args.t_max, args.time_slices)
    psi, J = oracle_field_tables(args.case, g, ys, ts)
    rows = []
    for i, t in enumerate(ts):
        for j, y in enumerate(ys):
            s = oracle_boundary(args.case, y) if abs(y) <= 2.0 else np.nan
            rows.append([t, y, J[i, j], psi[j], s])
    write_csv(args.table, ["t", "y", "J", "psi", "s"], rows)
    return 0


def cmd_verify(args) -> int:
    scenario = _load_scenario(args)
    report = pl.run(scenario, output_dir=args.out)
    print(json.dumps(report.to_json(), indent=1, sort_keys=True))
    if report.failed_stage is not None:
        print(f"FAILED at stage {report.error}", file=sys.stderr)
        return 2
    return 0 if report.all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freestop",
        description="solvers for transport with controlled dynamics and free end times")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="point costs for a list of (x, y) pairs")
    p.add_argument("--scenario", required=True)
    p.add_argument("--pairs", required=True, help="CSV with columns x..., y...")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["analytic", "lattice"], default="analytic")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("plan", help="optimal plan and dual potentials")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("hjb", help="obstacle value field and free boundary")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--boundary", required=True)
    p.set_defaults(fn=cmd_hjb)

    p = sub.add_parser("monge", help="flow-based transport map per source atom")
    p.add_argument("--scenario", required=True)
    p.add_argument("--field", default=None, help="field.csv from the hjb subcommand")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_monge)

    p = sub.add_parser("eulerian", help="min-cost density flow and stop distribution")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stops", required=True)
    p.set_defaults(fn=cmd_eulerian)

    p = sub.add_parser("oracle", help="closed-form tables for the worked scenarios")
    p.add_argument("--case", choices=["A", "B"], required=True)
    p.add_argument("--g", required=True, help="power:2 | one_minus_exp:1 | linear")
    p.add_argument("--table", required=True)
    p.add_argument("--half-width", type=float, default=3.0)
    p.add_argument("--nodes", type=int, default=193)
    p.add_argument("--t-max", type=float, default=3.0)
    p.add_argument("--time-slices", type=int, default=9)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("verify", help="full pipeline with the verification report")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default=None, help="artifact directory")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FreestopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
