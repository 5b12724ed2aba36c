"""Closed-form ground truth for the two 1D worked scenarios.

Both move mass from the uniform density on [-1/2, 1/2] to the two-bump
density (1/2 on [-2, -1], 1/2 on [1, 2]) at unit speed, paying rate g'(t):

* case A, convex g: the map is orientation preserving, stopping is a
  hitting time of the barrier from above, s(y) = 1/2 + |y|/2;
* case B, concave g: the map is orientation reversing, stopping is an exit
  time, s(y) = -1 + 3|y|/2  (valid for |y| <= 2; negative values mean the
  node never touches the barrier).

The acceptance suite is defined against this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import FreestopError
from .measures import DiscreteMeasure, mixture, uniform_measure_1d
from .penalties import TimePenalty

CASE_CONVEX = "A"
CASE_CONCAVE = "B"

QUAD_TOL = 1e-10


@dataclass(frozen=True)
class Scenario1D:
    """A worked scenario: the penalty, its case label, and the two measures."""

    case: str
    g: TimePenalty
    n_atoms: int = 200

    def __post_init__(self):
        if self.case not in (CASE_CONVEX, CASE_CONCAVE):
            raise FreestopError(f"unknown case {self.case!r}")
        want = "power" if self.case == CASE_CONVEX else "one_minus_exp"
        if self.g.kind != want:
            raise FreestopError(
                f"case {self.case} requires a {want} penalty, got {self.g.kind}")

    def mu(self) -> DiscreteMeasure:
        return uniform_measure_1d(-0.5, 0.5, self.n_atoms)

    def nu(self) -> DiscreteMeasure:
        half = self.n_atoms // 2
        return mixture([uniform_measure_1d(-2.0, -1.0, half),
                        uniform_measure_1d(1.0, 2.0, self.n_atoms - half)],
                       [0.5, 0.5])


def oracle_monge(case: str, x: float) -> float:
    """Destination of a source point; x = 0 is the kink and is rejected."""
    if not -0.5 <= x <= 0.5:
        raise FreestopError(f"source point {x} outside [-1/2, 1/2]")
    if x == 0.0:
        raise FreestopError("x = 0 sits on the kink; the map is two-valued there")
    if case == CASE_CONVEX:
        return -1.0 + 2.0 * x if x < 0 else 1.0 + 2.0 * x
    if case == CASE_CONCAVE:
        return -2.0 - 2.0 * x if x < 0 else 2.0 - 2.0 * x
    raise FreestopError(f"unknown case {case!r}")


def oracle_travel_time(case: str, x: float) -> float:
    """Free end time of the optimal trajectory from x."""
    if case == CASE_CONVEX:
        return 1.0 + abs(x)
    if case == CASE_CONCAVE:
        return 2.0 - 3.0 * abs(x)
    raise FreestopError(f"unknown case {case!r}")


def oracle_boundary(case: str, y) -> float:
    """Stopping-time barrier s(y).

    Case B restricts to |y| <= 2, where the printed simplification of the
    barrier holds; values below 0 indicate the node never touches."""
    y = np.asarray(y, dtype=float)
    if case == CASE_CONVEX:
        out = 0.5 + 0.5 * np.abs(y)
    elif case == CASE_CONCAVE:
        if np.any(np.abs(y) > 2.0 + 1e-12):
            raise FreestopError("case B barrier formula is restricted to |y| <= 2")
        out = -1.0 + 1.5 * np.abs(y)
    else:
        raise FreestopError(f"unknown case {case!r}")
    return out if out.ndim else float(out)


def oracle_potentials(case: str, g: TimePenalty, point, t: float = 0.0):
    """(psi, J0, Jt) at a space point and time.

    Jt is evaluated from the printed continuation-region formula, valid for
    t < s(q) in case A and t > s(q) in case B; outside the region the
    request is rejected rather than patched."""
    q = float(np.asarray(point, dtype=float).reshape(()))
    aq = abs(q)
    if case == CASE_CONVEX:
        psi = 2.0 * g.value(0.5 + 0.5 * aq)
        j0 = g.value(1.0 + aq)
        s = 0.5 + 0.5 * aq
        if t >= s:
            if t > 0.0:
                raise FreestopError(f"t={t} is not below the barrier s({q})={s}")
            jt = j0
        else:
            jt = g.value(1.0 + aq - t) + g.value(t)
        return float(psi), float(j0), float(jt)
    if case == CASE_CONCAVE:
        psi = (2.0 / 3.0) * g.value(-1.0 + 1.5 * aq)
        j0 = -(1.0 / 3.0) * g.value(2.0 - 3.0 * aq)
        s = -1.0 + 1.5 * aq
        if t <= s:
            raise FreestopError(f"t={t} is not above the barrier s({q})={s}")
        jt = -(1.0 / 3.0) * g.value(2.0 - 3.0 * (aq - t)) + g.value(t)
        return float(psi), float(j0), float(jt)
    raise FreestopError(f"unknown case {case!r}")


def oracle_total_cost(case: str, g: TimePenalty) -> float:
    """Total transport cost: integral of g(travel time) over the source,
    by adaptive quadrature at 1e-10 absolute tolerance."""
    if case == CASE_CONVEX:
        val, err = quad(lambda x: g.value(1.0 + x), 0.0, 0.5, epsabs=QUAD_TOL)
    elif case == CASE_CONCAVE:
        val, err = quad(lambda x: g.value(2.0 - 3.0 * x), 0.0, 0.5, epsabs=QUAD_TOL)
    else:
        raise FreestopError(f"unknown case {case!r}")
    return 2.0 * val


def oracle_cost_identity(g: TimePenalty, x, y) -> float:
    """Point cost g(|y - x|) of the speed-limited family; shared with
    trajectory.point_cost_analytic, exposed for symmetry testing."""
    d = float(np.linalg.norm(np.asarray(y, dtype=float) - np.asarray(x, dtype=float)))
    return float(g.value(d))


def oracle_obstacle(case: str, g: TimePenalty, ys) -> np.ndarray:
    """The optimizing obstacle evaluated on node positions."""
    ys = np.abs(np.asarray(ys, dtype=float))
    if case == CASE_CONVEX:
        return 2.0 * g.value(0.5 + 0.5 * ys)
    if case == CASE_CONCAVE:
        return (2.0 / 3.0) * g.value(-1.0 + 1.5 * ys)
    raise FreestopError(f"unknown case {case!r}")


def oracle_field_tables(case: str, g: TimePenalty, ys, ts):
    """Dense (psi, J) tables over node positions and times; J takes the
    contact value where the continuation formula does not apply."""
    ys = np.asarray(ys, dtype=float)
    ts = np.asarray(ts, dtype=float)
    psi = oracle_obstacle(case, g, ys)
    s = -1.0 + 1.5 * np.abs(ys) if case == CASE_CONCAVE else 0.5 + 0.5 * np.abs(ys)
    J = np.empty((ts.size, ys.size))
    for i, t in enumerate(ts):
        if case == CASE_CONVEX:
            contact = t >= s
            cont = g.value(1.0 + np.abs(ys) - t) + g.value(t)
        else:
            contact = t <= s
            cont = -(1.0 / 3.0) * g.value(2.0 - 3.0 * (np.abs(ys) - t)) + g.value(t)
        J[i] = np.where(contact, psi, cont)
    return psi, J
