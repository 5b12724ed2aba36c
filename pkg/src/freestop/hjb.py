"""Backward marching solver for the obstacle-constrained value field.

The field J(t, q) is the largest payoff reachable from (t, q) when stopping
anywhere at the obstacle psi; it satisfies, at every grid node, either
J = psi or the marching residual of the transport step, discretely:

    J(t, q) = max( psi(q),  sup_A  J(t + dt, q + dt f(q, A)) - K(t, q, A) dt ).

Two monotone schemes sit behind one interface.  Discrete control sets use
the exact lattice recursion above (the same arcs and left-endpoint
quadrature as the trajectory DP, so the two agree path-by-path).  The unit
sphere set uses a Lax-Friedrichs numerical Hamiltonian with artificial
viscosity alpha = speed bound, under the CFL bound
dt <= cfl * dx / (alpha * n).

Time-monotonicity of the field follows the running-cost class: fields are
non-increasing in t when the cost rate grows (TC), non-decreasing when it
decays (TD), constant when stationary (TS).  Under TD a finite horizon
pollutes the last layers (the terminal condition forces J = psi), so the
solver integrates an extended horizon, checks that the reported layers have
stabilized, and returns only those.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import ControlProblem, hamiltonian
from .errors import CFLError, FreestopError, HorizonError, OffLatticeError
from .lattice import LatticeSpec
from .penalties import TIME_COMPOUNDED, TIME_DISCOUNTED, TIME_STATIONARY
from .trajectory import LatticePath

Grid = LatticeSpec  # the marcher runs on the shared space-time lattice

CFL_FACTOR = 0.5


# --- small stencil helpers --------------------------------------------------

def _gather(src: np.ndarray, shift) -> np.ndarray:
    """out[q] = src[q + shift] with -inf where q + shift leaves the grid."""
    out = np.full(src.shape, -np.inf)
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
            dst_sl.append(slice(-s, size + 0))
            src_sl.append(slice(0, size + s))
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    return out


def one_sided_differences(values: np.ndarray, dx: float, axis: int):
    """Forward and backward differences with edge replication."""
    fwd = np.empty_like(values)
    bwd = np.empty_like(values)
    sl = [slice(None)] * values.ndim

    def ax(s):
        t = list(sl)
        t[axis] = s
        return tuple(t)

    diff = np.diff(values, axis=axis) / dx
    fwd[ax(slice(0, -1))] = diff
    fwd[ax(slice(-1, None))] = diff[ax(slice(-1, None))]
    bwd[ax(slice(1, None))] = diff
    bwd[ax(slice(0, 1))] = diff[ax(slice(0, 1))]
    return fwd, bwd


def central_gradient(values: np.ndarray, lattice: LatticeSpec) -> np.ndarray:
    """Node-centered central differences, one-sided at the box edges.
    Returns shape values.shape + (n,)."""
    grads = []
    for a in range(lattice.dimension):
        fwd, bwd = one_sided_differences(values, lattice.dx, a)
        grads.append(0.5 * (fwd + bwd))
    return np.stack(grads, axis=-1)


def kink_mask(values: np.ndarray, lattice: LatticeSpec, factor: float = 10.0) -> np.ndarray:
    """Nodes adjacent to slope discontinuities of a grid function.

    A slope jump of size J leaves a second difference ~ J dx, while smooth
    curvature leaves ~ |f''| dx^2, so a node is flagged when its second
    difference along any axis exceeds factor * dx^2 (curvature beyond
    factor is treated as a kink too, which errs toward refusal); flagged
    nodes are dilated by one so stencils touching the kink are excluded.
    """
    mask = np.zeros(values.shape, dtype=bool)
    for a in range(values.ndim):
        sl = [slice(None)] * values.ndim

        def ax(s, sl=sl, a=a):
            t = list(sl)
            t[a] = s
            return tuple(t)

        d2 = np.abs(np.diff(values, n=2, axis=a))
        if d2.size == 0:
            continue
        thresh = factor * lattice.dx ** 2
        with np.errstate(invalid="ignore"):
            spike = d2 > thresh
        core = np.zeros(values.shape, dtype=bool)
        core[ax(slice(1, -1))] = spike
        # dilate one node along this axis
        grown = core.copy()
        grown[ax(slice(0, -1))] |= core[ax(slice(1, None))]
        grown[ax(slice(1, None))] |= core[ax(slice(0, -1))]
        mask |= grown
    return mask


# --- value field ------------------------------------------------------------

@dataclass
class ValueField:
    """J sampled on the space-time grid with its obstacle and tolerances.

    psi entries may be -inf to forbid stopping at a node (used when auditing
    flows against the duals of the lattice transport program).
    """

    lattice: LatticeSpec
    J: np.ndarray
    psi: np.ndarray
    time_class: str
    scheme: str
    eps_contact: float
    eps_mono: float
    k_scale: float = 1.0   # max running cost seen on the grid

    @property
    def contact_mask(self) -> np.ndarray:
        finite = np.isfinite(self.psi)
        gap = np.where(finite[None, ...], self.J - self.psi[None, ...], np.inf)
        return gap <= self.eps_contact

    def value_at(self, t: float, point) -> float:
        """Bilinear (multilinear in space, linear in time) interpolation."""
        lat = self.lattice
        r = t / lat.dt
        i0 = int(np.clip(np.floor(r), 0, lat.nt - 2)) if lat.nt > 1 else 0
        wt = r - i0
        if not -1e-9 <= wt <= 1 + 1e-9 or not 0 <= t <= lat.t_max + 1e-9:
            raise OffLatticeError(f"time {t} outside the grid")
        wt = min(max(wt, 0.0), 1.0)
        v0 = _interp_space(self.J[i0], lat, point)
        v1 = _interp_space(self.J[min(i0 + 1, lat.nt - 1)], lat, point)
        return (1.0 - wt) * v0 + wt * v1

    def psi_at(self, point) -> float:
        return _interp_space(self.psi, self.lattice, point)

    def obstacle_violation(self) -> float:
        """max(psi - J) over nodes with finite psi; <= eps_contact holds."""
        finite = np.isfinite(self.psi)
        if not np.any(finite):
            return 0.0
        return float((self.psi[None, ...] - self.J)[:, finite].max())

    def monotonicity_violation(self) -> float:
        """Worst signed violation of the time-class monotonicity across layers."""
        d = np.diff(self.J, axis=0)
        finite = np.isfinite(d)
        if self.time_class == TIME_COMPOUNDED:
            v = d[finite]            # needs <= 0
            return float(v.max()) if v.size else 0.0
        if self.time_class == TIME_DISCOUNTED:
            v = -d[finite]           # needs >= 0
            return float(v.max()) if v.size else 0.0
        gap = self.J - self.psi[None, ...]
        return float(np.abs(gap[np.isfinite(gap)]).max())


def _interp_space(layer: np.ndarray, lattice: LatticeSpec, point) -> float:
    p = np.asarray(point, dtype=float).reshape(lattice.dimension)
    idx0, w = [], []
    for a in range(lattice.dimension):
        r = (p[a] - lattice.box[a][0]) / lattice.dx
        if r < -1e-9 or r > lattice.n_axis[a] - 1 + 1e-9:
            raise OffLatticeError(f"point {p} outside the grid box")
        i = int(np.clip(np.floor(r), 0, lattice.n_axis[a] - 2)) if lattice.n_axis[a] > 1 else 0
        idx0.append(i)
        w.append(min(max(r - i, 0.0), 1.0))
    val = 0.0
    for corner in range(1 << lattice.dimension):
        weight, idx = 1.0, []
        for a in range(lattice.dimension):
            if corner >> a & 1:
                weight *= w[a]
                idx.append(min(idx0[a] + 1, lattice.n_axis[a] - 1))
            else:
                weight *= 1.0 - w[a]
                idx.append(idx0[a])
        if weight:
            val += weight * float(layer[tuple(idx)])
    return val


# --- tolerances -------------------------------------------------------------

def _max_running_cost(problem: ControlProblem, lattice: LatticeSpec) -> float:
    center = np.array([(lo + hi) / 2 for lo, hi in lattice.box]).reshape(1, -1)
    ts = np.linspace(0.0, lattice.t_max, 65)
    if problem.control_set.kind == "discrete":
        controls = problem.control_set.vectors
    else:
        controls = [None]
    worst = 0.0
    for a in controls:
        for t in ts:
            worst = max(worst, float(np.max(problem.running_cost(t, center, a))))
    return worst


def scheme_tolerances(problem: ControlProblem, lattice: LatticeSpec, psi, scheme: str):
    finite = np.isfinite(psi)
    psi_scale = float(np.abs(psi[finite]).max()) if np.any(finite) else 0.0
    if scheme == "dp":
        return 1e-9 * (1.0 + psi_scale), 1e-9
    k_max = _max_running_cost(problem, lattice)
    return 2.0 * lattice.dt * k_max, 5.0 * lattice.dt * k_max


# --- the two marching schemes ----------------------------------------------

def _march_dp(problem: ControlProblem, lattice: LatticeSpec, psi: np.ndarray) -> np.ndarray:
    shifts = lattice.control_shifts(problem)
    points = lattice.points()
    shape = lattice.n_axis
    J = np.empty((lattice.nt,) + shape)
    J[-1] = psi
    for i in range(lattice.nt - 2, -1, -1):
        t = i * lattice.dt
        cont = np.full(shape, -np.inf)
        for ci in range(shifts.shape[0]):
            a = problem.control_set.vectors[ci]
            step_cost = np.asarray(problem.running_cost(t, points, a),
                                   dtype=float).reshape(shape) * lattice.dt
            cand = _gather(J[i + 1], shifts[ci]) - step_cost
            np.maximum(cont, cand, out=cont)
        J[i] = np.maximum(psi, cont)
    return J


def _march_lf(problem: ControlProblem, lattice: LatticeSpec, psi: np.ndarray,
              cfl_factor: float = CFL_FACTOR) -> np.ndarray:
    if not (problem.velocity_is_control and problem.cost_is_time_only):
        raise FreestopError("LF marching requires the f(q,A)=A, K=K(t) structure")
    n = lattice.dimension
    alpha = problem.speed_bound
    if lattice.dt > cfl_factor * lattice.dx / (alpha * n) + 1e-12:
        raise CFLError(
            f"dt={lattice.dt} violates dt <= {cfl_factor} dx / (alpha n) "
            f"= {cfl_factor * lattice.dx / (alpha * n)}")
    center = np.zeros((1, n))
    shape = lattice.n_axis
    J = np.empty((lattice.nt,) + shape)
    J[-1] = psi
    for i in range(lattice.nt - 2, -1, -1):
        t = i * lattice.dt
        k = float(np.max(problem.running_cost(t, center, None)))
        prev = J[i + 1]
        sq = np.zeros(shape)
        visc = np.zeros(shape)
        for a in range(n):
            fwd, bwd = one_sided_differences(prev, lattice.dx, a)
            sq += (0.5 * (fwd + bwd)) ** 2
            visc += 0.5 * alpha * (fwd - bwd)
        # backward marching flips the usual LF dissipation sign: the update
        # J(t-dt) = J(t) + dt H needs + (alpha/2)(D+ - D-) to stay monotone
        h_num = np.sqrt(sq) - k + visc
        J[i] = np.maximum(psi, prev + lattice.dt * h_num)
    return J


def solve_qvi(problem: ControlProblem, grid: LatticeSpec, psi,
              horizon_factor: float = 2.0, eps_horizon: float = None,
              cfl_factor: float = CFL_FACTOR) -> ValueField:
    """Backward obstacle-projected marching for the value field.

    Terminal layer is the obstacle; each backward step advances the scheme
    and projects onto J >= psi.  Under TD the solve runs to
    horizon_factor * t_max, the reported layers are checked against the
    plain-horizon solve (stabilization within eps_horizon at t = 0), and the
    extended solve's first layers are returned so they are free of
    end-of-horizon artifacts.
    """
    psi = np.asarray(psi, dtype=float).reshape(grid.n_axis)
    scheme = "dp" if problem.control_set.kind == "discrete" else "lf"
    march = _march_dp if scheme == "dp" else \
        (lambda pr, la, ps: _march_lf(pr, la, ps, cfl_factor))

    if problem.time_class == TIME_DISCOUNTED:
        extended = LatticeSpec(grid.dx, grid.dt, grid.t_max * horizon_factor, grid.box)
        J_ext = march(problem, extended, psi)
        J_plain = march(problem, grid, psi)
        if eps_horizon is None:
            finite = np.isfinite(psi)
            scale = float(np.abs(psi[finite]).max()) if np.any(finite) else 0.0
            eps_horizon = 1e-6 * (1.0 + scale)
        drift = np.abs(J_ext[0] - J_plain[0])
        drift = drift[np.isfinite(drift)]
        worst = float(drift.max()) if drift.size else 0.0
        if worst > eps_horizon:
            raise HorizonError(
                f"TD horizon not stabilized: layer-0 drift {worst:.3e} "
                f"exceeds {eps_horizon:.3e}; increase t_max")
        J = J_ext[:grid.nt].copy()
    else:
        J = march(problem, grid, psi)

    eps_contact, eps_mono = scheme_tolerances(problem, grid, psi, scheme)
    return ValueField(lattice=grid, J=J, psi=psi, time_class=problem.time_class,
                      scheme=scheme, eps_contact=eps_contact, eps_mono=eps_mono,
                      k_scale=_max_running_cost(problem, grid))


# --- free boundary ----------------------------------------------------------

@dataclass
class FreeBoundary:
    """Per-node stopping time extracted from the contact set.

    s holds a time value per space node, +inf where the node never touches
    the obstacle.  stationary is set for TS fields, where the boundary is
    undefined (everything is contact) and s is reported as 0.
    """

    lattice: LatticeSpec
    s: np.ndarray
    stationary: bool = False

    def at(self, point) -> float:
        return float(self.s[self.lattice.nearest_index(point)])


def extract_free_boundary(field: ValueField, time_class: str = None) -> FreeBoundary:
    """First (TC) or last (TD) contact time per space node."""
    tc = time_class or field.time_class
    lat = field.lattice
    mask = field.contact_mask
    if tc == TIME_STATIONARY:
        return FreeBoundary(lat, np.zeros(lat.n_axis), stationary=True)
    any_contact = mask.any(axis=0)
    s = np.full(lat.n_axis, np.inf)
    if tc == TIME_COMPOUNDED:
        idx = mask.argmax(axis=0)
    else:
        idx = lat.nt - 1 - mask[::-1].argmax(axis=0)
    s[any_contact] = idx[any_contact] * lat.dt
    return FreeBoundary(lat, s)


def contact_closure_violations(field: ValueField) -> int:
    """Nodes breaking the one-sided closure of the contact set.

    TC: contact at t must imply contact at every later time.
    TD: contact at t must imply contact at every earlier time.
    """
    mask = field.contact_mask
    if field.time_class == TIME_COMPOUNDED:
        return int(np.count_nonzero(mask[:-1] & ~mask[1:]))
    if field.time_class == TIME_DISCOUNTED:
        return int(np.count_nonzero(~mask[:-1] & mask[1:]))
    return int(np.count_nonzero(~mask))


# --- dual pair, residuals, path inequality ----------------------------------

def optimized_pair(field: ValueField):
    """(psi*, phi*) = (min over time of J, J at time 0)."""
    return field.J.min(axis=0), field.J[0].copy()


@dataclass
class BoundaryResidualReport:
    residual: np.ndarray      # H(s(q), q, grad psi(q)) per node, nan when excluded
    excluded: np.ndarray      # kink-adjacent or boundary-less nodes
    max_abs: float


def boundary_equation_residual(problem: ControlProblem, field: ValueField,
                               boundary: FreeBoundary, psi_gradient=None) -> BoundaryResidualReport:
    """Residual of the boundary compatibility H(s(q), q, grad psi(q)) = 0.

    Gradient by central differences; nodes adjacent to detected kinks of psi
    are excluded and reported.  For TS fields the residual is -H(q, grad psi)
    which is only required to be >= 0 (supersolution side).
    """
    lat = field.lattice
    psi = field.psi
    if psi_gradient is None:
        grad = central_gradient(psi, lat)
    else:
        grad = np.asarray(psi_gradient, dtype=float)
    excluded = kink_mask(psi, lat)
    # the compatibility equation holds where the stopping time is strictly
    # interior; s = 0 or s = t_max nodes are horizon/box truncation artifacts
    res = np.full(lat.n_axis, np.nan)
    it = np.nditer(np.zeros(lat.n_axis), flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        if excluded[idx]:
            continue
        if field.time_class == TIME_STATIONARY:
            s_here = 0.0
        else:
            s_here = boundary.s[idx]
            if not np.isfinite(s_here) or not 0.0 < s_here < lat.t_max:
                excluded[idx] = True
                continue
        q = lat.point_at(idx)
        h = hamiltonian(problem, float(s_here), q, grad[idx])
        res[idx] = -h if field.time_class == TIME_STATIONARY else h
    finite = np.isfinite(res)
    max_abs = float(np.abs(res[finite]).max()) if np.any(finite) else np.nan
    return BoundaryResidualReport(residual=res, excluded=excluded, max_abs=max_abs)


def solve_fixed_horizon(problem: ControlProblem, grid: LatticeSpec, psi,
                        t_end: float = 1.0, dt: float = None,
                        cfl_factor: float = CFL_FACTOR) -> ValueField:
    """Classical (no obstacle) backward HJ solve with the conjugate
    Hamiltonian g*(|p|) on [0, t_end], terminal layer psi.

    Used for the fixed-horizon cross-check against the free-end-time field:
    both yield the same initial layer for convex g.  The time step defaults
    to the largest CFL-stable value; passing a larger one raises CFLError.
    """
    if problem.penalty is None or problem.penalty.kind != "power":
        raise FreestopError("fixed-horizon solve requires the convex power penalty")
    g = problem.penalty
    psi = np.asarray(psi, dtype=float).reshape(grid.n_axis)
    n = grid.dimension
    # characteristic speed bound from the terminal slope range
    rmax = 0.0
    for a in range(n):
        fwd, bwd = one_sided_differences(psi, grid.dx, a)
        rmax = max(rmax, float(np.abs(fwd).max()), float(np.abs(bwd).max()))
    rmax *= np.sqrt(n)
    eps = 1e-12
    alpha = max((g.conjugate(rmax + eps) - g.conjugate(rmax)) / eps, 1e-6) * 1.05
    dt_stable = cfl_factor * grid.dx / (alpha * n)
    if dt is None:
        steps = int(np.ceil(t_end / dt_stable))
        dt = t_end / steps
    else:
        steps = int(round(t_end / dt))
        if abs(steps * dt - t_end) > 1e-9 or dt > dt_stable + 1e-12:
            raise CFLError(f"dt={dt} unstable or does not divide t_end (need <= {dt_stable})")
    J = np.empty((steps + 1,) + grid.n_axis)
    J[-1] = psi
    for i in range(steps - 1, -1, -1):
        prev = J[i + 1]
        sq = np.zeros(grid.n_axis)
        visc = np.zeros(grid.n_axis)
        for a in range(n):
            fwd, bwd = one_sided_differences(prev, grid.dx, a)
            sq += (0.5 * (fwd + bwd)) ** 2
            visc += 0.5 * alpha * (fwd - bwd)
        J[i] = prev + dt * (g.conjugate(np.sqrt(sq)) + visc)
    horizon = LatticeSpec(grid.dx, dt, t_end, grid.box)
    return ValueField(lattice=horizon, J=J, psi=psi, time_class=problem.time_class,
                      scheme="lf", eps_contact=2.0 * dt, eps_mono=5.0 * dt,
                      k_scale=max(float(g.conjugate(rmax)), 1.0))


def path_inequality_check(problem: ControlProblem, field: ValueField,
                          path: LatticePath, tol: float = None) -> bool:
    """True iff J gains no more than the accumulated running cost along
    every sub-segment of the lattice path."""
    lat = field.lattice
    if tol is None:
        tol = max(field.eps_mono, 1e-9 * (1.0 + float(np.abs(field.J[np.isfinite(field.J)]).max())))
    k = path.n_steps
    for step in range(k):
        t0 = float(path.times[step])
        i0 = lat.time_index(t0)
        i1 = lat.time_index(float(path.times[step + 1]))
        q0 = lat.index_of(path.points[step])
        q1 = lat.index_of(path.points[step + 1])
        j0 = field.J[(i0,) + q0]
        j1 = field.J[(i1,) + q1]
        kcost = float(np.asarray(problem.running_cost(
            t0, path.points[step].reshape(1, -1), path.controls[step])).reshape(())) * lat.dt
        if j1 - j0 > kcost + tol:
            return False
    return True


def qvi_complementarity_violations(problem: ControlProblem, field: ValueField):
    """Count interior nodes where neither J = psi nor the DP step is tight.

    Only meaningful for the lattice DP scheme, whose backward step is exact.
    Returns (violations, worst_scheme_residual_on_continuation_nodes).
    """
    if field.scheme != "dp":
        raise FreestopError("complementarity check applies to the DP scheme")
    lat = field.lattice
    shifts = lat.control_shifts(problem)
    points = lat.points()
    shape = lat.n_axis
    violations = 0
    worst = 0.0
    for i in range(lat.nt - 1):
        t = i * lat.dt
        cont = np.full(shape, -np.inf)
        for ci in range(shifts.shape[0]):
            a = problem.control_set.vectors[ci]
            step_cost = np.asarray(problem.running_cost(t, points, a),
                                   dtype=float).reshape(shape) * lat.dt
            np.maximum(cont, _gather(field.J[i + 1], shifts[ci]) - step_cost, out=cont)
        on_obstacle = field.J[i] - field.psi <= field.eps_contact
        residual = np.abs(field.J[i] - cont)
        off = ~on_obstacle & np.isfinite(residual)
        if np.any(off):
            worst = max(worst, float(residual[off].max()))
            violations += int(np.count_nonzero(residual[off] > 1e-9 * (1.0 + np.abs(field.J[i][off]))))
    return violations, worst
