"""Hamiltonian trajectories, free end times, and the induced Monge map.

The flow integrates the state/costate pair

    dgamma/dt = f(gamma, A*),      dp/dt = -p^T grad_q f + grad_q K,

with A* the control maximizing p . f - K at the current sample (explicit
midpoint steps, control held over the step).  The free end time is the zero
crossing of t -> H(t, gamma(t), p(t)), unique for TC/TD running costs since
H is strictly monotone along optimal trajectories.  The Monge map sends a
source atom x along the flow started with the field gradient at (0, x) and
stops it at the transversality time.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .control import ControlProblem, hamiltonian, unique_argmax_control
from .errors import (ControlTieError, FreestopError, NonDifferentiableError,
                     TransversalityError)
from .hjb import ValueField, central_gradient, kink_mask
from .penalties import TIME_STATIONARY

BISECTION_TOL = 1e-10


@dataclass
class HamiltonianTrajectory:
    """Sampled state, costate, and realized control along one trajectory."""

    times: np.ndarray      # (m,)
    states: np.ndarray     # (m, n)
    costates: np.ndarray   # (m, n)
    controls: np.ndarray   # (m, n): control used on [t_k, t_{k+1}), last repeated

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def hamiltonian_values(self, problem: ControlProblem) -> np.ndarray:
        return np.array([hamiltonian(problem, t, q, p) for t, q, p
                         in zip(self.times, self.states, self.costates)])


def _rhs(problem: ControlProblem, t: float, gamma: np.ndarray, p: np.ndarray,
         control: np.ndarray):
    qb = gamma.reshape(1, -1)
    dq = np.asarray(problem.velocity(qb, control), dtype=float).reshape(-1)
    if problem.velocity_jacobian is None or problem.cost_gradient_q is None:
        raise FreestopError("flow integration needs velocity_jacobian and cost_gradient_q")
    jac = np.asarray(problem.velocity_jacobian(gamma, control), dtype=float)
    gk = np.asarray(problem.cost_gradient_q(t, gamma, control), dtype=float).reshape(-1)
    dp = -p @ jac + gk
    return dq, dp


def _step(problem: ControlProblem, t: float, gamma, p, h: float):
    """One explicit-midpoint step; the maximizing control is sampled at the
    step start and held."""
    control = unique_argmax_control(problem, t, gamma, p)
    k1q, k1p = _rhs(problem, t, gamma, p, control)
    gm, pm = gamma + 0.5 * h * k1q, p + 0.5 * h * k1p
    k2q, k2p = _rhs(problem, t + 0.5 * h, gm, pm, control)
    return gamma + h * k2q, p + h * k2p, control


def integrate_flow(problem: ControlProblem, t1: float, t2: float, q, beta,
                   step: float = None) -> HamiltonianTrajectory:
    """Hamiltonian flow from (t1, q, beta) to time t2 (backward if t2 < t1).

    A tie in the maximizing control (p = 0 for the symmetric families) is
    flagged as ControlTieError rather than resolved silently.
    """
    q = np.asarray(q, dtype=float).reshape(problem.dimension)
    p = np.asarray(beta, dtype=float).reshape(problem.dimension)
    if step is None:
        step = abs(t2 - t1) / 128 if t2 != t1 else 1.0
    n_steps = max(int(round(abs(t2 - t1) / step)), 0)
    h = (t2 - t1) / n_steps if n_steps else 0.0
    times = [t1]
    states = [q.copy()]
    costates = [p.copy()]
    controls = []
    for k in range(n_steps):
        t = t1 + k * h
        q, p, control = _step(problem, t, q, p, h)
        times.append(t1 + (k + 1) * h)
        states.append(q.copy())
        costates.append(p.copy())
        controls.append(np.asarray(control, dtype=float))
    if controls:
        controls.append(controls[-1])
    else:
        controls.append(np.asarray(unique_argmax_control(problem, t1, q, p), dtype=float))
    return HamiltonianTrajectory(np.array(times), np.array(states),
                                 np.array(costates), np.array(controls))


def transversality_time(problem: ControlProblem, q, beta, t_start: float = 0.0,
                        t_max: float = 10.0, step: float = None) -> float:
    """The unique time where H(t, gamma(t), p(t)) crosses zero.

    H is strictly monotone along the trajectory for TC/TD costs, so one sign
    change is bracketed by sampling at the integrator resolution and then
    refined by bisection to 1e-10.  TS costs keep H constant and admit no
    unique crossing.
    """
    if problem.time_class == TIME_STATIONARY:
        raise TransversalityError("H is constant along TS trajectories; no unique crossing")
    if step is None:
        step = (t_max - t_start) / 512
    q = np.asarray(q, dtype=float).reshape(problem.dimension)
    p = np.asarray(beta, dtype=float).reshape(problem.dimension)
    t = t_start
    h_here = hamiltonian(problem, t, q, p)
    if h_here == 0.0:
        return t
    while t < t_max - 1e-15:
        h_step = min(step, t_max - t)
        q_next, p_next, _ = _step(problem, t, q, p, h_step)
        h_next = hamiltonian(problem, t + h_step, q_next, p_next)
        if h_here == 0.0:
            return t
        if np.sign(h_next) != np.sign(h_here):
            # bisect inside [t, t + h_step], advancing from the bracket start
            lo, hi = 0.0, h_step
            f_lo = h_here
            while hi - lo > BISECTION_TOL:
                mid = 0.5 * (lo + hi)
                qm, pm, _ = _step(problem, t, q, p, mid)
                f_mid = hamiltonian(problem, t + mid, qm, pm)
                if f_mid == 0.0:
                    return t + mid
                if np.sign(f_mid) == np.sign(f_lo):
                    lo, f_lo = mid, f_mid
                else:
                    hi = mid
            return t + 0.5 * (lo + hi)
        t, q, p, h_here = t + h_step, q_next, p_next, h_next
    raise TransversalityError(f"no transversality time in [{t_start}, {t_max}]")


def gradient_at(field: ValueField, point, layer: int = 0):
    """Interpolated central-difference gradient of J(layer dt, .) at a point.

    Atoms within one cell of a detected kink raise NonDifferentiableError:
    multiple optimal trajectories emanate there and no single gradient is
    meaningful.
    """
    lat = field.lattice
    values = field.J[layer]
    kinks = kink_mask(values, lat)   # kink node plus one-node dilation
    idx = lat.nearest_index(point)
    if kinks[idx]:
        raise NonDifferentiableError(
            f"non-unique trajectory: {np.asarray(point).ravel()} is within one "
            "cell of a kink of the value field")
    grads = central_gradient(values, lat)
    return np.array([_interp_component(grads[..., a], lat, point)
                     for a in range(lat.dimension)])


def _interp_component(layer, lat, point):
    from .hjb import _interp_space
    return _interp_space(layer, lat, point)


def monge_map(problem: ControlProblem, field: ValueField, x, t_max: float = None):
    """Transport destination of a source atom under the Hamiltonian flow.

    Starts the flow at (0, x) with costate grad J(0, x) read off the field,
    stops it at the transversality time, and returns (y, tau, trajectory).
    """
    lat = field.lattice
    if t_max is None:
        t_max = lat.t_max
    beta = gradient_at(field, x, layer=0)
    tau = transversality_time(problem, x, beta, 0.0, t_max, step=lat.dt)
    traj = integrate_flow(problem, 0.0, tau, x, beta, step=lat.dt)
    return traj.endpoint, tau, traj


@dataclass
class MaximumPrincipleReport:
    max_residual: float
    times: np.ndarray
    hamiltonian_profile: np.ndarray
    monotone: str                  # "decreasing" / "increasing" / "constant" / "none"
    growth_hypothesis_verified: bool = dataclass_field(default=False)
    note: str = ("near-linear growth of H in p is not verified for this family; "
                 "the map construction does not rely on it")


def maximum_principle_audit(problem: ControlProblem, trajectory: HamiltonianTrajectory,
                            strict_tol: float = 1e-12) -> MaximumPrincipleReport:
    """Residual of H against the realized control's payoff, per sample, plus
    the monotonicity profile of H along the trajectory."""
    ts = trajectory.times
    hs = trajectory.hamiltonian_values(problem)
    residuals = []
    for t, qv, pv, av in zip(ts, trajectory.states, trajectory.costates,
                             trajectory.controls):
        qb = qv.reshape(1, -1)
        payoff = float(pv @ np.asarray(problem.velocity(qb, av)).reshape(-1)) \
            - float(np.asarray(problem.running_cost(t, qb, av)).reshape(()))
        residuals.append(hamiltonian(problem, t, qv, pv) - payoff)
    residuals = np.array(residuals)
    d = np.diff(hs)
    if d.size == 0:
        monotone = "constant"
    elif np.all(d < 0.0):
        monotone = "decreasing"
    elif np.all(d > 0.0):
        monotone = "increasing"
    elif np.allclose(d, 0.0, atol=strict_tol):
        monotone = "constant"
    else:
        monotone = "none"
    return MaximumPrincipleReport(max_residual=float(np.abs(residuals).max()),
                                  times=ts, hamiltonian_profile=hs, monotone=monotone)


def endpoint_contact_check(field: ValueField, y, tau: float, tol: float = None) -> bool:
    """True iff the field touches its obstacle at the stopped endpoint.

    J is interpolated multilinearly, which carries scheme-scale error next to
    the contact interface, so the default tolerance is the scheme-truncation
    one (2 dt max K) rather than the node-exact DP epsilon.
    """
    if tol is None:
        tol = max(field.eps_contact, 2.0 * field.lattice.dt * field.k_scale)
    j = field.value_at(tau, y)
    psi = field.psi_at(y)
    return abs(j - psi) <= tol
