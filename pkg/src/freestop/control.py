"""Controlled dynamics, running cost, and the control Hamiltonian.

A control problem is the tuple (control set, velocity f(q, A), running cost
K(t, q, A)).  Its Hamiltonian in the costate variable p is

    H(t, q, p) = sup_A  p . f(q, A) - K(t, q, A),

an exact max for a finite control set, and |p| - K(t, q) in closed form for
the unit-sphere set with f(q, A) = A and A-independent K.

Analytic problems cross the scenario/CLI boundary only through the registry
of named family constructors at the bottom of this module; inside Python,
arbitrary callables are accepted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ControlTieError, FreestopError
from .penalties import TIME_COMPOUNDED, TIME_DISCOUNTED, TIME_STATIONARY, TimePenalty

#: Marker returned by argmax_control / hamiltonian_p_slope for the
#: unit-sphere set at p = 0, where every direction maximizes.
WHOLE_SPHERE = "whole-sphere"

_TIME_CLASSES = (TIME_STATIONARY, TIME_COMPOUNDED, TIME_DISCOUNTED)


def _positive_span_fills_space(vectors: np.ndarray) -> bool:
    """True iff the conic hull of the rows is all of R^n.

    Equivalent to 0 lying in the interior of the convex hull of the rows.
    Exact for n <= 2; for higher dimensions a dense direction sample is used
    (the data model supports n > 2 but nothing in the suite exercises it).
    """
    m, n = vectors.shape
    if np.linalg.matrix_rank(vectors) < n:
        return False
    if n == 1:
        return vectors.min() < 0.0 < vectors.max()
    if n == 2:
        angles = np.sort(np.arctan2(vectors[:, 1], vectors[:, 0]))
        gaps = np.diff(np.concatenate([angles, [angles[0] + 2.0 * np.pi]]))
        return bool(gaps.max() < np.pi)
    rng = np.random.default_rng(0)
    for d in rng.normal(size=(512, n)):
        if (vectors @ d).max() <= 0.0:
            return False
    return True


@dataclass(frozen=True)
class ControlSet:
    """Finite set of control vectors, or the unit sphere S^{n-1}.

    kind is "discrete" (vectors holds the list, duplicate-free) or "sphere"
    (vectors is None).  Construction checks controllability: the velocities
    must positively span R^n, otherwise some targets are unreachable and
    point costs are infinite.
    """

    kind: str
    dimension: int
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("discrete", "sphere"):
            raise FreestopError(f"unknown control set kind {self.kind!r}")
        if self.kind == "discrete":
            v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
            if v.shape[0] == 0:
                raise FreestopError("discrete control set must be non-empty")
            if v.shape[1] != self.dimension:
                raise FreestopError("control vectors do not match the dimension")
            for i, j in itertools.combinations(range(v.shape[0]), 2):
                if np.allclose(v[i], v[j], rtol=0.0, atol=1e-12):
                    raise FreestopError("duplicate control vectors")
            if not _positive_span_fills_space(v):
                raise FreestopError(
                    "control velocities do not positively span R^n; "
                    "problem is not controllable"
                )
            object.__setattr__(self, "vectors", v)
        elif self.vectors is not None:
            raise FreestopError("sphere control set carries no vector list")

    @property
    def size(self) -> int:
        if self.kind != "discrete":
            raise FreestopError("sphere control set has no finite size")
        return self.vectors.shape[0]


def discrete_controls(vectors) -> ControlSet:
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    return ControlSet("discrete", v.shape[1], v)


def sphere_controls(dimension: int) -> ControlSet:
    return ControlSet("sphere", dimension)


class ControlProblem:
    """Immutable bundle of dynamics and cost; shared read-only by the solvers.

    velocity(q, A) -> R^n and running_cost(t, q, A) -> scalar must broadcast
    over a leading batch axis of q (shape (m, n) -> (m, ...)).  The optional
    velocity_jacobian and cost_gradient_q callables feed the costate
    equation; both are zero for the registered families.

    Flags:
      velocity_is_control  f(q, A) = A, so lattice shifts are q-independent
      cost_is_time_only    K = K(t), evaluable without q or A
    """

    def __init__(
        self,
        dimension: int,
        control_set: ControlSet,
        velocity,
        running_cost,
        time_class: str,
        lipschitz_bound: float,
        speed_bound: float,
        velocity_jacobian=None,
        cost_gradient_q=None,
        velocity_is_control: bool = False,
        cost_is_time_only: bool = False,
        family: str | None = None,
        penalty: TimePenalty | None = None,
        time_probe_horizon: float = 1.0,
    ):
        if time_class not in _TIME_CLASSES:
            raise FreestopError(f"time_class must be one of {_TIME_CLASSES}")
        if control_set.dimension != dimension:
            raise FreestopError("control set dimension mismatch")
        self.dimension = dimension
        self.control_set = control_set
        self.velocity = velocity
        self.running_cost = running_cost
        self.time_class = time_class
        self.lipschitz_bound = float(lipschitz_bound)
        self.speed_bound = float(speed_bound)
        self.velocity_jacobian = velocity_jacobian
        self.cost_gradient_q = cost_gradient_q
        self.velocity_is_control = velocity_is_control
        self.cost_is_time_only = cost_is_time_only
        self.family = family
        self.penalty = penalty
        self._validate_samples(time_probe_horizon)

    def _probe_controls(self) -> np.ndarray:
        if self.control_set.kind == "discrete":
            return self.control_set.vectors
        n = self.dimension
        dirs = np.concatenate([np.eye(n), -np.eye(n)])
        return dirs

    def _validate_samples(self, horizon: float):
        """Sampled H0 non-negativity and time-class monotonicity of K."""
        ts = np.linspace(0.0, horizon, 64)
        qs = np.zeros((1, self.dimension))
        for a in self._probe_controls():
            ks = np.array([np.min(self.running_cost(t, qs, a)) for t in ts])
            if np.any(ks < 0.0):
                raise FreestopError("running cost must be non-negative")
            d = np.diff(ks)
            if self.time_class == TIME_COMPOUNDED and not np.all(d > 0.0):
                raise FreestopError("TC requires running cost strictly increasing in t")
            if self.time_class == TIME_DISCOUNTED and not np.all(d < 0.0):
                raise FreestopError("TD requires running cost strictly decreasing in t")
            if self.time_class == TIME_STATIONARY and not np.allclose(d, 0.0, atol=1e-12):
                raise FreestopError("TS requires running cost constant in t")

    def control_velocities(self, q=None) -> np.ndarray:
        """Velocity vector per discrete control, at state q (default origin)."""
        if self.control_set.kind != "discrete":
            raise FreestopError("finite velocity list requires a discrete control set")
        if q is None:
            q = np.zeros(self.dimension)
        q = np.asarray(q, dtype=float).reshape(1, self.dimension)
        return np.array([np.asarray(self.velocity(q, a), dtype=float).reshape(self.dimension)
                         for a in self.control_set.vectors])


def hamiltonian(problem: ControlProblem, t: float, q, p) -> float:
    """sup over controls of p . f(q, A) - K(t, q, A)."""
    q = np.asarray(q, dtype=float).reshape(1, problem.dimension)
    p = np.asarray(p, dtype=float).reshape(problem.dimension)
    if not np.all(np.isfinite(p)):
        raise FreestopError("costate must be finite")
    if problem.control_set.kind == "discrete":
        vals = [
            float(p @ np.asarray(problem.velocity(q, a)).reshape(problem.dimension))
            - float(np.asarray(problem.running_cost(t, q, a)).reshape(()))
            for a in problem.control_set.vectors
        ]
        return max(vals)
    if problem.velocity_is_control and problem.cost_is_time_only:
        k = float(np.asarray(problem.running_cost(t, q, None)).reshape(()))
        return float(np.linalg.norm(p)) - k
    raise FreestopError(
        "Hamiltonian infinite: sphere control set without the f(q,A)=A, "
        "K=K(t) structure has no evaluable supremum"
    )


def tie_tolerance(h_value: float) -> float:
    """Relative guard for comparing control payoffs against the max."""
    return 1e-12 * (1.0 + abs(h_value))


def argmax_control(problem: ControlProblem, t: float, q, p):
    """All controls attaining the Hamiltonian sup, within the tie tolerance.

    Returns an (m, n) array of maximizing controls for a discrete set.  For
    the sphere: a (1, n) array holding p/|p| when p != 0, or the
    WHOLE_SPHERE marker at p = 0.
    """
    p = np.asarray(p, dtype=float).reshape(problem.dimension)
    if problem.control_set.kind == "sphere":
        if not (problem.velocity_is_control and problem.cost_is_time_only):
            raise FreestopError("argmax on a sphere set requires the f(q,A)=A structure")
        norm = np.linalg.norm(p)
        if norm == 0.0:
            return WHOLE_SPHERE
        return (p / norm).reshape(1, problem.dimension)
    qb = np.asarray(q, dtype=float).reshape(1, problem.dimension)
    vals = np.array([
        float(p @ np.asarray(problem.velocity(qb, a)).reshape(problem.dimension))
        - float(np.asarray(problem.running_cost(t, qb, a)).reshape(()))
        for a in problem.control_set.vectors
    ])
    h = vals.max()
    keep = vals >= h - tie_tolerance(h)
    return problem.control_set.vectors[keep]


def unique_argmax_control(problem: ControlProblem, t: float, q, p) -> np.ndarray:
    """Single maximizing control; raises ControlTieError on a tie."""
    best = argmax_control(problem, t, q, p)
    if best is WHOLE_SPHERE or len(best) != 1:
        raise ControlTieError(f"maximizing control not unique at t={t}, p={p}")
    return best[0]


def hamiltonian_p_slope(problem: ControlProblem, t: float, q, p):
    """Velocities f(q, A*) over maximizing controls A*.

    These are the subdifferential elements of H in p that the dynamics can
    realize.  Sphere set at p = 0 returns the WHOLE_SPHERE marker.
    """
    best = argmax_control(problem, t, q, p)
    if best is WHOLE_SPHERE:
        return WHOLE_SPHERE
    qb = np.asarray(q, dtype=float).reshape(1, problem.dimension)
    vels = np.array([
        np.asarray(problem.velocity(qb, a), dtype=float).reshape(problem.dimension)
        for a in best
    ])
    # dedupe velocities realized by distinct controls
    keep = []
    for i in range(vels.shape[0]):
        if not any(np.allclose(vels[i], vels[j], rtol=0.0, atol=1e-12) for j in keep):
            keep.append(i)
    return vels[keep]


# --- registered analytic families -----------------------------------------

def speed_limited_time_penalty(
    penalty: TimePenalty,
    dimension: int = 1,
    controls: str = "auto",
) -> ControlProblem:
    """Unit-speed motion paying the time penalty rate g'(t).

    f(q, A) = A and K(t, q, A) = g'(t).  The control set is the two-point
    set {-1, +1} in one dimension; in higher dimensions "sphere" gives the
    unit sphere (norm-based closed forms, LF marching) and "axes" the 2n
    signed axis vectors (lattice DP and flow networks).
    """
    if controls == "auto":
        controls = "axes" if dimension == 1 else "sphere"
    if controls == "axes":
        vecs = np.concatenate([np.eye(dimension), -np.eye(dimension)])
        cset = discrete_controls(vecs)
    elif controls == "sphere":
        cset = sphere_controls(dimension)
    else:
        raise FreestopError(f"unknown controls choice {controls!r}")

    def velocity(q, a):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(np.asarray(a, dtype=float), q.shape).copy()

    def running_cost(t, q, a):
        q = np.asarray(q, dtype=float)
        lead = q.shape[:-1] if q.ndim > 1 else q.shape[:0]
        return np.full(lead, penalty.slope(t)) if lead else float(penalty.slope(t))

    def zero_jacobian(q, a):
        return np.zeros((dimension, dimension))

    def zero_gradient(t, q, a):
        return np.zeros(dimension)

    return ControlProblem(
        dimension=dimension,
        control_set=cset,
        velocity=velocity,
        running_cost=running_cost,
        time_class=penalty.time_class,
        lipschitz_bound=0.0,
        speed_bound=1.0,
        velocity_jacobian=zero_jacobian,
        cost_gradient_q=zero_gradient,
        velocity_is_control=True,
        cost_is_time_only=True,
        family="speed_limited_time_penalty",
        penalty=penalty,
    )


FAMILIES = {"speed_limited_time_penalty": speed_limited_time_penalty}


def problem_from_json(spec: dict) -> ControlProblem:
    """Build a registered family from its scenario JSON fragment."""
    name = spec.get("family")
    if name not in FAMILIES:
        raise FreestopError(f"unregistered problem family: {name!r}")
    penalty = TimePenalty.from_json(spec.get("g", {"kind": "power", "exponent": 2.0}))
    dimension = int(spec.get("dimension", 1))
    controls = spec.get("controls", "auto")
    return FAMILIES[name](penalty, dimension=dimension, controls=controls)
