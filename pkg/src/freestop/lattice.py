"""Space-time lattice shared by the trajectory DP, the QVI marcher, and the
flow network.

Space nodes form a tensor grid with step dx per axis over an axis-aligned
box; time nodes run 0 .. t_max with step dt.  For a discrete control set the
displacement dt * f(q, A) must land exactly on the grid (an integer number
of nodes per axis), which is what makes the three discretizations agree
path-by-path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FreestopError, OffLatticeError

_ALIGN_TOL = 1e-9


def _int_multiple(value: float, step: float, what: str) -> int:
    ratio = value / step
    k = round(ratio)
    if abs(ratio - k) > _ALIGN_TOL * max(1.0, abs(ratio)):
        raise FreestopError(f"{what} = {value} is not an integer multiple of {step}")
    return int(k)


@dataclass(frozen=True)
class LatticeSpec:
    """dx/dt steps, horizon, and the covering space box ((lo, hi) per axis)."""

    dx: float
    dt: float
    t_max: float
    box: tuple

    # derived, filled in __post_init__
    n_axis: tuple = field(init=False, compare=False, repr=False)
    nt: int = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.dx <= 0 or self.dt <= 0 or self.t_max <= 0:
            raise FreestopError("dx, dt, t_max must be positive")
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        object.__setattr__(self, "box", box)
        n_axis = []
        for lo, hi in box:
            if hi <= lo:
                raise FreestopError("box extents must be increasing")
            n_axis.append(_int_multiple(hi - lo, self.dx, "box extent") + 1)
        object.__setattr__(self, "n_axis", tuple(n_axis))
        object.__setattr__(self, "nt", _int_multiple(self.t_max, self.dt, "t_max") + 1)

    @property
    def dimension(self) -> int:
        return len(self.box)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt

    def axis_nodes(self, axis: int) -> np.ndarray:
        lo, _ = self.box[axis]
        return lo + np.arange(self.n_axis[axis]) * self.dx

    def points(self) -> np.ndarray:
        """All space nodes as an (N, n) array in C (row-major index) order."""
        grids = np.meshgrid(*[self.axis_nodes(a) for a in range(self.dimension)],
                            indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @property
    def n_space(self) -> int:
        return int(np.prod(self.n_axis))

    def point_at(self, multi_index) -> np.ndarray:
        idx = np.asarray(multi_index, dtype=int)
        return np.array([self.box[a][0] + idx[a] * self.dx for a in range(self.dimension)])

    def index_of(self, point, tol: float = _ALIGN_TOL):
        """Multi-index of an on-lattice point; OffLatticeError otherwise."""
        p = np.asarray(point, dtype=float).reshape(self.dimension)
        idx = []
        for a in range(self.dimension):
            r = (p[a] - self.box[a][0]) / self.dx
            k = round(r)
            if abs(r - k) > tol * max(1.0, abs(r)) or not 0 <= k < self.n_axis[a]:
                raise OffLatticeError(f"point {p} is not a lattice node")
            idx.append(int(k))
        return tuple(idx)

    def nearest_index(self, point):
        """Multi-index of the nearest node; FreestopError if outside the box."""
        p = np.asarray(point, dtype=float).reshape(self.dimension)
        idx = []
        for a in range(self.dimension):
            lo, hi = self.box[a]
            if p[a] < lo - self.dx / 2 - _ALIGN_TOL or p[a] > hi + self.dx / 2 + _ALIGN_TOL:
                raise FreestopError(f"point {p} lies outside the lattice box")
            k = int(round((p[a] - lo) / self.dx))
            idx.append(min(max(k, 0), self.n_axis[a] - 1))
        return tuple(idx)

    def time_index(self, t: float) -> int:
        r = t / self.dt
        k = round(r)
        if abs(r - k) > _ALIGN_TOL * max(1.0, abs(r)) or not 0 <= k < self.nt:
            raise OffLatticeError(f"time {t} is not a lattice time")
        return int(k)

    def control_shifts(self, problem) -> np.ndarray:
        """Integer node displacement per control and axis for one time step.

        Requires a discrete control set with q-independent velocities; each
        dt * f(A) must be an integer multiple of dx per axis.
        """
        if problem.control_set.kind != "discrete":
            raise FreestopError("lattice stepping requires a discrete control set")
        vels = problem.control_velocities()
        if not problem.velocity_is_control:
            # spot-check q-independence on a few nodes
            for frac in (0.25, 0.75):
                q = np.array([lo + frac * (hi - lo) for lo, hi in self.box])
                if not np.allclose(problem.control_velocities(q), vels, atol=1e-12):
                    raise FreestopError("lattice stepping requires q-independent velocities")
        shifts = np.empty(vels.shape, dtype=int)
        for i, v in enumerate(vels):
            for a in range(self.dimension):
                shifts[i, a] = _int_multiple(self.dt * v[a], self.dx, "dt * velocity")
        return shifts


def auto_box(supports: np.ndarray, t_max: float, speed_bound: float, dx: float) -> tuple:
    """Bounding box of the supports inflated by t_max * speed + 2 dx per side,
    with edges landing on multiples of dx so measures snap consistently."""
    pts = np.atleast_2d(np.asarray(supports, dtype=float))
    margin = t_max * speed_bound + 2.0 * dx
    box = []
    for a in range(pts.shape[1]):
        lo = np.floor((pts[:, a].min() - margin) / dx) * dx
        hi = np.ceil((pts[:, a].max() + margin) / dx) * dx
        box.append((lo, hi))
    return tuple(box)


def hull_box(supports: np.ndarray, dx: float, pad_nodes: int = 2) -> tuple:
    """Tight dx-aligned box around the supports plus a few node paddings.

    Flows between the supports never profit from leaving their convex hull
    (arc costs are nonnegative), so flow networks use this smaller box.
    """
    pts = np.atleast_2d(np.asarray(supports, dtype=float))
    box = []
    for a in range(pts.shape[1]):
        lo = (np.floor(pts[:, a].min() / dx) - pad_nodes) * dx
        hi = (np.ceil(pts[:, a].max() / dx) + pad_nodes) * dx
        box.append((lo, hi))
    return tuple(box)
