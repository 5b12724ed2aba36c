"""Scenario parsing and lattice validation for the pipeline runner."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .control import ControlProblem, problem_from_json
from .errors import FreestopError
from .lattice import LatticeSpec, auto_box, hull_box
from .measures import DiscreteMeasure

DEFAULT_PIPELINE = {
    "cost": True,
    "kantorovich": True,
    "hjb": True,
    "eulerian": True,
    "pontryagin": True,
    "audits": True,
}


@dataclass
class Scenario:
    """One solver run: problem family, measures, lattice, stage switches."""

    problem: ControlProblem
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    dx: float
    dt: float
    t_max: float
    box: tuple | None = None           # None means "auto"
    pipeline: dict = dataclass_field(default_factory=lambda: dict(DEFAULT_PIPELINE))
    tolerances: dict = dataclass_field(default_factory=dict)
    oracle_case: str | None = None
    name: str = "scenario"

    def supports(self) -> np.ndarray:
        return np.concatenate([self.mu.atoms, self.nu.atoms])

    def grid(self) -> LatticeSpec:
        """The marching grid, honoring the margin rule when box is auto."""
        box = self.box
        if box is None:
            box = auto_box(self.supports(), self.t_max, self.problem.speed_bound, self.dx)
        return LatticeSpec(self.dx, self.dt, self.t_max, box)

    def flow_lattice(self) -> LatticeSpec:
        """Smaller lattice for the flow network: transport never profits from
        leaving the convex hull of the supports (arc costs are nonnegative)."""
        return LatticeSpec(self.dx, self.dt, self.t_max,
                           hull_box(self.supports(), self.dx))

    def validate(self):
        grid = self.grid()
        if self.problem.control_set.kind == "discrete":
            grid.control_shifts(self.problem)   # raises when misaligned
        if self.box is not None:
            margin = self.t_max * self.problem.speed_bound
            sup = self.supports()
            for a, (lo, hi) in enumerate(self.box):
                if sup[:, a].min() - lo < margin - 1e-9 or hi - sup[:, a].max() < margin - 1e-9:
                    warnings.warn(
                        "box margin below t_max * speed bound; values near the "
                        "supports may feel the artificial boundary", stacklevel=2)
        for m in (self.mu, self.nu):
            if m.dimension != self.problem.dimension:
                raise FreestopError("measure dimension does not match the problem")
        return grid

    @staticmethod
    def from_json(spec: dict, name: str = "scenario") -> "Scenario":
        problem = problem_from_json(spec["problem"])
        mu = DiscreteMeasure.from_json(spec["mu"])
        nu = DiscreteMeasure.from_json(spec["nu"])
        lat = spec.get("lattice", {})
        dx = float(lat.get("dx", 1.0 / 64))
        dt = float(lat.get("dt", dx))
        if "t_max" in lat:
            t_max = float(lat["t_max"])
        elif problem.time_class == "TD":
            # a decaying cost rate gives no a-priori arrival bound; the horizon
            # is a required input, vetted by the stabilization check
            raise FreestopError("TD scenarios must state t_max explicitly")
        else:
            t_max = _default_t_max(problem, mu, nu)
        box = lat.get("box", "auto")
        box = None if box == "auto" else tuple((float(lo), float(hi)) for lo, hi in box)
        pipeline = dict(DEFAULT_PIPELINE)
        pipeline.update(spec.get("pipeline", {}))
        return Scenario(problem=problem, mu=mu, nu=nu, dx=dx, dt=dt, t_max=t_max,
                        box=box, pipeline=pipeline,
                        tolerances=dict(spec.get("tolerances", {})),
                        oracle_case=spec.get("oracle_case"), name=name)

    @staticmethod
    def load(path) -> "Scenario":
        with open(path) as fh:
            spec = json.load(fh)
        return Scenario.from_json(spec, name=str(path))


def _default_t_max(problem, mu, nu) -> float:
    """Diameter of the joint support over the minimum speed, plus one."""
    sup = np.concatenate([mu.atoms, nu.atoms])
    diam = float(np.abs(sup.max(axis=0) - sup.min(axis=0)).sum())
    return diam / max(problem.speed_bound, 1e-12) + 1.0
