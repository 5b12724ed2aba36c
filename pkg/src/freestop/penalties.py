"""Time-penalty functions g used by the speed-limited model families.

The running cost of those families is the derivative g'(t), so g(tau) is the
total cost of a trajectory that travels for time tau.  Three shapes are
registered, distinguished by the monotonicity of g':

* ``power`` with exponent a > 1: g(t) = t**a, g' strictly increasing (TC);
* ``one_minus_exp`` with rate r > 0: g(t) = 1 - exp(-r t), g' strictly
  decreasing (TD);
* ``linear``: g(t) = t, g' constant (TS).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FreestopError

TIME_STATIONARY = "TS"
TIME_COMPOUNDED = "TC"
TIME_DISCOUNTED = "TD"


@dataclass(frozen=True)
class TimePenalty:
    """One registered g, with slope, inverse slope and convex conjugate."""

    kind: str
    exponent: float = 2.0
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power", "one_minus_exp", "linear"):
            raise FreestopError(f"unregistered penalty kind: {self.kind!r}")
        if self.kind == "power" and not self.exponent > 1.0:
            raise FreestopError("power penalty requires exponent > 1")
        if self.kind == "one_minus_exp" and not self.rate > 0.0:
            raise FreestopError("one_minus_exp penalty requires rate > 0")

    @property
    def time_class(self) -> str:
        if self.kind == "power":
            return TIME_COMPOUNDED
        if self.kind == "one_minus_exp":
            return TIME_DISCOUNTED
        return TIME_STATIONARY

    def value(self, t):
        """g(t); accepts scalars or arrays, defined for negative t as well."""
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            out = np.sign(t) * np.abs(t) ** self.exponent
        elif self.kind == "one_minus_exp":
            out = 1.0 - np.exp(-self.rate * t)
        else:
            out = t.copy()
        return out if out.ndim else float(out)

    def slope(self, t):
        """g'(t), the running-cost rate."""
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            out = self.exponent * np.abs(t) ** (self.exponent - 1.0)
        elif self.kind == "one_minus_exp":
            out = self.rate * np.exp(-self.rate * t)
        else:
            out = np.ones_like(t)
        return out if out.ndim else float(out)

    def slope_inverse(self, r: float) -> float:
        """Unique t >= 0 with g'(t) = r; requires strictly monotone g'."""
        if self.kind == "power":
            return float((r / self.exponent) ** (1.0 / (self.exponent - 1.0)))
        if self.kind == "one_minus_exp":
            if not 0.0 < r <= self.rate:
                raise FreestopError(f"slope {r} not attained by one_minus_exp(rate={self.rate}) on t >= 0")
            return float(-np.log(r / self.rate) / self.rate)
        raise FreestopError("linear penalty has constant slope; no inverse")

    def conjugate(self, r):
        """Convex conjugate g*(r) = sup_{s>=0} r s - g(s); power kind only.

        For g(t) = t**a this is (a-1) * (r/a)**(a/(a-1)) for r >= 0.
        """
        if self.kind != "power":
            raise FreestopError("conjugate registered only for the convex power penalty")
        a = self.exponent
        r = np.maximum(np.asarray(r, dtype=float), 0.0)
        out = (a - 1.0) * (r / a) ** (a / (a - 1.0))
        return out if out.ndim else float(out)

    def to_json(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "exponent": self.exponent}
        if self.kind == "one_minus_exp":
            return {"kind": "one_minus_exp", "rate": self.rate}
        return {"kind": "linear"}

    @staticmethod
    def from_json(spec: dict) -> "TimePenalty":
        kind = spec.get("kind")
        if kind == "power":
            return TimePenalty("power", exponent=float(spec.get("exponent", 2.0)))
        if kind == "one_minus_exp":
            return TimePenalty("one_minus_exp", rate=float(spec.get("rate", 1.0)))
        if kind == "linear":
            return TimePenalty("linear")
        raise FreestopError(f"unregistered penalty kind: {kind!r}")
