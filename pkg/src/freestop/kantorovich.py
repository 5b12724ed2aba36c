"""Discrete primal transport problem and its dual potentials.

solve_primal_dual computes an optimal coupling by exact min-cost flow on the
bipartite transportation network and reads the dual potentials (psi on
targets, phi on sources) off the terminal node potentials.  Weights are
quantized at 1e-9 and costs rounded at 1e-9, so strong duality and
complementary slackness hold to that quantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FreestopError, InfeasibleError
from .measures import DiscreteMeasure, TransportPlan, plan_cost
from .mincostflow import (COST_SCALE, MASS_SCALE, quantize_masses, scale_costs,
                          solve_transportation_int, transportation_duals)
from .trajectory import CostMatrix

FEASIBILITY_TOL = 1e-9
DUALITY_TOL = 1e-8


@dataclass
class DualPotentials:
    """psi on target atoms and phi on source atoms with psi - phi <= cost."""

    psi: np.ndarray
    phi: np.ndarray

    def check_feasible(self, cost: np.ndarray, tol: float = FEASIBILITY_TOL):
        slack = np.asarray(cost) - (self.psi[None, :] - self.phi[:, None])
        worst = slack.min()
        if worst < -tol:
            raise FreestopError(f"dual potentials infeasible by {-worst:.3e}")

    def objective(self, mu_weights, nu_weights) -> float:
        return float(self.psi @ np.asarray(nu_weights) - self.phi @ np.asarray(mu_weights))


@dataclass
class PrimalDualSolution:
    plan: TransportPlan
    potentials: DualPotentials
    value: float

    def dual_value(self) -> float:
        row = self.plan.coupling.sum(axis=1)
        col = self.plan.coupling.sum(axis=0)
        return self.potentials.objective(row, col)

    def support_size(self) -> int:
        return int(np.count_nonzero(self.plan.coupling))

    def check(self, cost: np.ndarray, tol: float = DUALITY_TOL):
        """Strong duality and complementary slackness at the stated tolerance."""
        self.potentials.check_feasible(cost)
        gap = abs(self.value - self.dual_value())
        if gap > tol:
            raise FreestopError(f"duality gap {gap:.3e} exceeds {tol}")
        ii, jj = np.nonzero(self.plan.coupling)
        slack = np.asarray(cost)[ii, jj] - (self.potentials.psi[jj] - self.potentials.phi[ii])
        if slack.size and np.max(np.abs(slack)) > tol:
            raise FreestopError("complementary slackness violated on the support")


def solve_primal_dual(cost: CostMatrix, mu: DiscreteMeasure, nu: DiscreteMeasure,
                      validate: bool = True) -> PrimalDualSolution:
    """Optimal plan and duals by successive shortest paths with potentials.

    Potentials are gauge-normalized so min(phi) = 0.
    """
    c = np.asarray(cost.c, dtype=float)
    if c.shape != (len(mu), len(nu)):
        raise FreestopError("cost matrix shape does not match the measures")
    if abs(mu.total_mass - nu.total_mass) > 1e-12:
        raise InfeasibleError("source and target masses differ")
    supply = quantize_masses(mu.weights)
    demand = quantize_masses(nu.weights)
    cost_int = scale_costs(c)
    flow, pi_src, pi_snk = solve_transportation_int(cost_int, supply, demand)
    coupling = flow.astype(float) / MASS_SCALE
    plan = TransportPlan(mu, nu, coupling)
    psi_int, phi_int = transportation_duals(pi_src, pi_snk)
    psi = psi_int.astype(float) / COST_SCALE
    phi = phi_int.astype(float) / COST_SCALE
    shift = phi.min()
    potentials = DualPotentials(psi=psi - shift, phi=phi - shift)
    value = plan_cost(plan, c)
    solution = PrimalDualSolution(plan=plan, potentials=potentials, value=value)
    if validate:
        solution.check(c)
    return solution


def c_transform(cost, phi) -> np.ndarray:
    """psi[j] = min_i cost[i, j] + phi[i]."""
    c = np.asarray(cost, dtype=float)
    return (c + np.asarray(phi, dtype=float)[:, None]).min(axis=0)


def cbar_transform(cost, psi) -> np.ndarray:
    """phi[i] = max_j psi[j] - cost[i, j]."""
    c = np.asarray(cost, dtype=float)
    return (np.asarray(psi, dtype=float)[None, :] - c).max(axis=1)


def duality_gap(solution: PrimalDualSolution) -> float:
    """|primal value - dual value| of the given (not necessarily optimal) pair."""
    return abs(solution.value - solution.dual_value())
