"""Transport with controlled dynamics and free end times.

Four interchangeable views of the same optimal value: point-cost transport
plans, dual obstacle fields with their free boundary, Eulerian mass-dropping
flows, and Hamiltonian-flow transport maps.
"""

from .control import (ControlProblem, ControlSet, argmax_control,
                      discrete_controls, hamiltonian, hamiltonian_p_slope,
                      problem_from_json, speed_limited_time_penalty,
                      sphere_controls)
from .errors import FreestopError
from .eulerian import (FlowNetwork, FlowSolution, build_network, embed_plan,
                       slackness_audit, solve_flow,
                       stopping_distribution_profile, weak_duality_audit)
from .hjb import (FreeBoundary, Grid, ValueField, boundary_equation_residual,
                  extract_free_boundary, optimized_pair, path_inequality_check,
                  solve_fixed_horizon, solve_qvi)
from .kantorovich import (DualPotentials, PrimalDualSolution, c_transform,
                          cbar_transform, duality_gap, solve_primal_dual)
from .lattice import LatticeSpec, auto_box, hull_box
from .measures import (DiscreteMeasure, TransportPlan, marginals, mixture,
                       plan_cost, snap_to_grid, uniform_measure_1d,
                       w1_distance_1d)
from .oracle1d import (Scenario1D, oracle_boundary, oracle_cost_identity,
                       oracle_monge, oracle_potentials, oracle_total_cost)
from .penalties import TimePenalty
from .pipeline import VerificationReport, run
from .pontryagin import (HamiltonianTrajectory, endpoint_contact_check,
                         integrate_flow, maximum_principle_audit, monge_map,
                         transversality_time)
from .scenario import Scenario
from .trajectory import (CostMatrix, LatticePath, cost_matrix,
                         point_cost_analytic, point_cost_lattice)

__version__ = "0.1.0"
