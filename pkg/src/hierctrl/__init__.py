"""Numerical laboratory for hierarchic control of coupled fourth-order
parabolic systems: follower Nash equilibria, leader null control through
a penalized dual functional, and empirical weighted-energy and
observability studies on discretized problems."""

from .analysis import (CarlemanReport, ObservabilityReport, carleman_I,
                       carleman_I_bar, carleman_ratio_check,
                       energy_constant_check, observability_ratio)
from .errors import (ConvergenceError, HypothesisWarning, ParameterWarning,
                     ValidationError)
from .grid import (Field, RegionMask, SpaceTimeGrid, SparseOperator,
                   bilaplacian, build_grid, dirichlet_laplacian,
                   inner_product, region_mask)
from .leader import (ControlReport, DualTrajectories, HUMResult,
                     TerminalAdjointData, evaluate_F_tilde, free_terminal_state,
                     gramian_apply, minimize_F_tilde, run_hierarchic_control,
                     solve_dual, verify_duality_identity)
from .nash import (ControlProfile, CoercivityReport, FollowerFunctionalSpec,
                   NashSolution, apply_K, apply_Lambda, apply_Lambda_star,
                   check_nash_stationarity, coercivity_tau, follower_cost,
                   leader_cost, solve_nash_operator, solve_nash_optimality)
from .pde import (CoefficientField, CoupledSolution, SourceSpec,
                  StepOperators, TwoComponentState, TwoPointSystem,
                  solve_backward, solve_coupled_forward_backward, solve_forward)
from .problem import (DiscreteProblem, HierarchicProblem, SolverOptions,
                      default_omega_prime, prepare)
from .weights import (CarlemanParams, CarlemanWeights, EtaFunction, auto_s,
                      build_carleman_weights, build_eta, damped_weight,
                      eval_modified_weights, eval_sigma_star_rho_star,
                      eval_sigma_tau)

__version__ = "0.1.0"
