"""Memory-limited decentralized LQG control.

Solve the decentralized Riccati equation coupled with the closed-loop
covariance, build the resulting feedback laws and evaluate them by Monte Carlo.
"""

from .errors import (
    AssemblyError,
    ContractError,
    EstimationError,
    IntegrationError,
    MldscError,
    ProblemValidationError,
    RangeError,
    SingularityError,
)
from .model import (
    BlockPartition,
    ControllerSpec,
    LqgProblem,
    assemble_extended_problem,
    paper_experiment,
    validate_problem,
)
from .moments import GainRule, MomentTrajectory, conditional_covariance, joint_memory_gain, memory_gain, propagate_moments
from .montecarlo import SimConfig, analytic_optimal_cost, estimate_cost, moment_cost, simulate_paths
from .numerics import MatrixTrajectory, TimeGrid, integrate_ode, spd_solve
from .policy import Policy, PolicyKind, evaluate_control, feedback_matrix, make_policy
from .riccati import (
    coupling_term,
    solve_affine_terms,
    solve_decentralized_riccati,
    solve_po_riccati,
    solve_riccati,
    value_function,
)
from .sweep import Solution, SweepOptions, residual, solve_mldsc, solve_mlposc

__all__ = [
    "AssemblyError",
    "BlockPartition",
    "ContractError",
    "ControllerSpec",
    "EstimationError",
    "GainRule",
    "IntegrationError",
    "LqgProblem",
    "MatrixTrajectory",
    "MldscError",
    "MomentTrajectory",
    "Policy",
    "PolicyKind",
    "ProblemValidationError",
    "RangeError",
    "SimConfig",
    "SingularityError",
    "Solution",
    "SweepOptions",
    "TimeGrid",
    "analytic_optimal_cost",
    "assemble_extended_problem",
    "conditional_covariance",
    "coupling_term",
    "estimate_cost",
    "evaluate_control",
    "feedback_matrix",
    "integrate_ode",
    "joint_memory_gain",
    "make_policy",
    "memory_gain",
    "moment_cost",
    "paper_experiment",
    "propagate_moments",
    "residual",
    "simulate_paths",
    "solve_affine_terms",
    "solve_decentralized_riccati",
    "solve_mldsc",
    "solve_mlposc",
    "solve_po_riccati",
    "solve_riccati",
    "spd_solve",
    "validate_problem",
    "value_function",
]

__version__ = "0.1.0"
