"""Mini-batch descent flows and randomized minimizing movements.

The package integrates gradient flows of convex potentials, their
randomized mini-batch counterparts and proximal (minimizing movement)
analogues, and measures the Monte-Carlo convergence rate as the batch
switching period shrinks.
"""

from .convex import (
    CompositePotential,
    Polyhedron,
    QuadraticPotential,
    exact_quadratic_flow,
    indicator,
    minimal_norm_subgradient,
    project_polyhedron,
    prox,
    quadratic,
    soft_threshold,
    weighted_l1,
)
from .core import (
    BatchSchedule,
    BatchSystem,
    ConvergenceReport,
    ErrorCurve,
    SolverOptions,
    Trajectory,
    ValidationResult,
    VarianceSplit,
    convergence_sweep,
    draw_schedule,
    expectation_error,
    gradient_flow,
    mini_batch_flow,
    minimizing_movement,
    pathwise_bound,
    validate_batch_system,
    variance_lambda,
    variance_split,
)
from .exceptions import BatchSystemError, ConfigError, DomainError, InfeasibleError, SolverError

__all__ = [
    "BatchSchedule",
    "BatchSystem",
    "BatchSystemError",
    "CompositePotential",
    "ConfigError",
    "ConvergenceReport",
    "DomainError",
    "ErrorCurve",
    "InfeasibleError",
    "Polyhedron",
    "QuadraticPotential",
    "SolverError",
    "SolverOptions",
    "Trajectory",
    "ValidationResult",
    "VarianceSplit",
    "convergence_sweep",
    "draw_schedule",
    "exact_quadratic_flow",
    "expectation_error",
    "gradient_flow",
    "indicator",
    "mini_batch_flow",
    "minimal_norm_subgradient",
    "minimizing_movement",
    "pathwise_bound",
    "project_polyhedron",
    "prox",
    "quadratic",
    "soft_threshold",
    "validate_batch_system",
    "variance_lambda",
    "variance_split",
    "weighted_l1",
]

__version__ = "0.1.0"
