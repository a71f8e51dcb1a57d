"""Parametric NLP solving and differentiation."""

from .problem import (
    InfeasibleError,
    KktPoint,
    MaxIterationsError,
    NlpProblem,
    NumericalFailureError,
    SingularKktError,
    SolverError,
    WeakActivityError,
    WeakActivityWarning,
    active_set,
    kkt_residual,
    lagrangian_grad,
)
from .qp import QpResult, solve_qp
from .sensitivity import (
    PredictedSolution,
    SolutionSensitivity,
    predict_solution,
    solution_sensitivity,
)
from .sqp import SolverOptions, solve

__all__ = [
    "NlpProblem",
    "KktPoint",
    "SolverOptions",
    "solve",
    "solve_qp",
    "QpResult",
    "kkt_residual",
    "active_set",
    "lagrangian_grad",
    "solution_sensitivity",
    "predict_solution",
    "SolutionSensitivity",
    "PredictedSolution",
    "SolverError",
    "MaxIterationsError",
    "InfeasibleError",
    "NumericalFailureError",
    "SingularKktError",
    "WeakActivityError",
    "WeakActivityWarning",
]
