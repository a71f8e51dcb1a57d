"""Parametric nonlinear programs and their optimality diagnostics.

A problem instance describes

    min_w  f(w, theta)
    s.t.   c(w, theta)  = 0
           g(w, theta) <= 0

through plain callbacks.  Derivatives are always supplied analytically by
whoever builds the problem; nothing in this package differentiates
numerically.  Callbacks that describe how the problem depends on theta are
optional: when absent the corresponding quantity is treated as independent
of theta.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NlpProblem",
    "KktPoint",
    "SolverError",
    "MaxIterationsError",
    "InfeasibleError",
    "NumericalFailureError",
    "SingularKktError",
    "WeakActivityError",
    "WeakActivityWarning",
    "kkt_residual",
    "active_set",
    "lagrangian_grad",
]


class SolverError(RuntimeError):
    """Base class for everything the solver can raise."""


class MaxIterationsError(SolverError):
    pass


class InfeasibleError(SolverError):
    pass


class NumericalFailureError(SolverError):
    pass


class SingularKktError(SolverError):
    pass


class WeakActivityError(SolverError):
    """An active constraint carries a (near) zero multiplier, so the active
    set cannot be classified reliably."""


class WeakActivityWarning(UserWarning):
    pass


@dataclass
class NlpProblem:
    """Callback bundle describing one parametric NLP.

    Required: objective, objective_grad, and the constraint callbacks for
    whichever of n_eq / n_ineq are nonzero.  Jacobians may return dense
    arrays or scipy sparse matrices.

    Second-order callbacks enable specific features: objective_hess feeds
    the Gauss-Newton Hessian mode, lagrangian_hessian the exact-Newton mode
    and solution sensitivities, lagrangian_hessian_theta the parametric
    solution derivative.  theta-gradient callbacks that are omitted are
    treated as identically zero.
    """

    n_w: int
    n_theta: int
    objective: Callable
    objective_grad: Callable
    n_eq: int = 0
    n_ineq: int = 0
    eq_constraints: Optional[Callable] = None
    eq_jacobian: Optional[Callable] = None
    ineq_constraints: Optional[Callable] = None
    ineq_jacobian: Optional[Callable] = None
    objective_hess: Optional[Callable] = None
    lagrangian_hessian: Optional[Callable] = None
    objective_grad_theta: Optional[Callable] = None
    eq_jacobian_theta: Optional[Callable] = None
    ineq_jacobian_theta: Optional[Callable] = None
    lagrangian_hessian_theta: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.n_w <= 0:
            raise ValueError("n_w must be positive")
        if self.objective is None or self.objective_grad is None:
            raise ValueError("objective and objective_grad are required")
        if self.n_eq > 0 and (self.eq_constraints is None or self.eq_jacobian is None):
            raise ValueError("equality constraints declared but callbacks missing")
        if self.n_ineq > 0 and (self.ineq_constraints is None or self.ineq_jacobian is None):
            raise ValueError("inequality constraints declared but callbacks missing")


@dataclass
class KktPoint:
    """A primal-dual point returned by the solver.

    mu covers every inequality row; entries off the active set are zero up
    to the solver tolerance.  active_set / weakly_active are index arrays
    into the inequality rows.
    """

    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    objective_value: float
    active_set: np.ndarray
    weakly_active: np.ndarray
    kkt_residual: float
    iterations: int
    status: str = "converged"


def _as_dense(mat):
    if sp.issparse(mat):
        return mat.toarray()
    return np.asarray(mat, dtype=float)


def lagrangian_grad(problem: NlpProblem, w, lam, mu, theta) -> np.ndarray:
    """Gradient of f + lam.c + mu.g with respect to w."""
    grad = np.array(problem.objective_grad(w, theta), dtype=float)
    if problem.n_eq:
        jc = problem.eq_jacobian(w, theta)
        grad = grad + (jc.T @ lam if sp.issparse(jc) else _as_dense(jc).T @ lam)
    if problem.n_ineq:
        jg = problem.ineq_jacobian(w, theta)
        grad = grad + (jg.T @ mu if sp.issparse(jg) else _as_dense(jg).T @ mu)
    return grad


def kkt_residual(problem: NlpProblem, w, lam, mu, theta) -> float:
    """Max-norm first-order optimality residual.

    The largest of: stationarity of the Lagrangian, equality violation,
    inequality violation, complementarity |mu_j g_j|, and multiplier
    negativity.  Zero (to tolerance) exactly at a KKT point.
    """
    w = np.asarray(w, dtype=float)
    parts = [np.max(np.abs(lagrangian_grad(problem, w, lam, mu, theta)))]
    if problem.n_eq:
        parts.append(np.max(np.abs(problem.eq_constraints(w, theta))))
    if problem.n_ineq:
        g = np.asarray(problem.ineq_constraints(w, theta), dtype=float)
        parts.append(max(0.0, g.max()))
        parts.append(np.max(np.abs(mu * g)))
        parts.append(max(0.0, -np.min(mu)))
    return float(max(parts))


def active_set(problem: NlpProblem, w, mu, theta, tol_act: float = 1e-6):
    """Indices of inequality rows that hold with equality.

    Returns (active, weakly_active).  A row is active when |g_j| <= tol_act;
    it is weakly active when additionally mu_j <= tol_act, in which case
    strict complementarity fails and a WeakActivityWarning is emitted.
    """
    if problem.n_ineq == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    g = np.asarray(problem.ineq_constraints(w, theta), dtype=float)
    mu = np.asarray(mu, dtype=float)
    active = np.flatnonzero(np.abs(g) <= tol_act)
    weak = active[mu[active] <= tol_act]
    if weak.size:
        warnings.warn(
            f"weakly active inequality rows {weak.tolist()}: "
            "multiplier at tolerance, active set is ambiguous",
            WeakActivityWarning,
            stacklevel=2,
        )
    return active, weak
