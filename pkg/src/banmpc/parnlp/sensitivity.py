"""First-order behavior of NLP solutions under parameter changes.

At a KKT point with a strictly complementary active set the primal-dual
solution s = (w, lam, mu_A) is an implicit function of theta, defined by

    phi(s, theta) = [ grad_w L ; c ; g_A ] = 0.

Differentiating gives the linear system

    d phi/d s  *  ds/dtheta  =  - d phi/d theta,

whose left-hand matrix is the reduced KKT matrix.  The optimal value needs
no second-order information at all: by the envelope theorem its derivative
is the theta-gradient of the Lagrangian evaluated at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .problem import KktPoint, NlpProblem, SingularKktError, WeakActivityError

__all__ = ["SolutionSensitivity", "PredictedSolution", "solution_sensitivity", "predict_solution"]


@dataclass
class SolutionSensitivity:
    """Derivatives of one solution with respect to theta.

    ds_dtheta stacks the rows (w, lam, mu_active) and is None when the
    problem does not provide exact second-order callbacks.  dV_dtheta is
    always available.
    """

    dV_dtheta: np.ndarray
    ds_dtheta: Optional[np.ndarray]
    active_set: np.ndarray
    n_w: int
    n_eq: int

    @property
    def dw_dtheta(self):
        return None if self.ds_dtheta is None else self.ds_dtheta[: self.n_w]

    @property
    def dlam_dtheta(self):
        if self.ds_dtheta is None:
            return None
        return self.ds_dtheta[self.n_w: self.n_w + self.n_eq]

    @property
    def dmu_active_dtheta(self):
        return None if self.ds_dtheta is None else self.ds_dtheta[self.n_w + self.n_eq:]


@dataclass
class PredictedSolution:
    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    objective_value: float


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


def solution_sensitivity(problem: NlpProblem, point: KktPoint,
                         tol_act: float = 1e-6) -> SolutionSensitivity:
    """Differentiate a converged solution with respect to theta.

    Raises WeakActivityError when an active inequality carries a multiplier
    at or below tol_act (the active set is then ambiguous and one-sided
    derivatives would be needed), and SingularKktError when the reduced KKT
    matrix cannot be inverted.
    """
    w, lam, mu, theta = point.w, point.lam, point.mu, point.theta

    if problem.n_ineq:
        g = np.asarray(problem.ineq_constraints(w, theta), dtype=float)
        active = np.flatnonzero(np.abs(g) <= tol_act)
        weak = active[mu[active] <= tol_act]
        if weak.size:
            raise WeakActivityError(
                f"{problem.name or 'nlp'}: inequality rows {weak.tolist()} are "
                "active with multipliers at tolerance; sensitivities are "
                "not defined under weak activity")
    else:
        active = np.array([], dtype=int)

    n_t = problem.n_theta

    # value derivative by the envelope theorem
    dv = np.zeros(n_t)
    if problem.objective_grad_theta is not None:
        dv = dv + np.asarray(problem.objective_grad_theta(w, theta), dtype=float)
    if problem.n_eq and problem.eq_jacobian_theta is not None:
        dv = dv + lam @ _dense(problem.eq_jacobian_theta(w, theta))
    if problem.n_ineq and problem.ineq_jacobian_theta is not None:
        dv = dv + mu @ _dense(problem.ineq_jacobian_theta(w, theta))

    ds = None
    # both second-order callbacks are needed: without the mixed w-theta term
    # the reduced KKT system would yield silently wrong primal-dual
    # sensitivities whenever the constraints depend on theta
    if (problem.lagrangian_hessian is not None
            and problem.lagrangian_hessian_theta is not None):
        n_w, n_eq, n_a = problem.n_w, problem.n_eq, active.size
        n_s = n_w + n_eq + n_a
        kkt = np.zeros((n_s, n_s))
        kkt[:n_w, :n_w] = _dense(problem.lagrangian_hessian(w, theta, lam, mu))
        if n_eq:
            jc = _dense(problem.eq_jacobian(w, theta))
            kkt[:n_w, n_w:n_w + n_eq] = jc.T
            kkt[n_w:n_w + n_eq, :n_w] = jc
        if n_a:
            ja = _dense(problem.ineq_jacobian(w, theta))[active]
            kkt[:n_w, n_w + n_eq:] = ja.T
            kkt[n_w + n_eq:, :n_w] = ja

        rhs = np.zeros((n_s, n_t))
        if problem.lagrangian_hessian_theta is not None:
            rhs[:n_w] = np.asarray(problem.lagrangian_hessian_theta(w, theta, lam, mu),
                                   dtype=float)
        if n_eq and problem.eq_jacobian_theta is not None:
            rhs[n_w:n_w + n_eq] = _dense(problem.eq_jacobian_theta(w, theta))
        if n_a and problem.ineq_jacobian_theta is not None:
            rhs[n_w + n_eq:] = _dense(problem.ineq_jacobian_theta(w, theta))[active]

        try:
            ds = np.linalg.solve(kkt, -rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKktError(
                f"{problem.name or 'nlp'}: reduced KKT matrix is singular") from exc
        check = kkt @ ds + rhs
        if np.max(np.abs(check)) > 1e-6 * max(1.0, np.max(np.abs(rhs))):
            raise SingularKktError(
                f"{problem.name or 'nlp'}: reduced KKT matrix is numerically singular")

    return SolutionSensitivity(dV_dtheta=dv, ds_dtheta=ds, active_set=active,
                               n_w=problem.n_w, n_eq=problem.n_eq)


def predict_solution(problem: NlpProblem, point: KktPoint,
                     sens: SolutionSensitivity, delta_theta) -> PredictedSolution:
    """First-order extrapolation of the solution to theta + delta_theta.

    The prediction keeps the active set of the base point; its error grows
    quadratically in ||delta_theta|| as long as the active set does not
    change.
    """
    if sens.ds_dtheta is None:
        raise ValueError("solution prediction needs ds_dtheta; the problem "
                         "must provide exact second-order callbacks")
    dth = np.atleast_1d(np.asarray(delta_theta, dtype=float))
    if dth.shape != (problem.n_theta,):
        raise ValueError(f"delta_theta must have shape ({problem.n_theta},)")

    step = sens.ds_dtheta @ dth
    w = point.w + step[: problem.n_w]
    lam = point.lam + step[problem.n_w: problem.n_w + problem.n_eq]
    mu = np.array(point.mu, dtype=float)
    if sens.active_set.size:
        mu[sens.active_set] = np.maximum(
            mu[sens.active_set] + step[problem.n_w + problem.n_eq:], 0.0)
    value = point.objective_value + float(sens.dV_dtheta @ dth)
    return PredictedSolution(w=w, lam=lam, mu=mu, theta=point.theta + dth,
                             objective_value=value)
