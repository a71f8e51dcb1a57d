"""Sequential quadratic programming driver.

Each iteration linearizes the constraints, builds a Hessian model (exact,
Gauss-Newton, or damped BFGS), solves the inequality-constrained QP, and
globalizes with a backtracking line search on the l1 merit function

    phi(w) = f(w) + nu * ( ||c(w)||_1 + ||max(0, g(w))||_1 ).

Infeasible or failed subproblems trigger a quadratic-penalty restoration
phase before the method gives up.  The returned multipliers are polished by
a least-squares refit on the detected active set so that stationarity holds
to machine precision whenever the active set is clean.

Everything is deterministic: the same problem, parameter, initial guess,
and options always produce the same iterates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .problem import (
    InfeasibleError,
    KktPoint,
    MaxIterationsError,
    NlpProblem,
    NumericalFailureError,
    lagrangian_grad,
)
from .qp import solve_qp

__all__ = ["SolverOptions", "solve"]


@dataclass
class SolverOptions:
    """Tuning knobs for :func:`solve`.

    tol is the max-norm KKT residual target (1e-8 suits analytic test
    problems; optimal control transcriptions run at 1e-6).  hessian selects
    the model: "auto" picks exact when the problem provides a Lagrangian
    Hessian, otherwise Gauss-Newton when an objective Hessian is available,
    otherwise BFGS.  degraded_tol is the stationarity level below which a
    feasible but not fully converged point is returned with status
    "degraded" instead of raising MaxIterationsError.
    """

    tol: float = 1e-8
    max_iterations: int = 80
    tol_act: float = 1e-6
    hessian: str = "auto"  # auto | exact | gauss_newton | bfgs
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_line_search: int = 16
    qp_max_iterations: int = 100
    degraded_tol: float = 1e-3
    restoration_iterations: int = 25


def _values(problem, w, theta):
    f = float(problem.objective(w, theta))
    c = problem.eq_constraints(w, theta) if problem.n_eq else np.zeros(0)
    g = problem.ineq_constraints(w, theta) if problem.n_ineq else np.zeros(0)
    return f, np.asarray(c, dtype=float), np.asarray(g, dtype=float)


def _jacobians(problem, w, theta):
    jc = problem.eq_jacobian(w, theta) if problem.n_eq else None
    jg = problem.ineq_jacobian(w, theta) if problem.n_ineq else None
    return jc, jg


def _violation(c, g):
    v = 0.0
    if c.size:
        v += float(np.sum(np.abs(c)))
    if g.size:
        v += float(np.sum(np.maximum(g, 0.0)))
    return v


def _mat_t_vec(mat, vec):
    if mat is None or vec.size == 0:
        return 0.0
    return mat.T @ vec


def _residual(problem, w, lam, mu, theta, f, c, g, grad, jc, jg):
    stat = np.array(grad, dtype=float)
    if c.size:
        stat = stat + _mat_t_vec(jc, lam)
    if g.size:
        stat = stat + _mat_t_vec(jg, mu)
    parts = [np.max(np.abs(stat))]
    if c.size:
        parts.append(np.max(np.abs(c)))
    if g.size:
        parts.append(max(0.0, g.max()))
        parts.append(np.max(np.abs(mu * g)))
        parts.append(max(0.0, -mu.min()))
    feas = max(
        np.max(np.abs(c), initial=0.0),
        np.max(g, initial=0.0),
    )
    return float(max(parts)), float(max(feas, 0.0))


class _BfgsModel:
    """Powell-damped BFGS approximation of the Lagrangian Hessian."""

    def __init__(self, n):
        self.b = np.eye(n)

    def update(self, s_vec, y_vec):
        sy = float(s_vec @ y_vec)
        bs = self.b @ s_vec
        sbs = float(s_vec @ bs)
        if sbs <= 0.0 or float(s_vec @ s_vec) < 1e-16:
            return
        if sy < 0.2 * sbs:
            phi = 0.8 * sbs / (sbs - sy)
            y_vec = phi * y_vec + (1.0 - phi) * bs
            sy = float(s_vec @ y_vec)
        if sy <= 1e-14:
            return
        self.b = self.b - np.outer(bs, bs) / sbs + np.outer(y_vec, y_vec) / sy


def _hessian_mode(problem, options):
    if options.hessian != "auto":
        return options.hessian
    if problem.lagrangian_hessian is not None:
        return "exact"
    if problem.objective_hess is not None:
        return "gauss_newton"
    return "bfgs"


def _build_hessian(problem, mode, bfgs, w, theta, lam, mu):
    if mode == "exact":
        return problem.lagrangian_hessian(w, theta, lam, mu)
    if mode == "gauss_newton":
        return problem.objective_hess(w, theta)
    return bfgs.b


def _eqp_step(hess, grad, jc, c, jg, g, mu, tol_act):
    """Newton step on an active-set KKT system, with working-set repair.

    With the working set frozen, the QP collapses to one symmetric linear
    solve.  That sidesteps the interior-point subproblem entirely, which
    matters when the exact Hessian is indefinite: the barrier iteration can
    drift to a spurious stationary point of the nonconvex QP, while the
    direct KKT solve is well posed whenever the reduced Hessian on the
    active-set null space is positive definite.  The working set is seeded
    from the multipliers and near-active rows, then repaired a few rounds:
    the most negative multiplier drops out, the worst violated row comes
    in.  Returns None when no consistent set is found; the caller then
    falls back to the full QP.
    """
    h = hess.toarray() if sp.issparse(hess) else np.asarray(hess, dtype=float)
    if h.ndim == 1:
        h = np.diag(h)
    n = h.shape[0]
    a_eq = None
    if jc is not None:
        a_eq = jc.toarray() if sp.issparse(jc) else np.asarray(jc, dtype=float)
    m_eq = 0 if a_eq is None else a_eq.shape[0]
    jg_d = None
    act = np.zeros(g.size, dtype=bool)
    if jg is not None and g.size:
        # seed from the primal evidence first; a positive multiplier is only
        # trusted on rows reasonably close to their boundary, because stale
        # duals on deeply inactive rows would pin nonsense equalities here
        act = (g >= -tol_act) | ((mu > 1e-8) & (g >= -1e3 * tol_act))
        jg_d = jg.toarray() if sp.issparse(jg) else np.asarray(jg, dtype=float)

    eps = 1e-12 * max(1.0, float(np.abs(h).max()))
    for _ in range(8):
        idx = np.flatnonzero(act)
        m_act = idx.size
        m = n + m_eq + m_act
        kkt = np.zeros((m, m))
        kkt[:n, :n] = h
        if m_eq:
            kkt[:n, n:n + m_eq] = a_eq.T
            kkt[n:n + m_eq, :n] = a_eq
        if m_act:
            kkt[:n, n + m_eq:] = jg_d[idx].T
            kkt[n + m_eq:, :n] = jg_d[idx]
        rhs = np.concatenate([-grad, -c, -g[idx]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            # dependent rows in the working set; a proximal term on the
            # dual block restores a unique solution at O(eps) step error
            kkt[n:, n:] -= eps * np.eye(m - n)
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                return None
        if not np.all(np.isfinite(sol)):
            return None
        d = sol[:n]
        lam_new = sol[n:n + m_eq]
        mu_act = sol[n + m_eq:]
        scale = 1.0 + float(np.max(np.abs(mu_act), initial=0.0))
        if m_act and float(np.min(mu_act, initial=0.0)) < -1e-10 * scale:
            act[idx[int(np.argmin(mu_act))]] = False
            continue
        if jg_d is not None and not np.all(act):
            rest = np.flatnonzero(~act)
            pred = g[rest] + jg_d[rest] @ d
            worst = int(np.argmax(pred))
            if pred[worst] > tol_act:
                act[rest[worst]] = True
                continue
        mu_new = np.zeros(g.size)
        mu_new[idx] = np.maximum(mu_act, 0.0)
        return d, lam_new, mu_new
    return None


def _restoration(problem, w, theta, options):
    """Gauss-Newton decrease of 0.5||c||^2 + 0.5||g+||^2."""
    w = np.array(w, dtype=float)
    for _ in range(options.restoration_iterations):
        _, c, g = _values(problem, w, theta)
        gp = np.maximum(g, 0.0)
        viol = 0.5 * (c @ c + gp @ gp)
        if viol <= 1e-16 or max(np.max(np.abs(c), initial=0.0),
                                np.max(gp, initial=0.0)) <= 1e-9:
            return w, True
        jc, jg = _jacobians(problem, w, theta)
        rows, vecs = [], []
        if c.size:
            rows.append(jc.toarray() if sp.issparse(jc) else np.asarray(jc, dtype=float))
            vecs.append(c)
        act = g > 0.0
        if np.any(act):
            jga = jg.toarray()[act] if sp.issparse(jg) else np.asarray(jg, dtype=float)[act]
            rows.append(jga)
            vecs.append(g[act])
        if not rows:
            return w, True
        jmat = np.vstack(rows)
        rvec = np.concatenate(vecs)
        try:
            step, *_ = np.linalg.lstsq(jmat, -rvec, rcond=None)
        except np.linalg.LinAlgError:
            return w, False
        alpha, improved = 1.0, False
        for _ in range(20):
            _, c_t, g_t = _values(problem, w + alpha * step, theta)
            gp_t = np.maximum(g_t, 0.0)
            if 0.5 * (c_t @ c_t + gp_t @ gp_t) < viol * (1.0 - 1e-4 * alpha):
                w = w + alpha * step
                improved = True
                break
            alpha *= 0.5
        if not improved:
            _, c, g = _values(problem, w, theta)
            ok = max(np.max(np.abs(c), initial=0.0),
                     np.max(np.maximum(g, 0.0), initial=0.0)) <= 1e-7
            return w, ok
    _, c, g = _values(problem, w, theta)
    ok = max(np.max(np.abs(c), initial=0.0),
             np.max(np.maximum(g, 0.0), initial=0.0)) <= 1e-7
    return w, ok


def _inactive_cleared(mu, g, tol_act):
    """Zero multipliers on rows strictly inside the feasible region.

    A positive multiplier paired with g well below zero certifies nothing;
    it only poisons complementarity and stationarity at later iterates.
    """
    if not g.size:
        return mu
    out = np.array(mu, dtype=float)
    out[g < -tol_act] = 0.0
    return out


def _polish(problem, w, lam, mu, theta, options, res_now):
    """Refit multipliers on the active set by least squares.

    Interior-point multipliers carry O(tol) dust on inactive rows; clamping
    them to zero and re-solving for the remaining multipliers tightens both
    complementarity and stationarity.  The polished values are kept only if
    they actually reduce the residual.
    """
    grad = np.asarray(problem.objective_grad(w, theta), dtype=float)
    f, c, g = _values(problem, w, theta)
    mu_p = np.array(mu, dtype=float)
    if g.size:
        inactive = g < -options.tol_act
        mu_p[inactive] = 0.0
        act = np.flatnonzero(~inactive)
    else:
        act = np.array([], dtype=int)
    jc, jg = _jacobians(problem, w, theta)
    cols = []
    if c.size:
        cols.append((jc.toarray() if sp.issparse(jc) else np.asarray(jc, dtype=float)).T)
    if act.size:
        jga = jg.toarray()[act] if sp.issparse(jg) else np.asarray(jg, dtype=float)[act]
        cols.append(jga.T)
    lam_p = np.array(lam, dtype=float)
    if cols:
        amat = np.hstack(cols)
        try:
            sol, *_ = np.linalg.lstsq(amat, -grad, rcond=None)
        except np.linalg.LinAlgError:
            return lam, mu, res_now
        if c.size:
            lam_cand = sol[: c.size]
            mu_cand = sol[c.size:]
        else:
            lam_cand = lam_p
            mu_cand = sol
        if np.all(mu_cand >= -options.tol_act):
            lam_p = lam_cand
            mu_p[act] = np.maximum(mu_cand, 0.0)
    res_new, _ = _residual(problem, w, lam_p, mu_p, theta, f, c, g, grad, jc, jg)
    if res_new < res_now:
        return lam_p, mu_p, res_new
    return lam, mu, res_now


def solve(problem: NlpProblem, theta, w0=None, options: Optional[SolverOptions] = None,
          lam0=None, mu0=None) -> KktPoint:
    """Solve one parametric NLP instance.

    Raises MaxIterationsError, InfeasibleError, or NumericalFailureError on
    the corresponding failure; otherwise returns a KktPoint whose residual
    is below options.tol (status "converged") or, failing that, a feasible
    point with stationarity below options.degraded_tol (status "degraded").
    """
    options = options or SolverOptions()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    w = np.zeros(problem.n_w) if w0 is None else np.array(w0, dtype=float)
    lam = np.zeros(problem.n_eq) if lam0 is None else np.array(lam0, dtype=float)
    mu = np.zeros(problem.n_ineq) if mu0 is None else np.maximum(np.array(mu0, dtype=float), 0.0)

    mode = _hessian_mode(problem, options)
    bfgs = _BfgsModel(problem.n_w) if mode == "bfgs" else None
    nu = 1.0
    delta = 0.0

    f, c, g = _values(problem, w, theta)
    grad = np.asarray(problem.objective_grad(w, theta), dtype=float)
    jc, jg = _jacobians(problem, w, theta)

    best = None
    stalled = False
    it = 0
    for it in range(options.max_iterations):
        mu = _inactive_cleared(mu, g, 1e3 * options.tol_act)
        res, feas = _residual(problem, w, lam, mu, theta, f, c, g, grad, jc, jg)
        if best is None or res < best[0]:
            best = (res, feas, w.copy(), lam.copy(), mu.copy(), f)
        if res <= options.tol:
            lam, mu, res = _polish(problem, w, lam, mu, theta, options, res)
            return _finish(problem, w, lam, mu, theta, f, res, it, "converged", options)

        hess = _build_hessian(problem, mode, bfgs, w, theta, lam, mu)
        if mode == "exact":
            eqp = _eqp_step(hess, grad, jc, c, jg, g, mu, options.tol_act)
            if eqp is not None:
                d, lam_new, mu_new = eqp
                f_1, c_1, g_1 = _values(problem, w + d, theta)
                grad_1 = np.asarray(problem.objective_grad(w + d, theta), dtype=float)
                jc_1, jg_1 = _jacobians(problem, w + d, theta)
                res_1, _ = _residual(problem, w + d, lam_new, mu_new, theta,
                                     f_1, c_1, g_1, grad_1, jc_1, jg_1)
                if np.isfinite(res_1) and res_1 <= 0.9 * res:
                    w, f, c, g, grad, jc, jg = w + d, f_1, c_1, g_1, grad_1, jc_1, jg_1
                    lam, mu = lam_new, mu_new
                    continue
        qp_tol = max(min(1e-6, 0.01 * res), min(1e-11, 0.01 * options.tol))

        step_ok = False
        for _ in range(6):
            qp = solve_qp(
                hess if delta == 0.0 else _regularized(hess, delta),
                grad,
                jc, -c if c.size else None,
                jg, -g if g.size else None,
                tol=qp_tol, max_iter=options.qp_max_iterations,
            )
            if qp.status == "failure":
                delta = max(4.0 * delta, 1e-6)
                continue
            d = qp.d
            step_norm = np.max(np.abs(d), initial=0.0)
            if not np.all(np.isfinite(d)) or step_norm > 1e8 * (1.0 + np.max(np.abs(w))):
                delta = max(4.0 * delta, 1e-6)
                continue
            step_ok = True
            break
        if not step_ok:
            w, ok = _restoration(problem, w, theta, options)
            if not ok:
                raise InfeasibleError(
                    f"{problem.name or 'nlp'}: QP subproblem failed and "
                    "feasibility restoration stalled")
            f, c, g = _values(problem, w, theta)
            grad = np.asarray(problem.objective_grad(w, theta), dtype=float)
            jc, jg = _jacobians(problem, w, theta)
            mu = _inactive_cleared(mu, g, 1e3 * options.tol_act)
            delta = 0.0
            continue

        lam_new = qp.lam
        # a subproblem cut off at its iteration cap can report sizeable
        # multipliers on rows its own step leaves slack; those duals are
        # noise, and letting them through ratchets the penalty weight and
        # poisons every residual test below
        g_lin = g + jg @ d if g.size else g
        mu_new = _inactive_cleared(qp.mu, g_lin, 1e3 * options.tol_act)
        mult_norm = max(
            np.max(np.abs(lam_new), initial=0.0),
            np.max(mu_new, initial=0.0),
        )
        nu = max(1.2 * mult_norm + 1e-4, 0.5 * nu)

        viol0 = _violation(c, g)
        phi0 = f + nu * viol0
        descent = float(grad @ d) - nu * viol0

        # try the full Newton step on the KKT residual first; the l1 merit
        # suffers from the Maratos effect (second-order constraint violation
        # scaled by a large penalty rejects good steps near the solution)
        f_1, c_1, g_1 = _values(problem, w + d, theta)
        grad_1 = np.asarray(problem.objective_grad(w + d, theta), dtype=float)
        jc_1, jg_1 = _jacobians(problem, w + d, theta)
        mu_1 = _inactive_cleared(mu_new, g_1, 1e3 * options.tol_act)
        res_1, _ = _residual(problem, w + d, lam_new, mu_1, theta,
                             f_1, c_1, g_1, grad_1, jc_1, jg_1)
        if np.isfinite(res_1) and res_1 <= 0.9 * res:
            w_prev = w
            w, f, c, g, grad, jc, jg = w + d, f_1, c_1, g_1, grad_1, jc_1, jg_1
            lam, mu = lam_new, mu_1
            delta = delta * 0.25 if delta > 1e-12 else 0.0
            if mode == "bfgs":
                y = (lagrangian_grad(problem, w, lam, mu, theta)
                     - lagrangian_grad(problem, w_prev, lam, mu, theta))
                bfgs.update(w - w_prev, y)
            continue

        alpha = 1.0
        accepted = False
        f_t, c_t, g_t = f_1, c_1, g_1
        for _ in range(options.max_line_search):
            phi_t = f_t + nu * _violation(c_t, g_t)
            if np.isfinite(phi_t) and phi_t <= phi0 + options.armijo * alpha * min(descent, 0.0):
                accepted = True
                break
            alpha *= options.backtrack
            f_t, c_t, g_t = _values(problem, w + alpha * d, theta)

        if accepted and alpha * step_norm <= 1e-10 * (1.0 + np.abs(w).max()):
            # a backtracked step this short is a no-op that only churns the
            # iteration counter; route it to the recovery chain instead
            accepted = False

        if not accepted:
            if viol0 > options.tol:
                w, ok = _restoration(problem, w, theta, options)
                if not ok:
                    raise InfeasibleError(
                        f"{problem.name or 'nlp'}: line search failed at "
                        f"violation {viol0:.2e} and restoration stalled")
                f, c, g = _values(problem, w, theta)
                grad = np.asarray(problem.objective_grad(w, theta), dtype=float)
                jc, jg = _jacobians(problem, w, theta)
                mu = _inactive_cleared(mu, g, 1e3 * options.tol_act)
                continue
            # the primal iterate may be done while the multipliers lag; a
            # dual-only update costs nothing since w stays put
            mu_cand = _inactive_cleared(mu_new, g, 1e3 * options.tol_act)
            res_d, _ = _residual(problem, w, lam_new, mu_cand, theta,
                                 f, c, g, grad, jc, jg)
            if res_d < 0.999 * res:
                lam, mu = lam_new, mu_cand
                continue
            # an exact Hessian can be indefinite and send the QP to a saddle
            # whose direction is useless; retry with a convexified model
            if delta < 1e6:
                delta = max(4.0 * delta, 1e-6)
                continue
            stalled = True
            break

        w_prev = w
        w = w + alpha * d
        if alpha == 1.0:
            f, c, g, grad, jc, jg = f_1, c_1, g_1, grad_1, jc_1, jg_1
        else:
            f, c, g = f_t, c_t, g_t
            grad = np.asarray(problem.objective_grad(w, theta), dtype=float)
            jc, jg = _jacobians(problem, w, theta)
        # damp the dual update with the primal step length so a short step
        # is not paired with a full multiplier jump
        lam = lam + alpha * (lam_new - lam)
        mu = mu + alpha * (mu_new - mu)
        # a partial step says nothing about whether less regularization
        # would hold up, so only full steps relax it
        if alpha == 1.0:
            delta = delta * 0.25 if delta > 1e-12 else 0.0

        if mode == "bfgs":
            y = (lagrangian_grad(problem, w, lam, mu, theta)
                 - lagrangian_grad(problem, w_prev, lam, mu, theta))
            bfgs.update(w - w_prev, y)

    res, feas = _residual(problem, w, lam, mu, theta, f, c, g, grad, jc, jg)
    if best is not None and best[0] < res:
        res, feas, w, lam, mu, f = best
    lam, mu, res = _polish(problem, w, lam, mu, theta, options, res)
    if res <= options.tol and feas <= options.tol:
        return _finish(problem, w, lam, mu, theta, f, res, it + 1, "converged", options)
    if feas <= max(options.tol, 1e-8) and res <= options.degraded_tol:
        return _finish(problem, w, lam, mu, theta, f, res, it + 1, "degraded", options)
    if stalled:
        raise NumericalFailureError(
            f"{problem.name or 'nlp'}: line search stalled near a feasible "
            f"point (residual {res:.2e})")
    raise MaxIterationsError(
        f"{problem.name or 'nlp'}: no convergence in {options.max_iterations} "
        f"iterations (residual {res:.2e})")


def _regularized(hess, delta):
    if sp.issparse(hess):
        return hess + delta * sp.identity(hess.shape[0], format="csr")
    hess = np.asarray(hess, dtype=float)
    if hess.ndim == 1:
        return hess + delta
    return hess + delta * np.eye(hess.shape[0])


def _finish(problem, w, lam, mu, theta, f, res, iterations, status, options):
    if problem.n_ineq:
        g = np.asarray(problem.ineq_constraints(w, theta), dtype=float)
        act = np.flatnonzero(np.abs(g) <= options.tol_act)
        weak = act[mu[act] <= options.tol_act]
    else:
        act = np.array([], dtype=int)
        weak = np.array([], dtype=int)
    return KktPoint(
        w=w, lam=lam, mu=mu, theta=theta.copy(),
        objective_value=float(problem.objective(w, theta)),
        active_set=act, weakly_active=weak,
        kkt_residual=res, iterations=iterations, status=status,
    )
