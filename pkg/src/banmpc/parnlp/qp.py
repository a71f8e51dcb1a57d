"""Convex quadratic subproblem solver.

Solves
    min_d  0.5 d'H d + g'd
    s.t.   A d = b,   C d <= h

with a Mehrotra predictor-corrector interior-point iteration.  The normal
system is assembled once per iteration as

    [ H + C' diag(mu/s) C + delta I     A'        ] [dd]   [rhs_d]
    [ A                                -delta_e I ] [dl] = [rhs_l]

and factorized either densely (LAPACK LU) or sparsely (SuperLU) depending
on size.  Inequality slacks are eliminated, which keeps the factorized
matrix at n + n_eq regardless of how many inequality rows there are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["QpResult", "solve_qp"]

_SPARSE_THRESHOLD = 1000


@dataclass
class QpResult:
    d: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    status: str  # converged | max_iter | failure
    iterations: int


def _fraction_to_boundary(v, dv, tau):
    neg = dv < 0.0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-tau * v[neg] / dv[neg])))


class _DenseKkt:
    def __init__(self, h_mat, a_mat, c_mat, n, n_eq):
        self.h = h_mat if isinstance(h_mat, np.ndarray) else h_mat.toarray()
        self.a = None if a_mat is None else (
            a_mat if isinstance(a_mat, np.ndarray) else a_mat.toarray())
        self.c = None if c_mat is None else (
            c_mat if isinstance(c_mat, np.ndarray) else c_mat.toarray())
        self.n, self.n_eq = n, n_eq

    def factor(self, d_weights, delta, delta_e):
        n, n_eq = self.n, self.n_eq
        m = np.zeros((n + n_eq, n + n_eq))
        block = self.h + delta * np.eye(n)
        if self.c is not None:
            block = block + (self.c * d_weights[:, None]).T @ self.c
        m[:n, :n] = block
        if n_eq:
            m[:n, n:] = self.a.T
            m[n:, :n] = self.a
            m[n:, n:] = -delta_e * np.eye(n_eq)
        self._lu = sla.lu_factor(m)

    def solve(self, rhs):
        return sla.lu_solve(self._lu, rhs)


class _SparseKkt:
    def __init__(self, h_mat, a_mat, c_mat, n, n_eq):
        self.h = sp.csr_matrix(h_mat)
        self.a = None if a_mat is None else sp.csr_matrix(a_mat)
        self.c = None if c_mat is None else sp.csr_matrix(c_mat)
        self.n, self.n_eq = n, n_eq
        self._eye_n = sp.identity(n, format="csr")

    def factor(self, d_weights, delta, delta_e):
        n, n_eq = self.n, self.n_eq
        block = self.h + delta * self._eye_n
        if self.c is not None:
            block = block + self.c.T @ sp.diags(d_weights) @ self.c
        if n_eq:
            m = sp.bmat(
                [[block, self.a.T],
                 [self.a, -delta_e * sp.identity(n_eq)]],
                format="csc",
            )
        else:
            m = sp.csc_matrix(block)
        self._lu = spla.splu(m)

    def solve(self, rhs):
        return self._lu.solve(rhs)


def solve_qp(h_mat, g, a_mat=None, b=None, c_mat=None, h_vec=None, *,
             tol: float = 1e-10, max_iter: int = 100,
             delta: float = 1e-11) -> QpResult:
    """Solve one inequality-constrained QP.

    h_mat may be dense, sparse, or a 1-D array interpreted as a diagonal.
    Pass a_mat/b for equalities and c_mat/h_vec for inequalities; either
    block may be absent.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    if isinstance(h_mat, np.ndarray) and h_mat.ndim == 1:
        h_mat = np.diag(h_mat)
    n_eq = 0 if b is None else np.asarray(b).size
    n_in = 0 if h_vec is None else np.asarray(h_vec).size
    b = None if b is None else np.asarray(b, dtype=float)
    h_vec = None if h_vec is None else np.asarray(h_vec, dtype=float)

    large = (n + n_eq) >= _SPARSE_THRESHOLD or sp.issparse(h_mat) or \
        sp.issparse(a_mat) or sp.issparse(c_mat)
    kkt_cls = _SparseKkt if large else _DenseKkt
    kkt = kkt_cls(h_mat, a_mat if n_eq else None, c_mat if n_in else None, n, n_eq)
    a_op = kkt.a
    c_op = kkt.c

    scale = 1.0 + max(
        np.max(np.abs(g)),
        0.0 if b is None else np.max(np.abs(b), initial=0.0),
        0.0 if h_vec is None else np.max(np.abs(h_vec), initial=0.0),
    )

    # no inequalities: one symmetric solve is exact
    if n_in == 0:
        try:
            kkt.factor(np.zeros(0), delta, delta)
            sol = kkt.solve(np.concatenate([-g, b]) if n_eq else -g)
        except (sla.LinAlgError, RuntimeError, ValueError):
            return QpResult(np.zeros(n), np.zeros(n_eq), np.zeros(0), "failure", 0)
        d = sol[:n]
        lam = sol[n:] if n_eq else np.zeros(0)
        if not np.all(np.isfinite(d)):
            return QpResult(np.zeros(n), np.zeros(n_eq), np.zeros(0), "failure", 0)
        return QpResult(d, lam, np.zeros(0), "converged", 1)

    d = np.zeros(n)
    lam = np.zeros(n_eq)
    s = np.maximum(h_vec, 0.1)
    mu = np.full(n_in, max(1.0, scale / n_in) ** 0.5)

    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        cd = c_op @ d
        r_d = kkt.h @ d + g + (c_op.T @ mu)
        if n_eq:
            r_d = r_d + a_op.T @ lam
            r_p = a_op @ d - b
        else:
            r_p = np.zeros(0)
        r_g = cd + s - h_vec
        comp = float(s @ mu) / n_in

        res = max(np.max(np.abs(r_d)), np.max(np.abs(r_g), initial=0.0),
                  np.max(np.abs(r_p), initial=0.0))
        # absolute targets, with a machine-precision floor relative to the
        # data scale so badly scaled problems terminate cleanly
        floor = 5e-14 * scale
        if res <= max(tol, floor) and comp <= max(tol, floor):
            status = "converged"
            break
        if not np.isfinite(res) or not np.isfinite(comp):
            return QpResult(d, lam, mu, "failure", it)

        dw = mu / s
        try:
            kkt.factor(dw, delta, delta)
        except (sla.LinAlgError, RuntimeError, ValueError):
            try:
                kkt.factor(dw, max(delta * 1e6, 1e-8), max(delta * 1e6, 1e-8))
            except (sla.LinAlgError, RuntimeError, ValueError):
                return QpResult(d, lam, mu, "failure", it)

        def step(rc):
            rhs_top = -(r_d + c_op.T @ (dw * r_g - rc / s))
            rhs = np.concatenate([rhs_top, -r_p]) if n_eq else rhs_top
            sol = kkt.solve(rhs)
            dd = sol[:n]
            dl = sol[n:] if n_eq else np.zeros(0)
            ds = -r_g - (c_op @ dd)
            dmu = -(rc / s) - dw * ds
            return dd, dl, ds, dmu

        # predictor
        dd, dl, ds, dmu = step(s * mu)
        a_p = _fraction_to_boundary(s, ds, 1.0)
        a_d = _fraction_to_boundary(mu, dmu, 1.0)
        comp_aff = float((s + a_p * ds) @ (mu + a_d * dmu)) / n_in
        sigma = min(1.0, max(0.0, comp_aff / comp)) ** 3

        # corrector
        rc = s * mu + ds * dmu - sigma * comp
        dd, dl, ds, dmu = step(rc)
        a_p = _fraction_to_boundary(s, ds, 0.995)
        a_d = _fraction_to_boundary(mu, dmu, 0.995)

        d = d + a_p * dd
        s = s + a_p * ds
        mu = mu + a_d * dmu
        if n_eq:
            lam = lam + a_d * dl
        if not (np.all(np.isfinite(d)) and np.all(s > 0.0) and np.all(mu > 0.0)):
            return QpResult(d, lam, mu, "failure", it)

    return QpResult(d, lam, np.maximum(mu, 0.0), status, it)
