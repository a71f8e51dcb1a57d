"""Receding-horizon controllers built on the parametric NLP solver.

The transcription is multiple shooting with decision vector
w = (x_1, ..., x_N, u_0, ..., u_{N-1}); the measured state x_0 enters as
data, so the first defect row doubles as the initial-state pin.  Safety
enters as one composite barrier decrease constraint per step, evaluated at
the step's wall-clock time so moving obstacles are handled by the same
code path.

Controllers differ only in horizon length and terminal value handle:
the full-horizon safety-constrained controller uses no terminal, the
short-horizon variants bolt a learned (or exact) value function onto the
last predicted state.
"""

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import (ContinuousModel, rk4_step, rk4_step_hessian_vp,
                       rk4_step_jacobians)
from .parnlp import KktPoint, NlpProblem, SolverError, SolverOptions, solve
from .safety import (SafetySpec, composite_h, composite_h_gradient,
                     composite_h_hessian)
from .valuenet import MlpNetwork

_Q_DEFAULTS = {
    "unicycle": np.array([10.0, 10.0, 1.0]),
    "quadrotor": np.array([10.0, 10.0, 10.0, 2.0, 2.0, 2.0,
                           1.0, 1.0, 1.0, 0.5, 0.5, 0.5]),
}
_R_DEFAULTS = {
    "unicycle": np.array([1.0, 1.0]),
    "quadrotor": np.array([0.1, 0.1, 0.1, 0.1]),
}


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def error_map(model: ContinuousModel, goal):
    """Constant affine map e(x) = E x + e0 measuring deviation from goal.

    Euclidean states use the identity; the quadrotor replaces the
    quaternion block by the vector part of q_goal^-1 * q, which is linear
    in q and vanishes exactly at the goal attitude.
    """
    goal = np.asarray(goal, dtype=float)
    if goal.shape != (model.n_x,):
        raise ValueError(f"goal must have shape ({model.n_x},)")
    if model.name != "quadrotor":
        return np.eye(model.n_x), -goal

    q_goal = goal[3:7]
    norm = np.linalg.norm(q_goal)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("goal quaternion must be normalized")
    w_g, v_g = q_goal[0], q_goal[1:4]
    att = np.zeros((3, 4))
    att[:, 0] = -v_g
    att[:, 1:] = w_g * np.eye(3) - _skew(v_g)
    e_mat = np.zeros((12, 13))
    e_mat[0:3, 0:3] = np.eye(3)
    e_mat[3:6, 3:7] = att
    e_mat[6:9, 7:10] = np.eye(3)
    e_mat[9:12, 10:13] = np.eye(3)
    e0 = np.concatenate([-goal[0:3], np.zeros(3), -goal[7:10], -goal[10:13]])
    return e_mat, e0


@dataclass(frozen=True)
class OcpSpec:
    """Finite-horizon optimal control problem description.

    q_diag weights the error coordinates e(x) = error_matrix x +
    error_offset (state coordinates for Euclidean systems), r_diag the
    deviation of the inputs from input_ref.
    """

    model: ContinuousModel
    horizon: int
    dt: float
    goal: np.ndarray
    q_diag: np.ndarray
    r_diag: np.ndarray
    input_ref: np.ndarray
    error_matrix: np.ndarray
    error_offset: np.ndarray
    safety: Optional[SafetySpec]
    state_lower: np.ndarray
    state_upper: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        n_e = self.error_matrix.shape[0]
        if self.q_diag.shape != (n_e,) or np.any(self.q_diag < 0.0):
            raise ValueError("q_diag must be nonnegative, one entry per error"
                             " coordinate")
        if self.r_diag.shape != (self.model.n_u,) or np.any(self.r_diag <= 0.0):
            raise ValueError("r_diag must be positive with one entry per input")
        if self.input_ref.shape != (self.model.n_u,):
            raise ValueError("input_ref has the wrong length")
        if self.error_matrix.shape[1] != self.model.n_x:
            raise ValueError("error_matrix column count must equal n_x")

    @property
    def n_w(self):
        return self.horizon * (self.model.n_x + self.model.n_u)


def make_ocp_spec(model: ContinuousModel, goal, horizon, *, dt=None,
                  q_diag=None, r_diag=None, safety=None, input_ref=None,
                  state_lower=None, state_upper=None):
    """Build an OcpSpec with per-model defaults for the cost weights."""
    dt = model.dt_default if dt is None else float(dt)
    e_mat, e_off = error_map(model, goal)
    if q_diag is None:
        if model.name not in _Q_DEFAULTS:
            raise ValueError(f"no default state weights for '{model.name}';"
                             " pass q_diag")
        q_diag = _Q_DEFAULTS[model.name]
    if r_diag is None:
        if model.name not in _R_DEFAULTS:
            raise ValueError(f"no default input weights for '{model.name}';"
                             " pass r_diag")
        r_diag = _R_DEFAULTS[model.name]
    if input_ref is None:
        input_ref = np.zeros(model.n_u)
    lower = np.full(model.n_x, -np.inf) if state_lower is None \
        else np.asarray(state_lower, dtype=float)
    upper = np.full(model.n_x, np.inf) if state_upper is None \
        else np.asarray(state_upper, dtype=float)
    if lower.shape != (model.n_x,) or upper.shape != (model.n_x,):
        raise ValueError("state bounds must have one entry per state")
    if np.any(lower >= upper):
        raise ValueError("state_lower must be strictly below state_upper")
    return OcpSpec(
        model=model, horizon=int(horizon), dt=dt,
        goal=np.asarray(goal, dtype=float),
        q_diag=np.asarray(q_diag, dtype=float),
        r_diag=np.asarray(r_diag, dtype=float),
        input_ref=np.asarray(input_ref, dtype=float),
        error_matrix=e_mat, error_offset=e_off,
        safety=safety, state_lower=lower, state_upper=upper,
    )


class QuadraticValue:
    """Terminal value (x - c)' S (x - c) with symmetric S."""

    def __init__(self, s_matrix, center=None):
        self.s_matrix = np.asarray(s_matrix, dtype=float)
        n = self.s_matrix.shape[0]
        if self.s_matrix.shape != (n, n):
            raise ValueError("s_matrix must be square")
        self.center = np.zeros(n) if center is None \
            else np.asarray(center, dtype=float)

    def value(self, x):
        d = x - self.center
        return float(d @ self.s_matrix @ d)

    def grad(self, x):
        return 2.0 * self.s_matrix @ (x - self.center)

    def hess(self, x):
        return 2.0 * self.s_matrix


class NetworkValue:
    """Terminal value from a trained scalar network."""

    def __init__(self, net: MlpNetwork):
        if net.n_out != 1:
            raise ValueError("terminal network must have one output")
        self.net = net

    def value(self, x):
        return self.net.value(x)

    def grad(self, x):
        return self.net.grad_input(x)

    def hess(self, x):
        return self.net.hess_input(x)


class AdaptiveValue:
    """Parameter-adaptive terminal: V(x) plus the value sensitivity
    contracted with the parameter deviation from nominal."""

    def __init__(self, value_net: MlpNetwork, sens_net: MlpNetwork,
                 delta_theta):
        if value_net.n_out != 1:
            raise ValueError("value head must have one output")
        if sens_net.n_in != value_net.n_in:
            raise ValueError("heads must share the input dimension")
        delta_theta = np.asarray(delta_theta, dtype=float)
        if delta_theta.shape != (sens_net.n_out,):
            raise ValueError("delta_theta length must match the sensitivity"
                             " head output")
        self.value_net = value_net
        self.sens_net = sens_net
        self.delta_theta = delta_theta

    def value(self, x):
        corr = float(self.sens_net.forward(np.asarray(x, dtype=float))
                     @ self.delta_theta)
        return self.value_net.value(x) + corr

    def grad(self, x):
        g = self.value_net.grad_input(x)
        if np.any(self.delta_theta):
            g = g + self.sens_net.grad_input(x, output_weights=self.delta_theta)
        return g

    def hess(self, x):
        h = self.value_net.hess_input(x)
        if np.any(self.delta_theta):
            h = h + self.sens_net.hess_input(x, output_weights=self.delta_theta)
        return h


def _psd_projection(mat):
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def split_w(spec: OcpSpec, w):
    """Split the decision vector into states (N, n_x) and inputs (N, n_u)."""
    n_x, n_u, n = spec.model.n_x, spec.model.n_u, spec.horizon
    xs = np.asarray(w[:n * n_x]).reshape(n, n_x)
    us = np.asarray(w[n * n_x:]).reshape(n, n_u)
    return xs, us


def join_w(spec: OcpSpec, xs, us):
    return np.concatenate([np.asarray(xs).ravel(), np.asarray(us).ravel()])


def build_ocp(spec: OcpSpec, x0, terminal=None, t0=0.0) -> NlpProblem:
    """Transcribe the OCP at initial state x0 into a parametric NlpProblem.

    The NLP parameter vector is the model's physical parameter theta, so
    value sensitivities from the solver are exactly dV/dtheta.  The stage
    cost at k=0 is a constant but is kept in the objective so the optimal
    value equals the full trajectory cost.
    """
    model = spec.model
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n_x,):
        raise ValueError(f"x0 must have shape ({model.n_x},)")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if terminal is not None:
        probe = terminal.grad(spec.goal)
        if np.asarray(probe).shape != (model.n_x,):
            raise ValueError("terminal handle does not match the state size")

    n, n_x, n_u = spec.horizon, model.n_x, model.n_u
    dt = spec.dt
    e_mat, e_off = spec.error_matrix, spec.error_offset
    q, r = spec.q_diag, spec.r_diag
    u_ref = spec.input_ref
    times = t0 + dt * np.arange(n + 1)

    # constant pieces of the quadratic cost
    qx_block = 2.0 * e_mat.T @ (q[:, None] * e_mat)
    base_hess = np.zeros((spec.n_w, spec.n_w))
    for k in range(n):
        i = k * n_x
        base_hess[i:i + n_x, i:i + n_x] = qx_block
        j = n * n_x + k * n_u
        base_hess[j:j + n_u, j:j + n_u] = np.diag(2.0 * r)

    def objective(w, theta):
        xs, us = split_w(spec, w)
        e = np.vstack([x0[None, :], xs]) @ e_mat.T + e_off
        val = float(np.sum(e ** 2 @ q))
        du = us - u_ref
        val += float(np.sum(du ** 2 @ r))
        if terminal is not None:
            val += terminal.value(xs[-1])
        return val

    def objective_grad(w, theta):
        xs, us = split_w(spec, w)
        grad = np.empty(spec.n_w)
        e = xs @ e_mat.T + e_off
        grad[:n * n_x] = (2.0 * (e * q) @ e_mat).ravel()
        grad[n * n_x:] = (2.0 * (us - u_ref) * r).ravel()
        if terminal is not None:
            grad[(n - 1) * n_x:n * n_x] += terminal.grad(xs[-1])
        return grad

    def objective_hess(w, theta):
        if terminal is None:
            return base_hess
        xs, _ = split_w(spec, w)
        hess = base_hess.copy()
        i = (n - 1) * n_x
        hess[i:i + n_x, i:i + n_x] += _psd_projection(terminal.hess(xs[-1]))
        return hess

    # the defect rows are independent across the horizon once the predecessor
    # states are stacked next to the inputs, so every dynamics evaluation
    # below is one batched kernel call instead of a python loop
    def eq_constraints(w, theta):
        xs, us = split_w(spec, w)
        prev = np.concatenate([x0[None, :], xs[:-1]])
        return (xs - rk4_step(model, prev, us, dt, theta)).ravel()

    def eq_jacobian(w, theta):
        xs, us = split_w(spec, w)
        prev = np.concatenate([x0[None, :], xs[:-1]])
        _, jx, ju, _ = rk4_step_jacobians(model, prev, us, dt, theta)
        jac = np.zeros((n * n_x, spec.n_w))
        for k in range(n):
            rows = slice(k * n_x, (k + 1) * n_x)
            jac[rows, k * n_x:(k + 1) * n_x] = np.eye(n_x)
            if k > 0:
                jac[rows, (k - 1) * n_x:k * n_x] = -jx[k]
            jcol = n * n_x + k * n_u
            jac[rows, jcol:jcol + n_u] = -ju[k]
        return jac

    def eq_jacobian_theta(w, theta):
        xs, us = split_w(spec, w)
        prev = np.concatenate([x0[None, :], xs[:-1]])
        _, _, _, jt = rk4_step_jacobians(model, prev, us, dt, theta)
        return -jt.reshape(n * n_x, model.n_theta)

    # constant box rows: inputs first, then any finite state bounds
    box_rows = []
    box_rhs = []  # row' w <= rhs encoded as g = row'w - rhs
    for k in range(n):
        j = n * n_x + k * n_u
        for i in range(n_u):
            if np.isfinite(model.input_upper[i]):
                row = np.zeros(spec.n_w)
                row[j + i] = 1.0
                box_rows.append(row)
                box_rhs.append(model.input_upper[i])
            if np.isfinite(model.input_lower[i]):
                row = np.zeros(spec.n_w)
                row[j + i] = -1.0
                box_rows.append(row)
                box_rhs.append(-model.input_lower[i])
    for k in range(n):
        for i in range(n_x):
            if np.isfinite(spec.state_upper[i]):
                row = np.zeros(spec.n_w)
                row[k * n_x + i] = 1.0
                box_rows.append(row)
                box_rhs.append(spec.state_upper[i])
            if np.isfinite(spec.state_lower[i]):
                row = np.zeros(spec.n_w)
                row[k * n_x + i] = -1.0
                box_rows.append(row)
                box_rhs.append(-spec.state_lower[i])
    box_mat = np.array(box_rows) if box_rows else np.zeros((0, spec.n_w))
    box_rhs = np.array(box_rhs)
    n_box = box_mat.shape[0]
    n_cbf = n if spec.safety is not None else 0
    gamma = spec.safety.gamma if spec.safety is not None else None

    def ineq_constraints(w, theta):
        g = np.empty(n_cbf + n_box)
        if n_cbf:
            xs, _ = split_w(spec, w)
            h = np.empty(n + 1)
            h[0] = composite_h(x0, spec.safety, t=times[0])
            h[1:] = composite_h(xs, spec.safety, t=times[1:])
            g[:n_cbf] = (1.0 - gamma) * h[:-1] - h[1:]
        if n_box:
            g[n_cbf:] = box_mat @ w - box_rhs
        return g

    def ineq_jacobian(w, theta):
        if not n_cbf:
            return box_mat
        xs, _ = split_w(spec, w)
        jac = np.zeros((n_cbf + n_box, spec.n_w))
        _, grads = composite_h_gradient(xs, spec.safety, t=times[1:])
        for k in range(n):
            jac[k, k * n_x:(k + 1) * n_x] = -grads[k]
            if k > 0:
                jac[k, (k - 1) * n_x:k * n_x] += (1.0 - gamma) * grads[k - 1]
        if n_box:
            jac[n_cbf:] = box_mat
        return jac

    lagrangian_hessian = None
    if model.rhs_hessian_vp is not None:
        def lagrangian_hessian(w, theta, lam, mu):
            xs, us = split_w(spec, w)
            hess = base_hess.copy()
            if terminal is not None:
                i = (n - 1) * n_x
                hess[i:i + n_x, i:i + n_x] += terminal.hess(xs[-1])
            prev = np.concatenate([x0[None, :], xs[:-1]])
            hk = rk4_step_hessian_vp(model, prev, us, lam.reshape(n, n_x),
                                     dt, theta)
            for k in range(n):
                uu = slice(n * n_x + k * n_u, n * n_x + (k + 1) * n_u)
                if k == 0:
                    # x_0 is problem data, only the input block remains
                    hess[uu, uu] -= hk[0, n_x:, n_x:]
                else:
                    xx = slice((k - 1) * n_x, k * n_x)
                    hess[xx, xx] -= hk[k, :n_x, :n_x]
                    hess[xx, uu] -= hk[k, :n_x, n_x:]
                    hess[uu, xx] -= hk[k, n_x:, :n_x]
                    hess[uu, uu] -= hk[k, n_x:, n_x:]
            if n_cbf:
                act = mu[:n_cbf] != 0.0
                need = act.copy()
                need[:-1] |= act[1:]
                idx = np.flatnonzero(need)
                h2 = np.zeros((n, n_x, n_x))
                if idx.size:
                    h2[idx] = composite_h_hessian(xs[idx], spec.safety,
                                                  t=times[idx + 1])
                for k in np.flatnonzero(act):
                    blk = slice(k * n_x, (k + 1) * n_x)
                    hess[blk, blk] -= mu[k] * h2[k]
                    if k > 0:
                        blk0 = slice((k - 1) * n_x, k * n_x)
                        hess[blk0, blk0] += mu[k] * (1.0 - gamma) * h2[k - 1]
            return hess

    return NlpProblem(
        n_w=spec.n_w,
        n_theta=model.n_theta,
        objective=objective,
        objective_grad=objective_grad,
        objective_hess=objective_hess,
        n_eq=n * n_x,
        eq_constraints=eq_constraints,
        eq_jacobian=eq_jacobian,
        eq_jacobian_theta=eq_jacobian_theta,
        n_ineq=n_cbf + n_box,
        ineq_constraints=ineq_constraints,
        ineq_jacobian=ineq_jacobian,
        lagrangian_hessian=lagrangian_hessian,
        name=f"ocp_{model.name}_n{n}",
    )


@dataclass
class ControlResult:
    """One receding-horizon step: the applied input plus the full plan."""

    u0: np.ndarray
    predicted_states: np.ndarray
    predicted_inputs: np.ndarray
    objective_value: float
    solve_time: float
    solver_status: str
    iterations: int
    kkt_point: Optional[KktPoint]


def cold_start(spec: OcpSpec, x0, theta):
    """Reference-input rollout: equality-feasible by construction."""
    model = spec.model
    u = np.clip(spec.input_ref, model.input_lower, model.input_upper)
    us = np.tile(u, (spec.horizon, 1))
    xs = np.empty((spec.horizon, model.n_x))
    prev = np.asarray(x0, dtype=float)
    for k in range(spec.horizon):
        prev = rk4_step(model, prev, us[k], spec.dt, theta)
        xs[k] = prev
    return join_w(spec, xs, us)


class MpcController:
    """Receding-horizon controller with shifted warm starts.

    Holds mutable warm-start state; confine each instance to a single
    control loop.  theta is the parameter vector the controller plans
    with (the belief), not necessarily the true plant parameters.
    """

    def __init__(self, spec: OcpSpec, terminal=None, theta=None,
                 options: Optional[SolverOptions] = None, label=""):
        self.spec = spec
        self.terminal = terminal
        self.theta = np.array(
            spec.model.theta_nominal if theta is None else theta, dtype=float)
        if self.theta.shape != (spec.model.n_theta,):
            raise ValueError("theta has the wrong length")
        self.options = options if options is not None else SolverOptions()
        self.label = label or f"mpc_{spec.model.name}_n{spec.horizon}"
        self._warm = None

    def reset(self):
        self._warm = None

    def _shifted_guess(self, x0):
        xs, us = self._warm
        model = self.spec.model
        us_new = np.vstack([us[1:], us[-1:]])
        tail = rk4_step(model, xs[-1], us[-1], self.spec.dt, self.theta)
        xs_new = np.vstack([xs[1:], tail[None, :]])
        return join_w(self.spec, xs_new, us_new)

    def step(self, x, t=0.0) -> ControlResult:
        model = self.spec.model
        x = np.asarray(x, dtype=float)
        if model.canonicalize is not None:
            x = model.canonicalize(x)
        problem = build_ocp(self.spec, x, terminal=self.terminal, t0=t)

        started = time.perf_counter()
        point = None
        attempts = []
        if self._warm is not None:
            attempts.append(self._shifted_guess(x))
        attempts.append(cold_start(self.spec, x, self.theta))
        last_error = None
        for w0 in attempts:
            try:
                point = solve(problem, self.theta, w0=w0, options=self.options)
                break
            except SolverError as err:
                last_error = err
        if point is None:
            self._warm = None
            raise last_error
        elapsed = time.perf_counter() - started

        xs, us = split_w(self.spec, point.w)
        self._warm = (xs.copy(), us.copy())
        u0 = np.clip(us[0], model.input_lower, model.input_upper)
        return ControlResult(
            u0=u0,
            predicted_states=np.vstack([x[None, :], xs]),
            predicted_inputs=us.copy(),
            objective_value=point.objective_value,
            solve_time=elapsed,
            solver_status=point.status,
            iterations=point.iterations,
            kkt_point=point,
        )


def cbf_mpc_controller(spec: OcpSpec, theta=None, options=None):
    """Full-horizon safety-constrained controller (the expert)."""
    return MpcController(spec, terminal=None, theta=theta, options=options,
                         label=f"cbf_mpc_{spec.model.name}")


def short_horizon_controller(spec: OcpSpec, theta=None, options=None):
    """Short-horizon controller without terminal value (the ablation)."""
    return MpcController(spec, terminal=None, theta=theta, options=options,
                         label=f"short_{spec.model.name}")


def neural_mpc_controller(spec: OcpSpec, value_net: MlpNetwork, theta=None,
                          options=None):
    """Short-horizon controller with a fixed learned terminal value."""
    return MpcController(spec, terminal=NetworkValue(value_net), theta=theta,
                         options=options, label=f"neural_{spec.model.name}")


def ban_mpc_controller(spec: OcpSpec, value_net: MlpNetwork,
                       sens_net: MlpNetwork, theta, theta_nom=None,
                       options=None):
    """Short-horizon controller with the parameter-adaptive terminal.

    theta is the (estimated or true) parameter vector: it drives both the
    prediction model and the first-order terminal correction about the
    nominal parameters.
    """
    theta = np.asarray(theta, dtype=float)
    nom = np.array(spec.model.theta_nominal if theta_nom is None
                   else theta_nom, dtype=float)
    terminal = AdaptiveValue(value_net, sens_net, theta - nom)
    return MpcController(spec, terminal=terminal, theta=theta,
                         options=options, label=f"ban_mpc_{spec.model.name}")


def ampc_policy(net: MlpNetwork, x0, model: ContinuousModel):
    """Imitation policy: network input clamped to the actuator bounds.

    No constraint enforcement of any kind; this baseline is intentionally
    capable of leaving the safe set.
    """
    x0 = np.asarray(x0, dtype=float)
    if net.n_in != model.n_x or net.n_out != model.n_u:
        raise ValueError("policy network dimensions do not match the model")
    u = net.forward(x0)
    return np.clip(u, model.input_lower, model.input_upper)


class AmpcController:
    """Wraps the imitation policy in the controller interface."""

    def __init__(self, net: MlpNetwork, model: ContinuousModel, label=""):
        if net.n_in != model.n_x or net.n_out != model.n_u:
            raise ValueError("policy network dimensions do not match the model")
        self.net = net
        self.model = model
        self.label = label or f"ampc_{model.name}"

    def reset(self):
        pass

    def step(self, x, t=0.0) -> ControlResult:
        x = np.asarray(x, dtype=float)
        if self.model.canonicalize is not None:
            x = self.model.canonicalize(x)
        started = time.perf_counter()
        u = ampc_policy(self.net, x, self.model)
        elapsed = time.perf_counter() - started
        return ControlResult(
            u0=u,
            predicted_states=x[None, :].copy(),
            predicted_inputs=u[None, :].copy(),
            objective_value=float("nan"),
            solve_time=elapsed,
            solver_status="converged",
            iterations=0,
            kkt_point=None,
        )
