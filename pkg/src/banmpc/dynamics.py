"""Vehicle models and discrete-time propagation.

Two systems are provided: a differential-drive unicycle whose commanded
velocities are scaled by uncertain actuation gains, and a 13-state quadrotor
driven by four rotor thrusts.  Both expose the continuous vector field, its
Jacobians with respect to state, input, and physical parameters, and a
classical fourth-order Runge-Kutta step with zero-order-hold inputs.

All Jacobians are written out by hand so that optimization layers built on
top of these models never have to fall back on finite differences.  Every
kernel broadcasts over leading batch dimensions: stacking states as
(N, n_x) and inputs as (N, n_u) evaluates a whole horizon's worth of
dynamics in one call, which is exactly what the trajectory optimizer does
once per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

GRAVITY = 9.81

__all__ = [
    "ContinuousModel",
    "ModelParams",
    "unicycle",
    "quadrotor",
    "hover_input",
    "angle_wrap",
    "rk4_step",
    "rk4_step_jacobians",
    "rk4_step_hessian_vp",
]


def angle_wrap(psi: float) -> float:
    """Map an angle to the half-open interval (-pi, pi]."""
    return np.pi - (np.pi - psi) % (2.0 * np.pi)


@dataclass
class ModelParams:
    """Physical parameter vector together with its nominal value.

    theta is what a controller or simulator actually uses; theta_nom is the
    value the offline artifacts (value functions, datasets) were built at.
    """

    theta: np.ndarray
    theta_nom: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.theta_nom = np.atleast_1d(np.asarray(self.theta_nom, dtype=float))
        if self.theta.shape != self.theta_nom.shape:
            raise ValueError(
                f"theta shape {self.theta.shape} does not match "
                f"theta_nom shape {self.theta_nom.shape}"
            )
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.theta_nom))):
            raise ValueError("model parameters must be finite")

    @property
    def deviation(self) -> np.ndarray:
        return self.theta - self.theta_nom


@dataclass(frozen=True)
class ContinuousModel:
    """A controlled ODE  dx/dt = f(x, u, theta)  plus metadata.

    Attributes
    ----------
    name : str
        Identifier used in scenario files and dataset headers.
    n_x, n_u, n_theta : int
        State, input, and parameter dimensions.
    position_dim : int
        Length of the leading position block of the state (2 for planar
        vehicles, 3 for free-flying ones).  Safety certificates act on it.
    rhs : callable
        rhs(x, u, theta) -> (n_x,).  Accepts leading batch dimensions on
        x and u, as do all the other callables below.
    jacobians : callable
        jacobians(x, u, theta) -> (df/dx, df/du, df/dtheta).
    theta_nominal : ndarray
        Default parameter vector.
    input_lower, input_upper : ndarray
        Actuator limits.
    dt_default : float
        Sampling time the system is normally run at.
    project : callable, optional
        Applied after every integration step (quaternion renormalization).
    project_jacobian : callable, optional
        Jacobian of ``project``.
    canonicalize : callable, optional
        Applied to closed-loop states only (angle wrapping); never used
        inside a prediction horizon because it is not differentiable.
    rhs_hessian_vp : callable, optional
        rhs_hessian_vp(x, u, theta, p) -> symmetric (n_x+n_u, n_x+n_u)
        second derivative of p . f(x, u, theta) w.r.t. the stacked (x, u)
        argument.  Enables exact-Newton steps in the trajectory solver.
    """

    name: str
    n_x: int
    n_u: int
    n_theta: int
    position_dim: int
    rhs: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jacobians: Callable[[np.ndarray, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]
    theta_nominal: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    dt_default: float
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    project_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    canonicalize: Optional[Callable[[np.ndarray], np.ndarray]] = None
    rhs_hessian_vp: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    project_hessian_vp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


# ---------------------------------------------------------------------------
# unicycle
# ---------------------------------------------------------------------------

def _unicycle_rhs(x, u, theta):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi = x[..., 2]
    v = theta[0] * u[..., 0]
    return np.stack([v * np.cos(psi), v * np.sin(psi), theta[1] * u[..., 1]],
                    axis=-1)


def _unicycle_jacobians(x, u, theta):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi = x[..., 2]
    c, s = np.cos(psi), np.sin(psi)
    v = theta[0] * u[..., 0]
    batch = psi.shape
    fx = np.zeros(batch + (3, 3))
    fx[..., 0, 2] = -v * s
    fx[..., 1, 2] = v * c
    fu = np.zeros(batch + (3, 2))
    fu[..., 0, 0] = theta[0] * c
    fu[..., 1, 0] = theta[0] * s
    fu[..., 2, 1] = theta[1]
    ftheta = np.zeros(batch + (3, 2))
    ftheta[..., 0, 0] = u[..., 0] * c
    ftheta[..., 1, 0] = u[..., 0] * s
    ftheta[..., 2, 1] = u[..., 1]
    return fx, fu, ftheta


def _unicycle_hessian_vp(x, u, theta, p):
    # p.f = p0 g_v v cos(psi) + p1 g_v v sin(psi) + p2 g_w w; variables are
    # stacked (x, y, psi, v, w), so curvature lives in the (psi, v) corner
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    psi = x[..., 2]
    c, s = np.cos(psi), np.sin(psi)
    hess = np.zeros(psi.shape + (5, 5))
    hess[..., 2, 2] = theta[0] * u[..., 0] * (-p[..., 0] * c - p[..., 1] * s)
    cross = theta[0] * (-p[..., 0] * s + p[..., 1] * c)
    hess[..., 2, 3] = cross
    hess[..., 3, 2] = cross
    return hess


def _unicycle_canonicalize(x):
    out = np.array(x, dtype=float)
    out[..., 2] = angle_wrap(out[..., 2])
    return out


def unicycle(dt: float = 0.1) -> ContinuousModel:
    """Differential-drive robot with multiplicative actuation gains.

    State (x, y, psi), input (v, omega).  The gains theta = (g_v, g_w)
    scale the two input channels; nominally both are 1.  Velocity limits
    match a small ground robot: |v| <= 0.26 m/s, |omega| <= 1.8 rad/s.
    """
    return ContinuousModel(
        name="unicycle",
        n_x=3,
        n_u=2,
        n_theta=2,
        position_dim=2,
        rhs=_unicycle_rhs,
        jacobians=_unicycle_jacobians,
        theta_nominal=np.array([1.0, 1.0]),
        input_lower=np.array([-0.26, -1.8]),
        input_upper=np.array([0.26, 1.8]),
        dt_default=dt,
        canonicalize=_unicycle_canonicalize,
        rhs_hessian_vp=_unicycle_hessian_vp,
    )


# ---------------------------------------------------------------------------
# quadrotor
# ---------------------------------------------------------------------------
#
# State layout (13):  p (3), q = (qw, qx, qy, qz) unit quaternion (4),
#                     v world velocity (3), omega body rates (3).
# Input: four rotor thrusts T0..T3 >= 0.
# Parameters theta: (mass, d_x, d_y, c_tau, Jx, Jy, Jz).

# Signs of each rotor's contribution to the body torque components.  Rotors
# 0..3 sit at (+dx,-dy), (-dx,-dy), (+dx,+dy), (-dx,+dy); diagonal pairs spin
# the same way, so the drag torques cancel when all four thrusts are equal.
_TAU_X_SIGNS = np.array([-1.0, -1.0, 1.0, 1.0])
_TAU_Y_SIGNS = np.array([-1.0, 1.0, -1.0, 1.0])
_TAU_Z_SIGNS = np.array([-1.0, 1.0, 1.0, -1.0])


def _thrust_axis(q):
    # third column of R(q): body z expressed in the world frame
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        2.0 * (qx * qz + qw * qy),
        2.0 * (qy * qz - qw * qx),
        1.0 - 2.0 * (qx * qx + qy * qy),
    ], axis=-1)


def _thrust_axis_jacobian(q):
    # d(axis)/dq, columns ordered (qw, qx, qy, qz)
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(qw)
    return np.stack([
        np.stack([2 * qy, 2 * qz, 2 * qw, 2 * qx], axis=-1),
        np.stack([-2 * qx, -2 * qw, 2 * qz, 2 * qy], axis=-1),
        np.stack([zero, -4 * qx, -4 * qy, zero], axis=-1),
    ], axis=-2)


def _quadrotor_rhs(x, u, theta):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    mass, dx_arm, dy_arm, c_tau, jx, jy, jz = theta

    qw, qx, qy, qz = x[..., 3], x[..., 4], x[..., 5], x[..., 6]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]

    xdot = np.empty(x.shape[:-1] + (13,))
    xdot[..., 0:3] = x[..., 7:10]

    xdot[..., 3] = -0.5 * (wx * qx + wy * qy + wz * qz)
    xdot[..., 4] = 0.5 * (wx * qw + wz * qy - wy * qz)
    xdot[..., 5] = 0.5 * (wy * qw - wz * qx + wx * qz)
    xdot[..., 6] = 0.5 * (wz * qw + wy * qx - wx * qy)

    t_total = np.sum(u, axis=-1, keepdims=True)
    xdot[..., 7:10] = _thrust_axis(x[..., 3:7]) * (t_total / mass)
    xdot[..., 9] -= GRAVITY

    tau_x = dy_arm * (u @ _TAU_X_SIGNS)
    tau_y = dx_arm * (u @ _TAU_Y_SIGNS)
    tau_z = c_tau * (u @ _TAU_Z_SIGNS)
    xdot[..., 10] = (tau_x - (jz - jy) * wy * wz) / jx
    xdot[..., 11] = (tau_y - (jx - jz) * wz * wx) / jy
    xdot[..., 12] = (tau_z - (jy - jx) * wx * wy) / jz
    return xdot


def _quadrotor_jacobians(x, u, theta):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    mass, dx_arm, dy_arm, c_tau, jx, jy, jz = theta
    qw, qx, qy, qz = x[..., 3], x[..., 4], x[..., 5], x[..., 6]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]
    t_total = np.sum(u, axis=-1, keepdims=True)

    batch = x.shape[:-1]
    fx = np.zeros(batch + (13, 13))
    fu = np.zeros(batch + (13, 4))
    ftheta = np.zeros(batch + (13, 7))

    # position
    fx[..., 0:3, 7:10] = np.eye(3)

    # quaternion kinematics, linear in q
    fx[..., 3, 4] = -0.5 * wx
    fx[..., 3, 5] = -0.5 * wy
    fx[..., 3, 6] = -0.5 * wz
    fx[..., 4, 3] = 0.5 * wx
    fx[..., 4, 5] = 0.5 * wz
    fx[..., 4, 6] = -0.5 * wy
    fx[..., 5, 3] = 0.5 * wy
    fx[..., 5, 4] = -0.5 * wz
    fx[..., 5, 6] = 0.5 * wx
    fx[..., 6, 3] = 0.5 * wz
    fx[..., 6, 4] = 0.5 * wy
    fx[..., 6, 5] = -0.5 * wx

    fx[..., 3, 10] = -0.5 * qx
    fx[..., 3, 11] = -0.5 * qy
    fx[..., 3, 12] = -0.5 * qz
    fx[..., 4, 10] = 0.5 * qw
    fx[..., 4, 11] = -0.5 * qz
    fx[..., 4, 12] = 0.5 * qy
    fx[..., 5, 10] = 0.5 * qz
    fx[..., 5, 11] = 0.5 * qw
    fx[..., 5, 12] = -0.5 * qx
    fx[..., 6, 10] = -0.5 * qy
    fx[..., 6, 11] = 0.5 * qx
    fx[..., 6, 12] = 0.5 * qw

    # translational acceleration
    axis = _thrust_axis(x[..., 3:7])
    daxis = _thrust_axis_jacobian(x[..., 3:7])
    fx[..., 7:10, 3:7] = (t_total / mass)[..., None] * daxis
    fu[..., 7:10, :] = axis[..., :, None] / mass
    ftheta[..., 7:10, 0] = -axis * t_total / mass**2

    # rotational acceleration
    tau_x = dy_arm * (u @ _TAU_X_SIGNS)
    tau_y = dx_arm * (u @ _TAU_Y_SIGNS)
    tau_z = c_tau * (u @ _TAU_Z_SIGNS)

    fx[..., 10, 11] = -(jz - jy) * wz / jx
    fx[..., 10, 12] = -(jz - jy) * wy / jx
    fx[..., 11, 10] = -(jx - jz) * wz / jy
    fx[..., 11, 12] = -(jx - jz) * wx / jy
    fx[..., 12, 10] = -(jy - jx) * wy / jz
    fx[..., 12, 11] = -(jy - jx) * wx / jz

    fu[..., 10, :] = dy_arm * _TAU_X_SIGNS / jx
    fu[..., 11, :] = dx_arm * _TAU_Y_SIGNS / jy
    fu[..., 12, :] = c_tau * _TAU_Z_SIGNS / jz

    ftheta[..., 10, 2] = (u @ _TAU_X_SIGNS) / jx
    ftheta[..., 11, 1] = (u @ _TAU_Y_SIGNS) / jy
    ftheta[..., 12, 3] = (u @ _TAU_Z_SIGNS) / jz
    ftheta[..., 10, 4] = -(tau_x - (jz - jy) * wy * wz) / jx**2
    ftheta[..., 10, 5] = wy * wz / jx
    ftheta[..., 10, 6] = -wy * wz / jx
    ftheta[..., 11, 4] = -wz * wx / jy
    ftheta[..., 11, 5] = -(tau_y - (jx - jz) * wz * wx) / jy**2
    ftheta[..., 11, 6] = wz * wx / jy
    ftheta[..., 12, 4] = wx * wy / jz
    ftheta[..., 12, 5] = -wx * wy / jz
    ftheta[..., 12, 6] = -(tau_z - (jy - jx) * wx * wy) / jz**2

    return fx, fu, ftheta


def _quadrotor_hessian_vp(x, u, theta, p):
    """Second derivative of p . f for the quadrotor, stacked (x, u) layout.

    Curvature comes from three bilinear/quadratic couplings: quaternion
    kinematics (q x omega), the thrust axis (quadratic in q, scaled by the
    total thrust), and the gyroscopic torque (quadratic in omega).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    mass, _, _, _, jx, jy, jz = theta
    p3, p4, p5, p6 = p[..., 3], p[..., 4], p[..., 5], p[..., 6]
    pa = p[..., 7:10]
    hess = np.zeros(x.shape[:-1] + (17, 17))

    # quaternion kinematics: d2(p.f)/dw dq
    m_wq = 0.5 * np.stack([
        np.stack([p4, -p3, -p6, p5], axis=-1),
        np.stack([p5, p6, -p3, -p4], axis=-1),
        np.stack([p6, -p5, p4, -p3], axis=-1),
    ], axis=-2)
    hess[..., 10:13, 3:7] = m_wq
    hess[..., 3:7, 10:13] = np.swapaxes(m_wq, -1, -2)

    # thrust direction: quadratic in q, bilinear in (q, total thrust)
    a_qq = np.zeros(x.shape[:-1] + (4, 4))
    a_qq[..., 0, 2] = a_qq[..., 2, 0] = 2.0 * pa[..., 0]
    a_qq[..., 1, 3] = a_qq[..., 3, 1] = 2.0 * pa[..., 0]
    a_qq[..., 0, 1] = a_qq[..., 1, 0] = -2.0 * pa[..., 1]
    a_qq[..., 2, 3] = a_qq[..., 3, 2] = 2.0 * pa[..., 1]
    a_qq[..., 1, 1] = -4.0 * pa[..., 2]
    a_qq[..., 2, 2] = -4.0 * pa[..., 2]
    t_total = np.sum(u, axis=-1, keepdims=True)
    hess[..., 3:7, 3:7] += (t_total / mass)[..., None] * a_qq
    daxis = _thrust_axis_jacobian(x[..., 3:7])
    v_qu = np.einsum("...ij,...i->...j", daxis, pa) / mass
    hess[..., 3:7, 13:17] += v_qu[..., :, None]
    hess[..., 13:17, 3:7] += v_qu[..., None, :]

    # gyroscopic coupling: quadratic in omega
    g_yz = -p[..., 10] * (jz - jy) / jx
    g_zx = -p[..., 11] * (jx - jz) / jy
    g_xy = -p[..., 12] * (jy - jx) / jz
    hess[..., 11, 12] += g_yz
    hess[..., 12, 11] += g_yz
    hess[..., 12, 10] += g_zx
    hess[..., 10, 12] += g_zx
    hess[..., 10, 11] += g_xy
    hess[..., 11, 10] += g_xy
    return hess


def _quadrotor_project(x):
    out = np.array(x, dtype=float)
    q = out[..., 3:7]
    out[..., 3:7] = q / np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    return out


def _quadrotor_project_jacobian(x):
    x = np.asarray(x, dtype=float)
    q = x[..., 3:7]
    nsq = np.sum(q * q, axis=-1, keepdims=True)
    jac = np.zeros(x.shape[:-1] + (13, 13))
    jac[..., :, :] = np.eye(13)
    outer = q[..., :, None] * q[..., None, :]
    jac[..., 3:7, 3:7] = (np.eye(4) - outer / nsq[..., None]) \
        / np.sqrt(nsq)[..., None]
    return jac


def _quadrotor_project_hessian_vp(x, p):
    # second derivative of p . project(x); only the normalized block bends
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    z = x[..., 3:7]
    nsq = np.sum(z * z, axis=-1, keepdims=True)
    zh = z / np.sqrt(nsq)
    pq = p[..., 3:7]
    block = -(pq[..., :, None] * zh[..., None, :]
              + zh[..., :, None] * pq[..., None, :])
    dot = np.sum(pq * zh, axis=-1, keepdims=True)
    block -= dot[..., None] * (np.eye(4) - 3.0 * zh[..., :, None] * zh[..., None, :])
    hess = np.zeros(x.shape[:-1] + (13, 13))
    hess[..., 3:7, 3:7] = block / nsq[..., None]
    return hess


# Nominal physical constants for a ~1 kg research quadrotor.  The mass is the
# quantity the adaptation experiments perturb; the geometry and inertia values
# are representative desk numbers, not measurements of a specific airframe.
_QUAD_THETA_NOM = np.array([1.0, 0.12, 0.12, 0.016, 0.010, 0.010, 0.017])
_QUAD_T_MAX = 6.0


def quadrotor(dt: float = 0.02) -> ContinuousModel:
    """Four-rotor vehicle with quaternion attitude.

    theta = (mass, d_x, d_y, c_tau, Jx, Jy, Jz): mass in kg, rotor moment
    arms about the body x/y axes in m, drag-moment constant in m, and the
    diagonal inertia in kg m^2.  Thrusts are bounded to [0, 6] N per rotor.
    """
    return ContinuousModel(
        name="quadrotor",
        n_x=13,
        n_u=4,
        n_theta=7,
        position_dim=3,
        rhs=_quadrotor_rhs,
        jacobians=_quadrotor_jacobians,
        theta_nominal=_QUAD_THETA_NOM.copy(),
        input_lower=np.zeros(4),
        input_upper=np.full(4, _QUAD_T_MAX),
        dt_default=dt,
        project=_quadrotor_project,
        project_jacobian=_quadrotor_project_jacobian,
        rhs_hessian_vp=_quadrotor_hessian_vp,
        project_hessian_vp=_quadrotor_project_hessian_vp,
    )


def hover_input(theta: np.ndarray) -> np.ndarray:
    """Per-rotor thrust that balances gravity for the quadrotor."""
    return np.full(4, theta[0] * GRAVITY / 4.0)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def rk4_step(model: ContinuousModel, x: np.ndarray, u: np.ndarray,
             dt: Optional[float] = None, theta: Optional[np.ndarray] = None) -> np.ndarray:
    """One classical RK4 step with the input held constant.

    The model's projection (if any) is applied to the result, so quadrotor
    quaternions come back with unit norm.  Batched states and inputs with
    matching leading dimensions step side by side.
    """
    h = model.dt_default if dt is None else dt
    th = model.theta_nominal if theta is None else theta
    f = model.rhs
    k1 = f(x, u, th)
    k2 = f(x + 0.5 * h * k1, u, th)
    k3 = f(x + 0.5 * h * k2, u, th)
    k4 = f(x + h * k3, u, th)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if model.project is not None:
        x_next = model.project(x_next)
    return x_next


def rk4_step_jacobians(model: ContinuousModel, x: np.ndarray, u: np.ndarray,
                       dt: Optional[float] = None, theta: Optional[np.ndarray] = None):
    """RK4 step together with its derivatives.

    Returns (x_next, d x_next/dx, d x_next/du, d x_next/dtheta).  The chain
    rule is propagated through all four stages and through the projection, so
    the result is the exact Jacobian of :func:`rk4_step`.  Leading batch
    dimensions on (x, u) produce stacked Jacobians.
    """
    h = model.dt_default if dt is None else dt
    th = model.theta_nominal if theta is None else theta
    f, jac = model.rhs, model.jacobians
    n_x, n_u, n_t = model.n_x, model.n_u, model.n_theta
    eye = np.eye(n_x)

    k1 = f(x, u, th)
    a1, b1, t1 = jac(x, u, th)

    x2 = x + 0.5 * h * k1
    k2 = f(x2, u, th)
    a2, b2, t2 = jac(x2, u, th)
    k2x = a2 @ (eye + 0.5 * h * a1)
    k2u = b2 + 0.5 * h * (a2 @ b1)
    k2t = t2 + 0.5 * h * (a2 @ t1)

    x3 = x + 0.5 * h * k2
    k3 = f(x3, u, th)
    a3, b3, t3 = jac(x3, u, th)
    k3x = a3 @ (eye + 0.5 * h * k2x)
    k3u = b3 + 0.5 * h * (a3 @ k2u)
    k3t = t3 + 0.5 * h * (a3 @ k2t)

    x4 = x + h * k3
    k4 = f(x4, u, th)
    a4, b4, t4 = jac(x4, u, th)
    k4x = a4 @ (eye + h * k3x)
    k4u = b4 + h * (a4 @ k3u)
    k4t = t4 + h * (a4 @ k3t)

    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    jx = eye + (h / 6.0) * (a1 + 2.0 * k2x + 2.0 * k3x + k4x)
    ju = (h / 6.0) * (b1 + 2.0 * k2u + 2.0 * k3u + k4u)
    jt = (h / 6.0) * (t1 + 2.0 * k2t + 2.0 * k3t + k4t)

    if model.project is not None:
        pj = model.project_jacobian(x_next)
        x_next = model.project(x_next)
        jx = pj @ jx
        ju = pj @ ju
        jt = pj @ jt
    return x_next, jx, ju, jt


def rk4_step_hessian_vp(model: ContinuousModel, x: np.ndarray, u: np.ndarray,
                        p: np.ndarray, dt: Optional[float] = None,
                        theta: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact second derivative of p . rk4_step(x, u) w.r.t. stacked (x, u).

    The integrator's computation graph is linear except at the four stage
    evaluations of the model right-hand side (and the optional projection),
    so the Hessian is a sum of pulled-back stage Hessians

        H = sum_i J_i' d2(adj_i . f)(y_i) J_i  [+ projection term]

    where J_i maps (x, u) to the stage argument and adj_i is the adjoint of
    the contracted output w.r.t. stage slope k_i.  With batched (x, u, p)
    a stack of such Hessians comes back, one per row.
    """
    if model.rhs_hessian_vp is None:
        raise ValueError(f"model '{model.name}' provides no rhs_hessian_vp")
    if model.project is not None and model.project_hessian_vp is None:
        raise ValueError(
            f"model '{model.name}' projects states but provides no "
            "project_hessian_vp")
    h = model.dt_default if dt is None else dt
    th = model.theta_nominal if theta is None else theta
    f, jac, hvp = model.rhs, model.jacobians, model.rhs_hessian_vp
    n_x, n_u = model.n_x, model.n_u
    eye = np.eye(n_x)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    batch = x.shape[:-1]

    k1 = f(x, u, th)
    a1, b1, _ = jac(x, u, th)
    x2 = x + 0.5 * h * k1
    k2 = f(x2, u, th)
    a2, b2, _ = jac(x2, u, th)
    k2x = a2 @ (eye + 0.5 * h * a1)
    k2u = b2 + 0.5 * h * (a2 @ b1)
    x3 = x + 0.5 * h * k2
    k3 = f(x3, u, th)
    a3, b3, _ = jac(x3, u, th)
    k3x = a3 @ (eye + 0.5 * h * k2x)
    k3u = b3 + 0.5 * h * (a3 @ k2u)
    x4 = x + h * k3
    a4, b4, _ = jac(x4, u, th)

    p_eff = p
    if model.project is not None:
        k4 = f(x4, u, th)
        x_raw = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        pj = model.project_jacobian(x_raw)
        p_eff = np.einsum("...ji,...j->...i", pj, p)

    # adjoints of p_eff . (weighted stage sum) w.r.t. each stage slope
    adj4 = (h / 6.0) * p_eff
    adj3 = (h / 3.0) * p_eff + h * np.einsum("...ji,...j->...i", a4, adj4)
    adj2 = (h / 3.0) * p_eff + 0.5 * h * np.einsum("...ji,...j->...i", a3, adj3)
    adj1 = (h / 6.0) * p_eff + 0.5 * h * np.einsum("...ji,...j->...i", a2, adj2)

    # stage-argument jacobians as maps (x, u) -> (x_stage, u)
    def arg_jac(x_part_x, x_part_u):
        j = np.zeros(batch + (n_x + n_u, n_x + n_u))
        j[..., :n_x, :n_x] = x_part_x
        j[..., :n_x, n_x:] = x_part_u
        j[..., n_x:, n_x:] = np.eye(n_u)
        return j

    def pullback(j, middle):
        return np.swapaxes(j, -1, -2) @ middle @ j

    j1 = arg_jac(eye, np.zeros((n_x, n_u)))
    j2 = arg_jac(eye + 0.5 * h * a1, 0.5 * h * b1)
    j3 = arg_jac(eye + 0.5 * h * k2x, 0.5 * h * k2u)
    j4 = arg_jac(eye + h * k3x, h * k3u)

    hess = pullback(j1, hvp(x, u, th, adj1))
    hess += pullback(j2, hvp(x2, u, th, adj2))
    hess += pullback(j3, hvp(x3, u, th, adj3))
    hess += pullback(j4, hvp(x4, u, th, adj4))

    if model.project is not None:
        k4x = a4 @ (eye + h * k3x)
        k4u = b4 + h * (a4 @ k3u)
        jx_raw = eye + (h / 6.0) * (a1 + 2.0 * k2x + 2.0 * k3x + k4x)
        ju_raw = (h / 6.0) * (b1 + 2.0 * k2u + 2.0 * k3u + k4u)
        j_raw = np.concatenate([jx_raw, ju_raw], axis=-1)
        hess += pullback(j_raw, model.project_hessian_vp(x_raw, p))
    return hess
