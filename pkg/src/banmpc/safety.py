"""Safety certificates built from distance functions.

Each obstacle induces a barrier value

    h(x, t) = || pos(x) - center(t) || - (radius + robot_radius + margin)

which is positive outside the inflated obstacle and negative inside.  A
scene with several obstacles is summarized by a smooth soft-minimum of the
individual values so that the controller only ever sees a single inequality
per prediction step.  Obstacles may translate over time, either with a
constant velocity or along a piecewise-linear waypoint path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Obstacle",
    "SafetySpec",
    "obstacle_h",
    "softmin_compose",
    "softmin_compose_weights",
    "composite_h",
    "composite_h_gradient",
    "composite_h_hessian",
    "cbf_residual",
]

DEFAULT_MARGIN = 0.03
DEFAULT_RHO = 20.0
DEFAULT_GAMMA = 0.3


@dataclass(frozen=True)
class Obstacle:
    """Circular (2-D) or spherical (3-D) region to keep away from.

    motion:
      None                          static obstacle
      ("velocity", v)               center(t) = center + v * t
      ("waypoints", times, points)  piecewise-linear interpolation, clamped
                                    at both ends
    """

    center: np.ndarray
    radius: float
    motion: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.center.ndim != 1 or self.center.size not in (2, 3):
            raise ValueError("obstacle center must be a 2- or 3-vector")
        if not self.radius > 0.0:
            raise ValueError("obstacle radius must be positive")
        if self.motion is not None:
            kind = self.motion[0]
            if kind == "velocity":
                vel = np.asarray(self.motion[1], dtype=float)
                if vel.shape != self.center.shape:
                    raise ValueError("velocity dimension mismatch")
                object.__setattr__(self, "motion", ("velocity", vel))
            elif kind == "waypoints":
                times = np.asarray(self.motion[1], dtype=float)
                points = np.asarray(self.motion[2], dtype=float)
                if times.ndim != 1 or points.shape != (times.size, self.center.size):
                    raise ValueError("waypoint arrays have inconsistent shapes")
                if times.size < 2 or np.any(np.diff(times) <= 0.0):
                    raise ValueError("waypoint times must be strictly increasing")
                object.__setattr__(self, "motion", ("waypoints", times, points))
            else:
                raise ValueError(f"unknown motion kind {kind!r}")

    def center_at(self, t) -> np.ndarray:
        """Obstacle center at time t; t may carry leading batch dimensions."""
        if self.motion is None:
            return self.center
        if self.motion[0] == "velocity":
            t = np.asarray(t, dtype=float)
            return self.center + self.motion[1] * t[..., None]
        times, points = self.motion[1], self.motion[2]
        return np.stack([np.interp(t, times, points[:, d])
                         for d in range(self.center.size)], axis=-1)


@dataclass(frozen=True)
class SafetySpec:
    """Everything the barrier computations need about a scene."""

    obstacles: Tuple[Obstacle, ...] = ()
    robot_radius: float = 0.0
    margin: float = DEFAULT_MARGIN
    rho: float = DEFAULT_RHO
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.robot_radius < 0.0 or self.margin < 0.0:
            raise ValueError("robot_radius and margin must be nonnegative")
        if not self.rho > 0.0:
            raise ValueError("softmin sharpness rho must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("barrier decrease rate gamma must lie in (0, 1]")


def obstacle_h(x: np.ndarray, obstacle: Obstacle, robot_radius: float = 0.0,
               margin: float = DEFAULT_MARGIN, t=0.0):
    """Signed clearance between the robot and one inflated obstacle.

    Broadcasts over leading batch dimensions of x, with t either a scalar
    or an array matching those dimensions.
    """
    d = obstacle.center.size
    pos = np.asarray(x, dtype=float)[..., :d]
    dist = np.linalg.norm(pos - obstacle.center_at(t), axis=-1)
    return dist - (obstacle.radius + robot_radius + margin)


def softmin_compose(values: Sequence[float], rho: float = DEFAULT_RHO):
    """Smooth underestimate of min(values) along the last axis.

    Computes -(1/rho) log sum exp(-rho * v) with the usual max-shift so that
    large rho or deeply negative values cannot overflow.  The result is
    sandwiched between min(values) - log(m)/rho and min(values), m being the
    number of values combined.
    """
    vals = np.atleast_1d(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise ValueError("softmin of an empty collection is undefined")
    if not rho > 0.0:
        raise ValueError("rho must be positive")
    m = vals.min(axis=-1, keepdims=True)
    return m[..., 0] - np.log(np.sum(np.exp(-rho * (vals - m)), axis=-1)) / rho


def softmin_compose_weights(values: Sequence[float], rho: float = DEFAULT_RHO) -> np.ndarray:
    """Gradient weights of softmin_compose w.r.t. each input value."""
    vals = np.atleast_1d(np.asarray(values, dtype=float))
    m = vals.min(axis=-1, keepdims=True)
    e = np.exp(-rho * (vals - m))
    return e / e.sum(axis=-1, keepdims=True)


def composite_h(x: np.ndarray, spec: SafetySpec, t=0.0):
    """Soft-minimum barrier over all obstacles in the scene.

    x may carry leading batch dimensions (with t broadcast against them),
    in which case one barrier value per row comes back.
    """
    if not spec.obstacles:
        raise ValueError("composite barrier requires at least one obstacle")
    vals = [obstacle_h(x, ob, spec.robot_radius, spec.margin, t) for ob in spec.obstacles]
    if len(vals) == 1:
        return vals[0]
    return softmin_compose(np.stack(vals, axis=-1), spec.rho)


def composite_h_gradient(x: np.ndarray, spec: SafetySpec, t=0.0):
    """Composite barrier value and its gradient w.r.t. the full state.

    Only the leading position block of the state carries a nonzero gradient.
    At an obstacle center the distance is not differentiable; a zero
    direction is substituted there, which is safe because such states are
    already deep inside the infeasible set.  Batched states return stacked
    (values, gradients).
    """
    if not spec.obstacles:
        raise ValueError("composite barrier requires at least one obstacle")
    x = np.asarray(x, dtype=float)
    d = spec.obstacles[0].center.size
    pos = x[..., :d]

    m = len(spec.obstacles)
    vals = np.empty(pos.shape[:-1] + (m,))
    dirs = np.zeros(pos.shape[:-1] + (m, d))
    for i, ob in enumerate(spec.obstacles):
        delta = pos - ob.center_at(t)
        dist = np.asarray(np.linalg.norm(delta, axis=-1))
        vals[..., i] = dist - (ob.radius + spec.robot_radius + spec.margin)
        inv = np.zeros_like(dist)
        np.divide(1.0, dist, out=inv, where=dist > 0.0)
        dirs[..., i, :] = delta * inv[..., None]

    grad = np.zeros_like(x)
    if m == 1:
        grad[..., :d] = dirs[..., 0, :]
        return vals[..., 0], grad
    h = softmin_compose(vals, spec.rho)
    weights = softmin_compose_weights(vals, spec.rho)
    grad[..., :d] = np.einsum("...i,...ij->...j", weights, dirs)
    return h, grad


def composite_h_hessian(x: np.ndarray, spec: SafetySpec, t=0.0) -> np.ndarray:
    """Second derivative of the composite barrier w.r.t. the full state.

    Only the leading position block is nonzero.  Each distance term
    contributes (I - n n') / dist and the soft-minimum adds the weighted
    covariance of the individual gradients:

        d2h = sum_i w_i d2h_i - rho * (sum_i w_i n_i n_i' - grad grad')

    The result is indefinite in general; callers that need a convex model
    must project it themselves.  Batched states return stacked Hessians.
    """
    if not spec.obstacles:
        raise ValueError("composite barrier requires at least one obstacle")
    x = np.asarray(x, dtype=float)
    d = spec.obstacles[0].center.size

    pos = x[..., :d]
    m = len(spec.obstacles)
    batch = pos.shape[:-1]
    vals = np.empty(batch + (m,))
    dirs = np.zeros(batch + (m, d))
    curvs = np.zeros(batch + (m, d, d))
    eye_d = np.eye(d)
    for i, ob in enumerate(spec.obstacles):
        delta = pos - ob.center_at(t)
        dist = np.asarray(np.linalg.norm(delta, axis=-1))
        vals[..., i] = dist - (ob.radius + spec.robot_radius + spec.margin)
        inv = np.zeros_like(dist)
        np.divide(1.0, dist, out=inv, where=dist > 0.0)
        n_i = delta * inv[..., None]
        dirs[..., i, :] = n_i
        curvs[..., i, :, :] = (eye_d - n_i[..., :, None] * n_i[..., None, :]) \
            * inv[..., None, None]

    hess = np.zeros(x.shape + (x.shape[-1],))
    if m == 1:
        hess[..., :d, :d] = curvs[..., 0, :, :]
        return hess
    weights = softmin_compose_weights(vals, spec.rho)
    grad = np.einsum("...i,...ij->...j", weights, dirs)
    block = np.einsum("...i,...ijk->...jk", weights, curvs)
    block -= spec.rho * (np.einsum("...i,...ij,...ik->...jk", weights, dirs, dirs)
                         - grad[..., :, None] * grad[..., None, :])
    hess[..., :d, :d] = block
    return hess


def cbf_residual(h_now: float, h_next: float, gamma: float = DEFAULT_GAMMA) -> float:
    """Slack of the discrete barrier decrease condition.

    residual = h_next - h_now + gamma * h_now.  Nonnegative residuals mean
    the one-step decrease stayed within the allowed fraction; if the residual
    is nonnegative at every step and the run starts with h >= 0, the whole
    trajectory satisfies h >= 0.
    """
    return h_next - h_now + gamma * h_now
