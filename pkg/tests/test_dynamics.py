import numpy as np
import pytest

from banmpc.dynamics import (
    ContinuousModel,
    angle_wrap,
    hover_input,
    quadrotor,
    rk4_step,
    rk4_step_hessian_vp,
    rk4_step_jacobians,
    unicycle,
)


def scalar_decay_model():
    # dx/dt = -x, the standard integration oracle with known solution e^{-t}
    return ContinuousModel(
        name="decay",
        n_x=1,
        n_u=1,
        n_theta=1,
        position_dim=1,
        rhs=lambda x, u, th: -x,
        jacobians=lambda x, u, th: (np.array([[-1.0]]), np.zeros((1, 1)), np.zeros((1, 1))),
        theta_nominal=np.array([1.0]),
        input_lower=np.array([-1.0]),
        input_upper=np.array([1.0]),
        dt_default=0.1,
    )


class TestRk4:
    def test_one_step_matches_rk4_polynomial(self):
        # For dx/dt = -x the RK4 map is x * (1 - h + h^2/2 - h^3/6 + h^4/24).
        # At h = 0.1 that polynomial evaluates to 0.90483750, frozen here.
        model = scalar_decay_model()
        x1 = rk4_step(model, np.array([1.0]), np.array([0.0]), dt=0.1)
        assert x1[0] == pytest.approx(0.9048375, abs=1e-12)
        assert x1[0] == pytest.approx(np.exp(-0.1), abs=1e-6)

    def test_local_error_is_fifth_order(self):
        model = scalar_decay_model()
        errs = []
        for h in (0.2, 0.1):
            x1 = rk4_step(model, np.array([1.0]), np.array([0.0]), dt=h)
            errs.append(abs(x1[0] - np.exp(-h)))
        # halving the step should shrink the one-step error by about 2^5
        assert errs[0] / errs[1] == pytest.approx(32.0, rel=0.15)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(7)
        for model in (unicycle(), quadrotor()):
            x = rng.normal(size=model.n_x)
            if model.name == "quadrotor":
                x[3:7] /= np.linalg.norm(x[3:7])
                u = hover_input(model.theta_nominal) + 0.3 * rng.normal(size=4)
            else:
                u = rng.uniform(model.input_lower, model.input_upper)
            th = model.theta_nominal * (1.0 + 0.05 * rng.normal(size=model.n_theta))
            _, jx, ju, jt = rk4_step_jacobians(model, x, u, theta=th)

            eps = 1e-6
            for j in range(model.n_x):
                dx = np.zeros(model.n_x)
                dx[j] = eps
                fd = (rk4_step(model, x + dx, u, theta=th)
                      - rk4_step(model, x - dx, u, theta=th)) / (2 * eps)
                np.testing.assert_allclose(jx[:, j], fd, atol=5e-7)
            for j in range(model.n_u):
                du = np.zeros(model.n_u)
                du[j] = eps
                fd = (rk4_step(model, x, u + du, theta=th)
                      - rk4_step(model, x, u - du, theta=th)) / (2 * eps)
                np.testing.assert_allclose(ju[:, j], fd, atol=5e-7)
            for j in range(model.n_theta):
                dth = np.zeros(model.n_theta)
                dth[j] = eps * max(1.0, abs(th[j]))
                fd = (rk4_step(model, x, u, theta=th + dth)
                      - rk4_step(model, x, u, theta=th - dth)) / (2 * dth[j])
                np.testing.assert_allclose(jt[:, j], fd, atol=5e-6)


class TestUnicycle:
    def test_rhs_scales_inputs_by_gains(self):
        model = unicycle()
        x = np.array([0.0, 0.0, 0.0])
        u = np.array([0.2, 0.5])
        theta = np.array([1.1, 0.9])
        xdot = model.rhs(x, u, theta)
        np.testing.assert_allclose(xdot, [0.22, 0.0, 0.45])

    def test_rhs_direction_follows_heading(self):
        model = unicycle()
        x = np.array([1.0, -2.0, np.pi / 3.0])
        u = np.array([0.26, 0.0])
        xdot = model.rhs(x, u, model.theta_nominal)
        np.testing.assert_allclose(
            xdot, [0.26 * np.cos(np.pi / 3), 0.26 * np.sin(np.pi / 3), 0.0], atol=1e-15
        )

    def test_zero_input_is_equilibrium(self):
        model = unicycle()
        x = np.array([0.3, 0.7, 1.1])
        x1 = rk4_step(model, x, np.zeros(2))
        np.testing.assert_allclose(x1, x, atol=1e-15)

    def test_canonicalize_wraps_heading(self):
        model = unicycle()
        wrapped = model.canonicalize(np.array([0.0, 0.0, 3.0 * np.pi / 2.0]))
        assert wrapped[2] == pytest.approx(-np.pi / 2.0)

    def test_angle_wrap_interval(self):
        assert angle_wrap(np.pi) == pytest.approx(np.pi)
        assert angle_wrap(-np.pi) == pytest.approx(np.pi)
        assert angle_wrap(0.0) == 0.0
        assert angle_wrap(2.5 * np.pi) == pytest.approx(0.5 * np.pi)
        for psi in np.linspace(-20.0, 20.0, 101):
            w = angle_wrap(psi)
            assert -np.pi < w <= np.pi
            # wrapping must not change the angle modulo 2 pi
            assert abs((psi - w) % (2 * np.pi)) < 1e-9 or \
                abs((psi - w) % (2 * np.pi) - 2 * np.pi) < 1e-9


class TestQuadrotor:
    def test_hover_is_equilibrium(self):
        model = quadrotor()
        x = np.zeros(13)
        x[3] = 1.0  # identity attitude
        u = hover_input(model.theta_nominal)
        xdot = model.rhs(x, u, model.theta_nominal)
        np.testing.assert_allclose(xdot, np.zeros(13), atol=1e-12)

    def test_free_fall_acceleration(self):
        model = quadrotor()
        x = np.zeros(13)
        x[3] = 1.0
        xdot = model.rhs(x, np.zeros(4), model.theta_nominal)
        assert xdot[9] == pytest.approx(-9.81)

    def test_torque_sign_pattern(self):
        # single rotor burns: rotor 3 (+x arm, +y arm, ccw) must pitch and
        # roll positive and yaw negative given the sign matrix
        model = quadrotor()
        th = model.theta_nominal
        x = np.zeros(13)
        x[3] = 1.0
        u = np.array([0.0, 0.0, 0.0, 1.0])
        xdot = model.rhs(x, u, th)
        assert xdot[10] == pytest.approx(th[2] * 1.0 / th[4])   # +dy/Jx
        assert xdot[11] == pytest.approx(th[1] * 1.0 / th[5])   # +dx/Jy
        assert xdot[12] == pytest.approx(-th[3] * 1.0 / th[6])  # -c_tau/Jz

    def test_quaternion_norm_preserved_by_step(self):
        model = quadrotor()
        rng = np.random.default_rng(3)
        x = rng.normal(size=13)
        x[3:7] /= np.linalg.norm(x[3:7])
        u = rng.uniform(0.0, 6.0, size=4)
        for _ in range(50):
            x = rk4_step(model, x, u)
            assert abs(np.linalg.norm(x[3:7]) - 1.0) <= 1e-9

    def test_mass_division_scales_acceleration(self):
        model = quadrotor()
        th_heavy = model.theta_nominal.copy()
        th_heavy[0] = 2.0
        x = np.zeros(13)
        x[3] = 1.0
        u = np.full(4, 3.0)
        a_nom = model.rhs(x, u, model.theta_nominal)[9] + 9.81
        a_heavy = model.rhs(x, u, th_heavy)[9] + 9.81
        assert a_nom == pytest.approx(2.0 * a_heavy)

    def test_tilted_thrust_direction(self):
        # 90 degree roll: body z maps to world -y
        model = quadrotor()
        x = np.zeros(13)
        q = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0])
        x[3:7] = q
        u = np.full(4, 9.81 / 4.0)
        xdot = model.rhs(x, u, model.theta_nominal)
        np.testing.assert_allclose(xdot[7:10], [0.0, -9.81, -9.81], atol=1e-12)


class TestBatchedEvaluation:
    """Stacked states/inputs must reproduce per-sample kernel outputs.

    The trajectory optimizer feeds whole horizons through these kernels in
    one call, so any drift between the batched and scalar paths would show
    up as a wrong Jacobian somewhere deep inside a solve.
    """

    def _samples(self, model, rng, count):
        xs = rng.normal(size=(count, model.n_x))
        if model.project is not None:
            xs = np.stack([model.project(x) for x in xs])
        lo = np.where(np.isfinite(model.input_lower), model.input_lower, -1.0)
        hi = np.where(np.isfinite(model.input_upper), model.input_upper, 1.0)
        us = rng.uniform(lo, hi, size=(count, model.n_u))
        ps = rng.normal(size=(count, model.n_x))
        return xs, us, ps

    @pytest.mark.parametrize("make_model", [unicycle, quadrotor])
    def test_rhs_and_jacobians_match_loop(self, make_model):
        model = make_model()
        rng = np.random.default_rng(17)
        xs, us, _ = self._samples(model, rng, 8)
        th = model.theta_nominal
        batched = model.rhs(xs, us, th)
        looped = np.stack([model.rhs(x, u, th) for x, u in zip(xs, us)])
        np.testing.assert_allclose(batched, looped, atol=1e-13)
        jb = model.jacobians(xs, us, th)
        for slot in range(3):
            looped = np.stack([model.jacobians(x, u, th)[slot]
                               for x, u in zip(xs, us)])
            np.testing.assert_allclose(jb[slot], looped, atol=1e-12)

    @pytest.mark.parametrize("make_model", [unicycle, quadrotor])
    def test_rk4_step_family_matches_loop(self, make_model):
        model = make_model()
        rng = np.random.default_rng(29)
        xs, us, ps = self._samples(model, rng, 6)
        th = 1.05 * model.theta_nominal
        step_b = rk4_step(model, xs, us, 0.04, th)
        step_l = np.stack([rk4_step(model, x, u, 0.04, th)
                           for x, u in zip(xs, us)])
        np.testing.assert_allclose(step_b, step_l, atol=1e-13)
        jac_b = rk4_step_jacobians(model, xs, us, 0.04, th)
        for slot in range(4):
            looped = np.stack([rk4_step_jacobians(model, x, u, 0.04, th)[slot]
                               for x, u in zip(xs, us)])
            np.testing.assert_allclose(jac_b[slot], looped, atol=1e-12)
        hv_b = rk4_step_hessian_vp(model, xs, us, ps, 0.04, th)
        hv_l = np.stack([rk4_step_hessian_vp(model, x, u, p, 0.04, th)
                         for x, u, p in zip(xs, us, ps)])
        np.testing.assert_allclose(hv_b, hv_l, atol=1e-12)

    def test_quadrotor_projection_family_matches_loop(self):
        model = quadrotor()
        rng = np.random.default_rng(41)
        xs = rng.normal(size=(5, 13))
        ps = rng.normal(size=(5, 13))
        np.testing.assert_allclose(
            model.project(xs),
            np.stack([model.project(x) for x in xs]), atol=1e-14)
        np.testing.assert_allclose(
            model.project_jacobian(xs),
            np.stack([model.project_jacobian(x) for x in xs]), atol=1e-14)
        np.testing.assert_allclose(
            model.project_hessian_vp(xs, ps),
            np.stack([model.project_hessian_vp(x, p) for x, p in zip(xs, ps)]),
            atol=1e-14)
