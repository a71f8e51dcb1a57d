import numpy as np
import pytest

from banmpc.safety import (
    Obstacle,
    SafetySpec,
    cbf_residual,
    composite_h,
    composite_h_gradient,
    composite_h_hessian,
    obstacle_h,
    softmin_compose,
)


class TestObstacleH:
    def test_hand_value(self):
        # ||(1,2)-(4,6)|| = 5, inflation 4 + 0.1 + 0.03 -> clearance 0.87
        ob = Obstacle(center=[4.0, 6.0], radius=4.0)
        h = obstacle_h(np.array([1.0, 2.0, 0.5]), ob, robot_radius=0.1, margin=0.03)
        assert h == pytest.approx(0.87, abs=1e-12)

    def test_sign_convention(self):
        ob = Obstacle(center=[0.0, 0.0], radius=1.0)
        assert obstacle_h(np.array([3.0, 0.0]), ob) > 0.0
        assert obstacle_h(np.array([0.5, 0.0]), ob) < 0.0
        on_boundary = obstacle_h(np.array([1.03, 0.0]), ob, margin=0.03)
        assert on_boundary == pytest.approx(0.0, abs=1e-12)

    def test_moving_obstacle_velocity(self):
        ob = Obstacle(center=[0.0, 0.0], radius=0.5, motion=("velocity", [1.0, 0.0]))
        h0 = obstacle_h(np.array([2.0, 0.0]), ob, t=0.0)
        h1 = obstacle_h(np.array([2.0, 0.0]), ob, t=1.0)
        assert h0 == pytest.approx(2.0 - 0.53)
        assert h1 == pytest.approx(1.0 - 0.53)

    def test_waypoint_motion_interpolates_and_clamps(self):
        ob = Obstacle(
            center=[0.0, 0.0],
            radius=0.5,
            motion=("waypoints", [0.0, 2.0], [[0.0, 0.0], [2.0, 0.0]]),
        )
        np.testing.assert_allclose(ob.center_at(1.0), [1.0, 0.0])
        np.testing.assert_allclose(ob.center_at(5.0), [2.0, 0.0])
        np.testing.assert_allclose(ob.center_at(-1.0), [0.0, 0.0])

    def test_invalid_obstacles_rejected(self):
        with pytest.raises(ValueError):
            Obstacle(center=[0.0, 0.0], radius=-1.0)
        with pytest.raises(ValueError):
            Obstacle(center=[0.0], radius=1.0)
        with pytest.raises(ValueError):
            Obstacle(center=[0.0, 0.0], radius=1.0, motion=("spin", 1.0))
        with pytest.raises(ValueError):
            Obstacle(center=[0.0, 0.0], radius=1.0,
                     motion=("waypoints", [0.0, 0.0], [[0.0, 0.0], [1.0, 1.0]]))


class TestSoftmin:
    def test_two_equal_values(self):
        # equal entries: softmin = v - log(2)/rho
        assert softmin_compose([1.0, 1.0], rho=10.0) == pytest.approx(
            1.0 - np.log(2.0) / 10.0, abs=1e-12
        )

    def test_hand_value_unequal(self):
        expected = 1.0 - np.log(1.0 + np.exp(-3.0)) / 10.0
        assert softmin_compose([1.0, 1.3], rho=10.0) == pytest.approx(expected, abs=1e-12)

    def test_single_value_is_exact(self):
        assert softmin_compose([0.42], rho=20.0) == 0.42

    def test_sandwich_bounds(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.integers(1, 8)
            vals = rng.normal(scale=3.0, size=n)
            rho = rng.uniform(0.5, 50.0)
            sm = softmin_compose(vals, rho)
            assert sm <= vals.min() + 1e-12
            assert sm >= vals.min() - np.log(n) / rho - 1e-12

    def test_no_overflow_for_large_rho_and_deep_negatives(self):
        val = softmin_compose([-300.0, -100.0, 5.0], rho=50.0)
        assert np.isfinite(val)
        assert val == pytest.approx(-300.0, abs=1e-6)

    def test_empty_and_bad_rho_rejected(self):
        with pytest.raises(ValueError):
            softmin_compose([], rho=10.0)
        with pytest.raises(ValueError):
            softmin_compose([1.0], rho=0.0)


class TestCompositeH:
    def two_obstacle_spec(self):
        return SafetySpec(
            obstacles=(
                Obstacle(center=[1.0, 0.0], radius=0.3),
                Obstacle(center=[-1.0, 0.5], radius=0.4),
            ),
            robot_radius=0.1,
            rho=20.0,
        )

    def test_matches_softmin_of_members(self):
        spec = self.two_obstacle_spec()
        x = np.array([0.2, -0.3, 1.0])
        members = [obstacle_h(x, ob, spec.robot_radius, spec.margin) for ob in spec.obstacles]
        assert composite_h(x, spec) == pytest.approx(softmin_compose(members, spec.rho))

    def test_empty_scene_rejected(self):
        with pytest.raises(ValueError):
            composite_h(np.zeros(3), SafetySpec())

    def test_gradient_matches_central_differences(self):
        spec = self.two_obstacle_spec()
        rng = np.random.default_rng(5)
        eps = 1e-6
        for _ in range(50):
            x = rng.uniform(-2.0, 2.0, size=3)
            h, grad = composite_h_gradient(x, spec)
            assert h == pytest.approx(composite_h(x, spec), abs=1e-14)
            for j in range(3):
                dx = np.zeros(3)
                dx[j] = eps
                fd = (composite_h(x + dx, spec) - composite_h(x - dx, spec)) / (2 * eps)
                assert grad[j] == pytest.approx(fd, abs=1e-8)

    def test_gradient_fd_converges_second_order(self):
        # central differences of the composite barrier should approach the
        # analytic gradient at rate h^2
        spec = self.two_obstacle_spec()
        x = np.array([0.4, 0.9, 0.0])
        _, grad = composite_h_gradient(x, spec)
        errs = []
        for eps in (1e-3, 5e-4):
            fd = np.zeros(3)
            for j in range(3):
                dx = np.zeros(3)
                dx[j] = eps
                fd[j] = (composite_h(x + dx, spec) - composite_h(x - dx, spec)) / (2 * eps)
            errs.append(np.linalg.norm(fd - grad))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.25)

    def test_time_argument_moves_the_scene(self):
        spec = SafetySpec(
            obstacles=(Obstacle(center=[0.0, 0.0], radius=0.5,
                                motion=("velocity", [-1.0, 0.0])),),
        )
        x = np.array([1.0, 0.0, 0.0])
        assert composite_h(x, spec, t=1.0) > composite_h(x, spec, t=0.0)


class TestCbfResidual:
    def test_hand_value(self):
        # h 0.5 -> 0.45 with gamma 0.3: residual = -0.05 + 0.15 = 0.10
        assert cbf_residual(0.5, 0.45, gamma=0.3) == pytest.approx(0.10, abs=1e-12)

    def test_zero_at_exact_decrease_rate(self):
        h = 0.8
        gamma = 0.3
        assert cbf_residual(h, (1.0 - gamma) * h, gamma) == pytest.approx(0.0, abs=1e-12)

    def test_decrease_chain_keeps_barrier_nonnegative(self):
        # if every residual >= 0 and h0 >= 0, then h_k >= (1-gamma)^k h_0 >= 0
        rng = np.random.default_rng(2)
        gamma = 0.3
        h = 1.0
        for _ in range(100):
            h_next = (1.0 - gamma) * h + rng.uniform(0.0, 0.1)
            assert cbf_residual(h, h_next, gamma) >= 0.0
            h = h_next
            assert h >= 0.0

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SafetySpec(gamma=0.0)
        with pytest.raises(ValueError):
            SafetySpec(gamma=1.5)
        with pytest.raises(ValueError):
            SafetySpec(rho=-1.0)
        with pytest.raises(ValueError):
            SafetySpec(robot_radius=-0.1)


class TestBatchedBarriers:
    def _scene(self):
        return SafetySpec(
            obstacles=(
                Obstacle(np.array([1.0, 1.1]), 0.25),
                Obstacle(np.array([0.4, 0.1]), 0.2,
                         motion=("velocity", np.array([0.05, -0.02]))),
                Obstacle(np.array([1.6, 0.4]), 0.3,
                         motion=("waypoints", np.array([0.0, 1.0, 2.5]),
                                 np.array([[1.6, 0.4], [1.3, 0.7], [1.1, 0.2]]))),
            ),
            robot_radius=0.1,
        )

    def test_batched_rows_match_scalar_calls(self):
        spec = self._scene()
        rng = np.random.default_rng(5)
        xs = rng.uniform(-0.5, 2.0, size=(12, 3))
        ts = rng.uniform(0.0, 3.0, size=12)

        h_b = composite_h(xs, spec, t=ts)
        v_b, g_b = composite_h_gradient(xs, spec, t=ts)
        hess_b = composite_h_hessian(xs, spec, t=ts)
        for i in range(12):
            assert h_b[i] == pytest.approx(composite_h(xs[i], spec, t=ts[i]), abs=1e-14)
            v_i, g_i = composite_h_gradient(xs[i], spec, t=ts[i])
            assert v_b[i] == pytest.approx(v_i, abs=1e-14)
            np.testing.assert_allclose(g_b[i], g_i, atol=1e-14)
            np.testing.assert_allclose(
                hess_b[i], composite_h_hessian(xs[i], spec, t=ts[i]), atol=1e-13)

    def test_single_obstacle_batch_shapes(self):
        spec = SafetySpec(obstacles=(Obstacle(np.array([0.0, 0.0]), 0.5),))
        xs = np.array([[2.0, 0.0, 0.3], [0.0, 1.5, -0.2]])
        vals = composite_h(xs, spec)
        assert vals.shape == (2,)
        assert vals[0] == pytest.approx(2.0 - 0.53)
        v, g = composite_h_gradient(xs, spec)
        assert g.shape == (2, 3)
        np.testing.assert_allclose(g[0], [1.0, 0.0, 0.0], atol=1e-14)
        assert composite_h_hessian(xs, spec).shape == (2, 3, 3)
