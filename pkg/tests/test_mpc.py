"""Planner: discretization, QP kernel, SQP behaviors, constraint handling.

The LQR check pins the attitude inputs so the reduced model collapses to
an exact discrete double integrator in (z, v_z); RK4 is then exact and
the planner must agree with a Riccati recursion to solver precision.
"""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from dampc.dynamics import VehicleParams, reduced_derivative
from dampc.errors import DomainError
from dampc.mpc import (
    BoxLimits,
    HalfSpaceObstacle,
    MpcConfig,
    Planner,
    SolverOptions,
    SphereObstacle,
    _extract_a_hat,
    _step_with_jacobians,
    discretize_augmented,
    hover_input,
    obstacle_from_dict,
    reference_tracker,
    solve_box_qp,
)


class ConstBasis:
    """In-model residual fixed at `col` m/s^2 regardless of state."""

    k = 1

    def __init__(self, accel):
        self.col = np.asarray(accel, dtype=float).reshape(3, 1)

    def phi(self, x, x_r):
        return self.col

    def value_and_state_jacobian(self, x, x_r):
        return self.col, np.zeros((3, 1, 9))


class CurvedBasis:
    """State-dependent stub with a hand-written exact Jacobian."""

    k = 2

    def phi(self, x, x_r):
        return np.array([
            [math.sin(x[2]), x[3]],
            [x[2] * x[3], math.cos(x[4])],
            [x[5], x[6] ** 2],
        ])

    def value_and_state_jacobian(self, x, x_r):
        J = np.zeros((3, 2, 9))
        J[0, 0, 2] = math.cos(x[2])
        J[0, 1, 3] = 1.0
        J[1, 0, 2] = x[3]
        J[1, 0, 3] = x[2]
        J[1, 1, 4] = -math.sin(x[4])
        J[2, 0, 5] = 1.0
        J[2, 1, 6] = 2.0 * x[6]
        return self.phi(x, x_r), J


class TestObstacles:
    def test_sphere_distance_and_gradient(self):
        obs = SphereObstacle([1.0, 0.0, 0.0], 0.5)
        assert obs.signed_distance(np.array([3.0, 0.0, 0.0])) == pytest.approx(1.5)
        assert obs.signed_distance(np.array([1.0, 0.2, 0.0])) == pytest.approx(-0.3)
        g = obs.distance_gradient(np.array([1.0, 0.0, 2.0]))
        assert np.allclose(g, [0.0, 0.0, 1.0])
        # Gradient at the center degenerates to a fixed up direction.
        assert np.allclose(obs.distance_gradient(np.array([1.0, 0.0, 0.0])),
                           [0.0, 0.0, 1.0])
        with pytest.raises(DomainError):
            SphereObstacle([0, 0, 0], 0.0)

    def test_half_space_normalized(self):
        # Ground at z <= 0 forbidden: normal -e_z scaled by 2 on input.
        obs = HalfSpaceObstacle([0.0, 0.0, -2.0], 0.0)
        assert np.allclose(obs.normal, [0.0, 0.0, -1.0])
        assert obs.signed_distance(np.array([5.0, -2.0, 0.8])) == pytest.approx(0.8)
        assert np.allclose(obs.distance_gradient(np.zeros(3)), [0.0, 0.0, 1.0])
        with pytest.raises(DomainError):
            HalfSpaceObstacle([0.0, 0.0, 0.0], 1.0)

    def test_dict_round_trip(self):
        for obs in (SphereObstacle([1, 2, 3], 0.7),
                    HalfSpaceObstacle([0, 1, 0], 2.0)):
            clone = obstacle_from_dict(obs.describe())
            p = np.array([0.3, -1.0, 2.2])
            assert clone.signed_distance(p) == pytest.approx(obs.signed_distance(p))
        with pytest.raises(DomainError):
            obstacle_from_dict({"kind": "torus"})


class TestConfigs:
    def test_box_validation(self):
        with pytest.raises(DomainError):
            BoxLimits(state_lb=np.zeros(8), state_ub=np.ones(8))
        with pytest.raises(DomainError):
            BoxLimits(input_lb=np.array([1.0, 0, 0, 0]),
                      input_ub=np.array([0.0, 1, 1, 1]))

    def test_mpc_config_validation(self):
        with pytest.raises(DomainError):
            MpcConfig(N=1)
        with pytest.raises(DomainError):
            MpcConfig(dt=0.0)
        with pytest.raises(DomainError):
            MpcConfig(eps_l=0.0)
        with pytest.raises(DomainError):
            MpcConfig(Q_m=np.zeros((9, 9)))
        bad = np.diag(np.ones(4))
        bad[0, 1] = 0.5
        with pytest.raises(DomainError):
            MpcConfig(R_m=bad)

    def test_describe_serializable(self):
        import json

        cfg = MpcConfig(obstacles=[SphereObstacle([0, 0, 1], 0.3)])
        json.dumps(cfg.describe())


class TestDiscretization:
    def test_matches_variable_step_integrator(self, params, rng):
        x = rng.normal(0, 0.3, 9)
        x[6:8] *= 0.5
        u = np.array([1.2 * params.hover_thrust, 0.3, -0.2, 0.1])
        got = discretize_augmented(x, u, x, None, None, 0.05, params)
        ref = solve_ivp(lambda t, s: reduced_derivative(s, u, params),
                        (0.0, 0.05), x, rtol=1e-12, atol=1e-12).y[:, -1]
        assert np.allclose(got, ref, atol=1e-9)

    def test_constant_residual_closed_form(self, params):
        # Constant acceleration makes the system linear, so RK4 is exact:
        # v gains c dt and p gains c dt^2 / 2 on top of the nominal step.
        c = np.array([0.6, 0.0, -0.4])
        x = np.zeros(9)
        u = hover_input(params)
        dt = 0.1
        out = discretize_augmented(x, u, x, ConstBasis(c), np.array([1.0]),
                                   dt, params)
        assert np.allclose(out[3:6], c * dt, atol=1e-14)
        assert np.allclose(out[:3], 0.5 * c * dt * dt, atol=1e-14)

    def test_step_halving_order(self, params):
        model = CurvedBasis()
        a_hat = np.array([0.4, -0.3])
        x = np.zeros(9)
        x[2:7] = [0.3, 0.5, -0.2, 0.1, 0.2]
        u = np.array([params.hover_thrust, 0.2, -0.1, 0.0])

        def err(dt):
            one = discretize_augmented(x, u, x, model, a_hat, dt, params)
            half = discretize_augmented(x, u, x, model, a_hat, dt / 2, params)
            two = discretize_augmented(half, u, x, model, a_hat, dt / 2, params)
            return np.linalg.norm(one - two)

        e1, e2 = err(0.1), err(0.05)
        order = math.log2(e1 / e2)
        assert order > 3.5

    def test_shape_rejection(self, params):
        with pytest.raises(DomainError):
            discretize_augmented(np.zeros(8), np.zeros(4), np.zeros(9),
                                 None, None, 0.1, params)
        with pytest.raises(DomainError):
            discretize_augmented(np.zeros(9), np.zeros(3), np.zeros(9),
                                 None, None, 0.1, params)

    def test_sensitivities_match_finite_differences(self, params):
        model = CurvedBasis()
        a_hat = np.array([0.4, -0.3])
        x = np.zeros(9)
        x[2:7] = [0.3, 0.5, -0.2, 0.1, 0.2]
        u = np.array([params.hover_thrust, 0.2, -0.1, 0.05])
        dt = 0.1
        _, A, B = _step_with_jacobians(x, u, x, model, a_hat, dt, params)

        def f(xx, uu):
            return discretize_augmented(xx, uu, x, model, a_hat, dt, params)

        h = 1e-6
        for i in range(9):
            d = np.zeros(9)
            d[i] = h
            col = (f(x + d, u) - f(x - d, u)) / (2 * h)
            assert np.allclose(A[:, i], col, atol=1e-6)
        for i in range(4):
            d = np.zeros(4)
            d[i] = h
            col = (f(x, u + d) - f(x, u - d)) / (2 * h)
            assert np.allclose(B[:, i], col, atol=1e-6)


class TestBoxQp:
    def _random_instance(self, rng, n):
        A = rng.normal(0, 1, (n, n))
        H = A.T @ A + 0.1 * np.eye(n)
        g = rng.normal(0, 2, n)
        lb = rng.uniform(-0.8, -0.1, n)
        ub = rng.uniform(0.1, 0.8, n)
        return H, g, lb, ub

    def test_matches_convex_solver(self, rng):
        import cvxpy as cp

        for _ in range(3):
            H, g, lb, ub = self._random_instance(rng, 8)
            d, _ = solve_box_qp(H, g, lb, ub)
            v = cp.Variable(8)
            prob = cp.Problem(
                cp.Minimize(0.5 * cp.quad_form(v, H) + g @ v),
                [v >= lb, v <= ub])
            prob.solve(solver="CLARABEL")
            assert np.allclose(d, v.value, atol=1e-6)

    def test_kkt_signs(self, rng):
        H, g, lb, ub = self._random_instance(rng, 12)
        d, grad = solve_box_qp(H, g, lb, ub)
        tol = 1e-7 * (1.0 + np.abs(grad).max())
        for i in range(12):
            if abs(d[i] - lb[i]) < 1e-12:
                assert grad[i] >= -tol
            elif abs(d[i] - ub[i]) < 1e-12:
                assert grad[i] <= tol
            else:
                assert abs(grad[i]) <= tol

    def test_unconstrained_is_newton_step(self, rng):
        H, g, _, _ = self._random_instance(rng, 6)
        big = 1e6 * np.ones(6)
        d, _ = solve_box_qp(H, g, -big, big)
        assert np.allclose(d, -np.linalg.solve(H, g), atol=1e-8)

    def test_pinned_coordinates_stay_pinned(self, rng):
        H, g, lb, ub = self._random_instance(rng, 6)
        lb[2] = ub[2] = 0.3
        lb[5] = ub[5] = 0.0
        d, _ = solve_box_qp(H, g, lb, ub)
        assert d[2] == 0.3 and d[5] == 0.0


def plan_defects(plan, planner, x_r, a_hat=None):
    worst = 0.0
    for k in range(planner.cfg.N):
        pred = discretize_augmented(
            plan.x_d_traj[k], plan.u_d_traj[k], x_r[k], planner.model,
            a_hat, planner.cfg.dt, planner.params)
        worst = max(worst, np.abs(plan.x_d_traj[k + 1] - pred).max())
    return worst


class TestHoverEquilibrium:
    def test_hover_plan_is_trivial_optimum(self, params):
        cfg = MpcConfig()
        planner = Planner(cfg, params)
        x_r = np.zeros((cfg.N + 1, 9))
        plan = planner.solve(np.zeros(9), x_r)
        assert plan.status == "solved"
        assert np.allclose(plan.u_d_traj, hover_input(params), atol=1e-7)
        assert plan.cost <= 1e-10
        assert np.abs(plan.x_d_traj).max() <= 1e-8
        assert plan_defects(plan, planner, x_r) <= 1e-6


class TestLqrOracle:
    def test_double_integrator_matches_riccati(self, params):
        # Attitude rates pinned at zero freeze eta, so thrust drives an
        # exact discrete double integrator in (z, v_z) and the SQP must
        # land on the finite-horizon LQR solution.
        N, dt, m = 20, 0.1, params.mass
        lim = BoxLimits(input_lb=np.array([0.0, 0.0, 0.0, 0.0]),
                        input_ub=np.array([40.0, 0.0, 0.0, 0.0]))
        cfg = MpcConfig(N=N, dt=dt, limits=lim,
                        solver=SolverOptions(tol_kkt=1e-9, max_iter=60))
        planner = Planner(cfg, params)
        x0 = np.zeros(9)
        x0[2] = 0.3
        x_r = np.zeros((N + 1, 9))
        plan = planner.solve(x0, x_r)
        assert plan.status == "solved"

        A2 = np.array([[1.0, dt], [0.0, 1.0]])
        B2 = np.array([[dt * dt / (2 * m)], [dt / m]])
        Q2 = np.diag([cfg.Q_m[2, 2], cfg.Q_m[5, 5]])
        R2 = np.array([[cfg.R_m[0, 0]]])
        P = Q2.copy()
        gains = []
        for _ in range(N):
            K = np.linalg.solve(R2 + B2.T @ P @ B2, B2.T @ P @ A2)
            P = Q2 + A2.T @ P @ A2 - A2.T @ P @ B2 @ K
            gains.append(K)
        gains.reverse()
        z = np.array([0.3, 0.0])
        u_oracle = np.empty(N)
        for k in range(N):
            du = -(gains[k] @ z)[0]
            u_oracle[k] = du + m * params.gravity
            z = A2 @ z + B2[:, 0] * du
        assert np.abs(plan.u_d_traj[:, 0] - u_oracle).max() <= 1e-6
        assert np.abs(plan.u_d_traj[:, 1:]).max() == 0.0
        # The optimum ends well inside the goal ball, so the terminal
        # hinge stayed out of the comparison.
        assert np.linalg.norm(plan.x_d_traj[-1] - x_r[-1]) < cfg.eps_l - 1e-3
        assert plan_defects(plan, planner, x_r) <= 1e-6


class TestCrosswindTrim:
    def test_settled_plan_tilts_into_wind(self, params):
        # Constant +x disturbance of w m/s^2 in-model: static force
        # balance gives pitch -arctan(w / g), thrust m sqrt(w^2 + g^2).
        w, g = 2.0, params.gravity
        cfg = MpcConfig(N=30, dt=0.2)
        planner = Planner(cfg, params, ConstBasis([w, 0.0, 0.0]))
        a_hat = np.array([1.0])
        x_r = np.zeros((31, 9))
        plan = planner.solve(np.zeros(9), x_r, a_snapshot=(a_hat, None))
        assert plan.status == "solved"
        trim = -math.atan2(w, g)
        settled = plan.x_d_traj[15:28]
        pitch = settled[:, 7]
        assert abs(pitch.mean() - trim) <= 0.01
        assert np.abs(pitch - trim).max() <= 0.04
        assert np.all(pitch < 0.0)
        thrust = plan.u_d_traj[15:28, 0]
        assert abs(thrust.mean() - params.mass * math.hypot(w, g)) <= 0.1
        assert plan_defects(plan, planner, x_r, a_hat) <= 1e-6


class TestSafetyConstraints:
    def setup_method(self):
        self.obs = SphereObstacle(np.zeros(3), 0.5)
        self.cfg = MpcConfig(N=25, dt=0.1, obstacles=[self.obs])
        self.x0 = np.zeros(9)
        self.x0[0] = 1.5
        self.e_bar = 0.1 * np.ones(26)

    def test_eroded_obstacle_respected(self, params):
        goal = np.zeros((26, 9))
        goal[:, 0] = -1.5
        plan = Planner(self.cfg, params).solve(
            self.x0, goal, e_bar_traj=self.e_bar)
        assert not plan.degraded
        assert plan.violation <= 1e-6
        sds = [self.obs.signed_distance(p) for p in plan.x_d_traj[1:, :3]]
        assert min(sds) >= 0.1 - 1e-6
        # The plan actually crosses to the far side.
        assert plan.x_d_traj[-1, 0] < -1.2

    def test_goal_inside_keepout_cannot_be_solved(self, params):
        goal = np.zeros((26, 9))   # origin sits inside the sphere
        plan = Planner(self.cfg, params).solve(
            self.x0, goal, e_bar_traj=self.e_bar)
        assert plan.status != "solved"
        assert not plan.degraded
        assert plan.violation > 1e-6

    def test_seed_inside_eroded_set_brakes(self, params):
        x_in = np.zeros(9)
        x_in[0] = 0.55   # outside the sphere but inside the eroded set
        x_in[3] = 2.0
        goal = np.zeros((26, 9))
        goal[:, 0] = -1.5
        plan = Planner(self.cfg, params).solve(
            x_in, goal, e_bar_traj=self.e_bar)
        assert plan.degraded
        assert plan.status == "infeasible-relaxed"
        assert plan.x_d_traj.shape == (26, 9)
        v0 = np.linalg.norm(plan.x_d_traj[0, 3:6])
        vN = np.linalg.norm(plan.x_d_traj[-1, 3:6])
        assert vN < 0.05 * v0

    def test_log_record_keys(self, params):
        goal = np.zeros((26, 9))
        goal[:, 0] = -1.5
        plan = Planner(self.cfg, params).solve(
            self.x0, goal, e_bar_traj=self.e_bar)
        rec = plan.log_record()
        assert set(rec) == {"status", "iterations", "cost", "kkt_residual",
                            "wall_time", "violation", "degraded"}


class TestWarmStart:
    def test_shift_warm_start_reuses_work(self, params):
        cfg = MpcConfig()
        planner = Planner(cfg, params)
        x0 = np.zeros(9)
        x0[0] = 0.4
        x_r = np.zeros((cfg.N + 1, 9))
        cold = planner.solve(x0, x_r)
        warm = planner.solve(x0, x_r, warm=cold)
        assert cold.status == "solved" and warm.status == "solved"
        assert warm.iterations <= cold.iterations
        assert np.allclose(warm.u_d_traj, cold.u_d_traj, atol=1e-5)


class TestSmallHelpers:
    def test_reference_tracker_samples_horizon(self):
        class Lissajous:
            def reference(self, t):
                r = np.zeros(9)
                r[0] = math.sin(t)
                r[3] = math.cos(t)
                return r

        cfg = MpcConfig(N=5, dt=0.2)
        out = reference_tracker(1.0, Lissajous(), cfg)
        assert out.shape == (6, 9)
        for k in range(6):
            assert out[k, 0] == pytest.approx(math.sin(1.0 + 0.2 * k))

    def test_hover_input(self, params):
        u = hover_input(params)
        assert u[0] == params.hover_thrust
        assert np.all(u[1:] == 0.0)

    def test_a_hat_extraction_forms(self):
        assert _extract_a_hat(None) is None
        assert np.allclose(_extract_a_hat((np.array([1.0, 2.0]), None)),
                           [1.0, 2.0])

        class Snap:
            a_hat = np.array([3.0, -1.0])

        assert np.allclose(_extract_a_hat(Snap()), [3.0, -1.0])
