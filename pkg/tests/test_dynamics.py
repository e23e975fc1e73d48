"""Rigid-body model: rotations, rate maps, integration, SDC factorization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dampc import dynamics
from dampc.dynamics import (
    ETA_SLC,
    OMEGA_SLC,
    P_SLC,
    V_SLC,
    VehicleParams,
    euler_rate_map,
    full_derivative,
    integrate_step,
    reduced_B,
    reduced_derivative,
    reduced_f,
    rotation_matrix,
    sdc_matrix,
    thrust_axis,
    thrust_axis_hessian,
    thrust_axis_jacobian,
    wrap_angle,
)
from dampc.errors import DivergenceError, DomainError, SingularityError

ATT = st.floats(-1.2, 1.2)   # inside the (-pi/2, pi/2) roll/pitch box
YAW = st.floats(-3.1, 3.1)


def rand_eta(rng, scale=1.2):
    e = rng.uniform(-scale, scale, 3)
    e[2] = rng.uniform(-3.1, 3.1)
    return e


class TestRotation:
    @given(ATT, ATT, YAW)
    @settings(max_examples=50, deadline=None)
    def test_matches_scipy_zyx_convention(self, phi, theta, psi):
        R = rotation_matrix(np.array([phi, theta, psi]))
        R_ref = Rotation.from_euler("ZYX", [psi, theta, phi]).as_matrix()
        assert np.allclose(R, R_ref, atol=1e-12)

    @given(ATT, ATT, YAW)
    @settings(max_examples=50, deadline=None)
    def test_orthonormal_right_handed(self, phi, theta, psi):
        R = rotation_matrix(np.array([phi, theta, psi]))
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_identity_at_zero(self):
        assert np.allclose(rotation_matrix(np.zeros(3)), np.eye(3))

    def test_thrust_axis_is_third_column(self, rng):
        for _ in range(20):
            eta = rand_eta(rng)
            assert np.allclose(thrust_axis(eta), rotation_matrix(eta)[:, 2])

    def test_rejects_gimbal_boundary(self):
        with pytest.raises(DomainError):
            rotation_matrix(np.array([0.0, np.pi / 2, 0.0]))
        with pytest.raises(DomainError):
            rotation_matrix(np.array([np.pi / 2, 0.0, 0.0]))


class TestThrustAxisDerivatives:
    def test_jacobian_matches_finite_differences(self, rng):
        h = 1e-6
        for _ in range(25):
            eta = rand_eta(rng, scale=1.0)
            J = thrust_axis_jacobian(eta)
            for j in range(3):
                dp = np.zeros(3)
                dp[j] = h
                fd = (thrust_axis(eta + dp) - thrust_axis(eta - dp)) / (2 * h)
                assert np.allclose(J[:, j], fd, atol=1e-8)

    def test_hessian_matches_finite_differences(self, rng):
        h = 1e-5
        for _ in range(10):
            eta = rand_eta(rng, scale=1.0)
            H = thrust_axis_hessian(eta)
            for l in range(3):
                dp = np.zeros(3)
                dp[l] = h
                fd = (thrust_axis_jacobian(eta + dp)
                      - thrust_axis_jacobian(eta - dp)) / (2 * h)
                # fd[i, j] = d^2 r3_i / (d eta_l d eta_j)
                assert np.allclose(H[:, l, :], fd, atol=1e-6)

    def test_hessian_symmetric_in_derivative_indices(self, rng):
        for _ in range(10):
            H = thrust_axis_hessian(rand_eta(rng, scale=1.0))
            assert np.allclose(H, np.swapaxes(H, 1, 2), atol=1e-12)


class TestEulerRateMap:
    def test_inverts_body_rate_kinematics(self, rng):
        # T(eta) must invert the map from Euler rates to body rates,
        # omega = W(eta) eta_dot with W the standard ZYX kinematics.
        for _ in range(20):
            eta = rand_eta(rng, scale=1.0)
            s1, c1 = np.sin(eta[0]), np.cos(eta[0])
            s2, c2 = np.sin(eta[1]), np.cos(eta[1])
            W = np.array([
                [1.0, 0.0, -s2],
                [0.0, c1, s1 * c2],
                [0.0, -s1, c1 * c2],
            ])
            assert np.allclose(euler_rate_map(eta) @ W, np.eye(3), atol=1e-10)

    def test_identity_at_level_attitude(self):
        assert np.allclose(euler_rate_map(np.zeros(3)), np.eye(3))

    def test_raises_near_gimbal_lock(self):
        with pytest.raises((SingularityError, DomainError)):
            euler_rate_map(np.array([0.0, np.pi / 2 - 1e-10, 0.0]))


class TestWrapAngle:
    @given(st.floats(-50.0, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_range_and_equivalence(self, a):
        w = wrap_angle(a)
        assert -np.pi < w <= np.pi
        assert np.isclose(np.sin(w), np.sin(a), atol=1e-9)
        assert np.isclose(np.cos(w), np.cos(a), atol=1e-9)

    def test_pi_maps_to_pi(self):
        assert wrap_angle(np.pi) == pytest.approx(np.pi)
        assert wrap_angle(-np.pi) == pytest.approx(np.pi)


class TestFullDerivative:
    def test_hover_equilibrium(self, params):
        x = np.zeros(12)
        u = np.array([params.hover_thrust, 0.0, 0.0, 0.0])
        assert np.allclose(full_derivative(x, u, params), np.zeros(12))

    def test_gravity_only_freefall(self, params):
        x = np.zeros(12)
        dx = full_derivative(x, np.zeros(4), params)
        expected = np.zeros(12)
        expected[5] = -params.gravity
        assert np.allclose(dx, expected)

    def test_gyroscopic_term(self, params, rng):
        # J w_dot = (J w) x w + tau: cross-coupling appears whenever the
        # spin axis is not a principal axis.
        x = np.zeros(12)
        x[OMEGA_SLC] = [1.0, 2.0, 3.0]
        dx = full_derivative(x, np.array([params.hover_thrust, 0, 0, 0]), params)
        J = params.inertia
        expected = np.linalg.solve(J, np.cross(J @ x[OMEGA_SLC], x[OMEGA_SLC]))
        assert np.allclose(dx[OMEGA_SLC], expected)

    def test_disturbance_enters_velocity_rows(self, params):
        x = np.zeros(12)
        u = np.array([params.hover_thrust, 0.0, 0.0, 0.0])
        f_d = np.array([0.5, -0.25, 0.1])
        dx = full_derivative(x, u, params, f_dist=f_d)
        assert np.allclose(dx[V_SLC], f_d / params.mass)
        assert np.allclose(dx[OMEGA_SLC], 0.0)

    def test_shape_validation(self, params):
        with pytest.raises(DomainError):
            full_derivative(np.zeros(9), np.zeros(4), params)
        with pytest.raises(DomainError):
            full_derivative(np.zeros(12), np.zeros(3), params)


class TestIntegrateStep:
    def test_fourth_order_convergence(self, params):
        # Halving dt must shrink the one-interval error ~16x on a smooth
        # trajectory; measured exponent should exceed 3.5.
        x0 = np.zeros(12)
        x0[V_SLC] = [0.5, -0.3, 0.2]
        x0[ETA_SLC] = [0.1, -0.05, 0.3]
        x0[OMEGA_SLC] = [0.4, 0.2, -0.1]
        u = np.array([params.hover_thrust * 1.05, 0.01, -0.02, 0.005])
        t_end = 0.01

        def simulate(steps):
            x = x0.copy()
            for _ in range(steps):
                x = integrate_step(x, u, params, None, t_end / steps)
            return x

        ref = simulate(400)
        e1 = np.linalg.norm(simulate(1) - ref)
        e2 = np.linalg.norm(simulate(2) - ref)
        order = np.log2(e1 / e2)
        assert order > 3.5

    def test_matches_scipy_rk45_tight_tolerance(self, params):
        from scipy.integrate import solve_ivp

        x0 = np.zeros(12)
        x0[ETA_SLC] = [0.15, -0.1, 0.2]
        x0[OMEGA_SLC] = [0.3, -0.2, 0.1]
        u = np.array([params.hover_thrust * 0.98, 0.005, 0.01, -0.003])
        x = x0.copy()
        for _ in range(100):
            x = integrate_step(x, u, params, None, 0.001)
        sol = solve_ivp(lambda t, s: full_derivative(s, u, params),
                        (0.0, 0.1), x0, rtol=1e-11, atol=1e-12)
        assert np.allclose(x, sol.y[:, -1], atol=1e-8)

    def test_rejects_oversized_dt(self, params):
        with pytest.raises(DomainError):
            integrate_step(np.zeros(12), np.zeros(4), params, None, 0.02)

    def test_divergence_detected(self, params):
        x = np.zeros(12)
        x[V_SLC] = 1e7
        x[0] = 9.0e5
        with pytest.raises(DivergenceError):
            for _ in range(200):
                x = integrate_step(x, np.zeros(4), params, None, 0.01)

    def test_disturbance_callback_sampled_at_stages(self, params):
        calls = []

        def dist(state, u):
            calls.append(state[2])
            return np.zeros(3), np.zeros(3)

        integrate_step(np.zeros(12), np.array([9.81, 0, 0, 0]), params, dist, 0.001)
        assert len(calls) == 4


class TestReducedModel:
    def test_drift_and_input_consistent_with_full_model(self, params, rng):
        # With eta_dot supplied directly as input, the reduced derivative
        # must match the full model's (p, v) rows at matching state.
        for _ in range(10):
            x9 = rng.uniform(-1, 1, 9) * np.array([2, 2, 2, 1, 1, 1, 0.3, 0.3, 1])
            u = np.array([rng.uniform(5, 15), *rng.uniform(-1, 1, 3)])
            dx9 = reduced_derivative(x9, u, params)
            x12 = np.zeros(12)
            x12[:9] = x9
            dx12 = full_derivative(
                x12, np.array([u[0], 0, 0, 0]), params)
            assert np.allclose(dx9[:6], dx12[:6], atol=1e-12)
            assert np.allclose(dx9[ETA_SLC], u[1:4])

    def test_input_matrix_structure(self, params, rng):
        for _ in range(10):
            x = np.zeros(9)
            x[ETA_SLC] = rand_eta(rng, scale=0.5)
            B = reduced_B(x, params)
            assert B.shape == (9, 4)
            assert np.allclose(B[P_SLC, :], 0.0)
            assert np.allclose(B[V_SLC, 0], thrust_axis(x[ETA_SLC]) / params.mass)
            assert np.allclose(B[ETA_SLC, 1:4], np.eye(3))
            assert np.allclose(B[V_SLC, 1:4], 0.0)

    def test_hover_equilibrium_reduced(self, params):
        x = np.zeros(9)
        u = np.array([params.hover_thrust, 0.0, 0.0, 0.0])
        assert np.allclose(reduced_derivative(x, u, params), np.zeros(9))


class TestSdcFactorization:
    def test_exact_by_construction(self, params, rng):
        # A (x - x_d) + eps must reproduce the dynamics difference exactly.
        for _ in range(25):
            x_d = np.zeros(9)
            x_d[ETA_SLC] = rand_eta(rng, scale=0.3)
            x_d[V_SLC] = rng.uniform(-1, 1, 3)
            x = x_d + 0.3 * rng.standard_normal(9)
            x[ETA_SLC] = np.clip(x[ETA_SLC], -1.2, 1.2)
            u_d = np.array([rng.uniform(5, 15), *rng.uniform(-0.5, 0.5, 3)])
            A, eps = sdc_matrix(x, x_d, u_d, params)
            lhs = reduced_derivative(x, u_d, params) \
                - reduced_derivative(x_d, u_d, params)
            assert np.allclose(A @ (x - x_d) + eps, lhs, atol=1e-12)

    def test_remainder_third_order_in_attitude_error(self, params):
        # Scaling the attitude error by s must scale eps by ~s^3.
        x_d = np.zeros(9)
        u_d = np.array([9.81, 0.0, 0.0, 0.0])
        de = np.array([0.2, -0.15, 0.1])
        norms = []
        for s in (1.0, 0.5):
            x = x_d.copy()
            x[ETA_SLC] = s * de
            _, eps = sdc_matrix(x, x_d, u_d, params)
            norms.append(np.linalg.norm(eps))
        order = np.log2(norms[0] / norms[1])
        assert order > 2.7

    def test_remainder_velocity_rows_only(self, params, rng):
        for _ in range(10):
            x_d = np.zeros(9)
            x = x_d + 0.4 * rng.standard_normal(9)
            x[ETA_SLC] = np.clip(x[ETA_SLC], -1.0, 1.0)
            u_d = np.array([10.0, 0.1, -0.1, 0.0])
            _, eps = sdc_matrix(x, x_d, u_d, params)
            assert np.allclose(eps[P_SLC], 0.0)
            assert np.allclose(eps[ETA_SLC], 0.0)

    def test_position_rows_are_velocity_identity(self, params):
        A, _ = sdc_matrix(np.zeros(9), np.zeros(9),
                          np.array([9.81, 0, 0, 0]), params)
        assert np.allclose(A[P_SLC, V_SLC], np.eye(3))
        assert np.allclose(A[P_SLC, P_SLC], 0.0)


class TestVehicleParams:
    def test_default_thrust_ceiling_is_four_g(self):
        p = VehicleParams()
        assert p.f_max == pytest.approx(4.0 * p.mass * p.gravity)

    def test_rejects_bad_inertia(self):
        with pytest.raises(DomainError):
            VehicleParams(inertia=np.diag([0.01, -0.01, 0.02]))
        with pytest.raises(DomainError):
            VehicleParams(inertia=np.eye(2))

    def test_rejects_nonpositive_mass(self):
        with pytest.raises(DomainError):
            VehicleParams(mass=0.0)
