"""Rigid-body quadrotor dynamics and the reduced planning model.

The vehicle is a standard 12-state rigid body with position p, inertial
velocity v, ZYX Euler attitude eta = (phi, theta, psi), and body rates
omega.  Thrust f_T acts along the body z axis, gravity along -e3:

    p_dot     = v
    m v_dot   = R(eta) e3 f_T + f_dist - m g e3
    eta_dot   = T(eta) omega
    J w_dot   = (J w) x w + tau_dist + tau_u

Planning and the tracking controller use the 9-state reduced model
x = (p, v, eta) with input u = (f_u, eta_u):

    x_dot = f(x) + B(x) u,   f(x) = (v, -g e3, 0),
    B(x)  = [[0, 0], [r3(eta)/m, 0], [0, I3]]

where r3(eta) = R(eta) e3 is the tilted thrust axis.  The attitude rows
are driven directly by eta_u; the attitude loop that realizes this
abstraction lives in cbac.attitude_inner_loop.

sdc_matrix factors the difference of the reduced dynamics around a
target (x_d, u_d) as A(x, x_d, u_d) (x - x_d) + eps_A, expanding r3 to
second order in the attitude error and carrying the exact remainder
eps_A separately.  The remainder is confined to the velocity rows and
is third order in the attitude error.

Attitude domain: |phi| < pi/2, |theta| < pi/2, psi in (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, DomainError, SingularityError

GRAVITY = 9.81

# Reduced state layout: x = (p[0:3], v[3:6], eta[6:9]).
P_SLC = slice(0, 3)
V_SLC = slice(3, 6)
ETA_SLC = slice(6, 9)

# Full state layout: x = (p[0:3], v[3:6], eta[6:9], omega[9:12]).
OMEGA_SLC = slice(9, 12)

_DIVERGENCE_LIMIT = 1.0e6
_EULER_COND_LIMIT = 1.0e8


@dataclass
class VehicleParams:
    """Mass, inertia, and actuation limits of the vehicle."""

    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.01, 0.02]))
    gravity: float = GRAVITY
    rotor_radius: float = 0.12
    f_max: float | None = None
    tau_max: float = 2.0

    def __post_init__(self) -> None:
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.f_max is None:
            self.f_max = 4.0 * self.mass * self.gravity
        if self.mass <= 0.0 or self.rotor_radius <= 0.0:
            raise DomainError("mass and rotor radius must be positive")
        if self.inertia.shape != (3, 3):
            raise DomainError("inertia must be a 3x3 matrix")
        if np.linalg.eigvalsh(0.5 * (self.inertia + self.inertia.T)).min() <= 0.0:
            raise DomainError("inertia must be positive definite")
        self.inertia_inv = np.linalg.inv(self.inertia)

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return wrapped if wrapped.ndim else float(wrapped)


def check_attitude(eta: np.ndarray) -> np.ndarray:
    """Validate eta against the admissible attitude box."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (3,):
        raise DomainError(f"attitude must have shape (3,), got {eta.shape}")
    if not np.all(np.isfinite(eta)):
        raise DomainError("attitude must be finite")
    if abs(eta[0]) >= 0.5 * np.pi or abs(eta[1]) >= 0.5 * np.pi:
        raise DomainError(f"roll/pitch outside (-pi/2, pi/2): {eta[:2]}")
    return eta


def rotation_matrix(eta: np.ndarray) -> np.ndarray:
    """Body-to-world rotation for ZYX Euler angles, R = Rz(psi) Ry(theta) Rx(phi)."""
    eta = check_attitude(eta)
    s1, c1 = np.sin(eta[0]), np.cos(eta[0])
    s2, c2 = np.sin(eta[1]), np.cos(eta[1])
    s3, c3 = np.sin(eta[2]), np.cos(eta[2])
    return np.array([
        [c3 * c2, c3 * s2 * s1 - s3 * c1, c3 * s2 * c1 + s3 * s1],
        [s3 * c2, s3 * s2 * s1 + c3 * c1, s3 * s2 * c1 - c3 * s1],
        [-s2, c2 * s1, c2 * c1],
    ])


def thrust_axis(eta: np.ndarray) -> np.ndarray:
    """World-frame thrust direction r3(eta) = R(eta) e3 (unit vector)."""
    eta = check_attitude(eta)
    s1, c1 = np.sin(eta[0]), np.cos(eta[0])
    s2, c2 = np.sin(eta[1]), np.cos(eta[1])
    s3, c3 = np.sin(eta[2]), np.cos(eta[2])
    return np.array([c3 * s2 * c1 + s3 * s1, s3 * s2 * c1 - c3 * s1, c2 * c1])


def thrust_axis_jacobian(eta: np.ndarray) -> np.ndarray:
    """d r3 / d eta, columns ordered (phi, theta, psi)."""
    eta = check_attitude(eta)
    s1, c1 = np.sin(eta[0]), np.cos(eta[0])
    s2, c2 = np.sin(eta[1]), np.cos(eta[1])
    s3, c3 = np.sin(eta[2]), np.cos(eta[2])
    return np.array([
        [-c3 * s2 * s1 + s3 * c1, c3 * c2 * c1, -s3 * s2 * c1 + c3 * s1],
        [-s3 * s2 * s1 - c3 * c1, s3 * c2 * c1, c3 * s2 * c1 + s3 * s1],
        [-c2 * s1, -s2 * c1, 0.0],
    ])


def thrust_axis_hessian(eta: np.ndarray) -> np.ndarray:
    """Second derivatives H[i, l, j] = d^2 r3_i / (d eta_l d eta_j)."""
    eta = check_attitude(eta)
    s1, c1 = np.sin(eta[0]), np.cos(eta[0])
    s2, c2 = np.sin(eta[1]), np.cos(eta[1])
    s3, c3 = np.sin(eta[2]), np.cos(eta[2])
    H = np.empty((3, 3, 3))
    # r3_x = c3 s2 c1 + s3 s1
    H[0] = [
        [-c3 * s2 * c1 - s3 * s1, -c3 * c2 * s1, s3 * s2 * s1 + c3 * c1],
        [-c3 * c2 * s1, -c3 * s2 * c1, -s3 * c2 * c1],
        [s3 * s2 * s1 + c3 * c1, -s3 * c2 * c1, -c3 * s2 * c1 - s3 * s1],
    ]
    # r3_y = s3 s2 c1 - c3 s1
    H[1] = [
        [-s3 * s2 * c1 + c3 * s1, -s3 * c2 * s1, -c3 * s2 * s1 + s3 * c1],
        [-s3 * c2 * s1, -s3 * s2 * c1, c3 * c2 * c1],
        [-c3 * s2 * s1 + s3 * c1, c3 * c2 * c1, -s3 * s2 * c1 + c3 * s1],
    ]
    # r3_z = c2 c1
    H[2] = [
        [-c2 * c1, s2 * s1, 0.0],
        [s2 * s1, -c2 * c1, 0.0],
        [0.0, 0.0, 0.0],
    ]
    return H


def euler_rate_map(eta: np.ndarray) -> np.ndarray:
    """T(eta) mapping body rates omega to Euler-angle rates, eta_dot = T omega."""
    eta = check_attitude(eta)
    s1, c1 = np.sin(eta[0]), np.cos(eta[0])
    t2 = np.tan(eta[1])
    c2 = np.cos(eta[1])
    T = np.array([
        [1.0, s1 * t2, c1 * t2],
        [0.0, c1, -s1],
        [0.0, s1 / c2, c1 / c2],
    ])
    if np.linalg.cond(T) > _EULER_COND_LIMIT:
        raise SingularityError(f"Euler rate map ill conditioned at pitch {eta[1]:.4f}")
    return T


def full_derivative(
    x: np.ndarray,
    u: np.ndarray,
    params: VehicleParams,
    f_dist: np.ndarray | None = None,
    tau_dist: np.ndarray | None = None,
) -> np.ndarray:
    """Time derivative of the 12-state model under thrust/torque input u = (f_T, tau)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (12,):
        raise DomainError(f"full state must have shape (12,), got {x.shape}")
    if u.shape != (4,):
        raise DomainError(f"full control must have shape (4,), got {u.shape}")
    eta = x[ETA_SLC]
    omega = x[OMEGA_SLC]
    r3 = thrust_axis(eta)
    dx = np.empty(12)
    dx[P_SLC] = x[V_SLC]
    dx[V_SLC] = (u[0] / params.mass) * r3
    dx[5] -= params.gravity
    if f_dist is not None:
        dx[V_SLC] += np.asarray(f_dist, dtype=float) / params.mass
    dx[ETA_SLC] = euler_rate_map(eta) @ omega
    torque = u[1:4].copy()
    if tau_dist is not None:
        torque = torque + np.asarray(tau_dist, dtype=float)
    J_omega = params.inertia @ omega
    dx[OMEGA_SLC] = params.inertia_inv @ (np.cross(J_omega, omega) + torque)
    return dx


def integrate_step(x, u, params, disturbance, dt):
    """One RK4 step of the full model.

    disturbance is a callback (x, u) -> (f_dist, tau_dist) in world frame,
    evaluated at every stage; pass None for the nominal model.  dt must lie
    in (0, 0.01] s; the sim loop subdivides longer intervals.
    """
    if not (0.0 < dt <= 0.01):
        raise DomainError(f"dt must be in (0, 0.01], got {dt}")

    def rhs(state):
        if disturbance is None:
            return full_derivative(state, u, params)
        f_d, tau_d = disturbance(state, u)
        return full_derivative(state, u, params, f_d, tau_d)

    x = np.asarray(x, dtype=float)
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)) or np.abs(out).max() > _DIVERGENCE_LIMIT:
        raise DivergenceError("state diverged during integration")
    return out


def reduced_f(x: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Drift of the reduced model, f(x) = (v, -g e3, 0)."""
    x = np.asarray(x, dtype=float)
    f = np.zeros(9)
    f[P_SLC] = x[V_SLC]
    f[5] = -params.gravity
    return f


def reduced_B(x: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Input matrix of the reduced model; thrust column along r3(eta)/m."""
    x = np.asarray(x, dtype=float)
    B = np.zeros((9, 4))
    B[V_SLC, 0] = thrust_axis(x[ETA_SLC]) / params.mass
    B[ETA_SLC, 1:4] = np.eye(3)
    return B


def reduced_f_B(x: np.ndarray, params: VehicleParams):
    """(drift, input matrix) of the reduced model at x."""
    return reduced_f(x, params), reduced_B(x, params)


def reduced_derivative(x, u, params, f_dist_acc=None):
    """x_dot = f(x) + B(x) u, optionally plus a velocity-row acceleration."""
    dx = reduced_f(x, params) + reduced_B(x, params) @ np.asarray(u, dtype=float)
    if f_dist_acc is not None:
        dx[V_SLC] += np.asarray(f_dist_acc, dtype=float)
    return dx


def sdc_matrix(x, x_d, u_d, params):
    """State-dependent factorization of the reduced dynamics around (x_d, u_d).

    Returns (A, eps_A) with

        f(x) + B(x) u_d - f(x_d) - B(x_d) u_d = A (x - x_d) + eps_A

    holding exactly by construction: A expands the thrust-direction term
    to second order in eta - eta_d and eps_A is the computed remainder,
    nonzero only in the velocity rows and third order in the attitude
    error.
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    if x.shape != (9,) or x_d.shape != (9,):
        raise DomainError("reduced states must have shape (9,)")
    if u_d.shape != (4,):
        raise DomainError("reduced control must have shape (4,)")
    f_u = u_d[0]
    eta_d = x_d[ETA_SLC]
    eta_err = x[ETA_SLC] - eta_d

    J = thrust_axis_jacobian(eta_d)
    H = thrust_axis_hessian(eta_d)
    # (1/2) eta_err^T H contracted over the derivative index l.
    curv = 0.5 * np.einsum("l,ilj->ij", eta_err, H)

    A = np.zeros((9, 9))
    A[P_SLC, V_SLC] = np.eye(3)
    A[V_SLC, ETA_SLC] = (f_u / params.mass) * (J + curv)

    lhs = reduced_derivative(x, u_d, params) - reduced_derivative(x_d, u_d, params)
    eps = lhs - A @ (x - x_d)
    return A, eps
