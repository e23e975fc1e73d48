"""Tracking control: metric feedback, residual cancellation, attitude loop.

The reduced-model control law combines the plan feedforward, metric-based
state feedback, and cancellation of the estimated residual-force
difference between the current and target states:

    u = u_d - K(x, x_d) e - B(x)^+ (phi(x, x_r) - phi(x_d, x_r)) a_hat

with e = x - x_d (attitude rows wrapped) and B^+ = (B^T B)^-1 B^T.  Only
the difference of the learned basis appears: the absolute residual at
the target is the planner's responsibility.

The attitude rows of u are rate commands in the reduced model.  The
inner loop tracks an absolute attitude command with a geometric SO(3)
law; AttitudeCommandFilter converts between the two by integrating the
rate correction on top of the planned attitude with a slow leak, so the
command equals the plan exactly when the tracking error vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics
from .dynamics import ETA_SLC, OMEGA_SLC, VehicleParams, wrap_angle
from .errors import RankDeficiencyError

ETA_BOX = np.array([0.5 * np.pi, 0.5 * np.pi, np.pi])


def pseudo_inverse(B: np.ndarray) -> np.ndarray:
    """Left pseudo-inverse (B^T B)^-1 B^T with a full-column-rank guard."""
    B = np.asarray(B, dtype=float)
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] < 1.0e-8 * max(1.0, sv[0]):
        raise RankDeficiencyError(f"input matrix is rank deficient (sigma_min={sv[-1]:.2e})")
    return np.linalg.solve(B.T @ B, B.T)


def embed_basis(phi_v: np.ndarray) -> np.ndarray:
    """Lift a velocity-row basis (3, k) into the reduced state space (9, k)."""
    phi_v = np.asarray(phi_v, dtype=float)
    out = np.zeros((9, phi_v.shape[1]))
    out[3:6, :] = phi_v
    return out


def tracking_error(x: np.ndarray, x_d: np.ndarray) -> np.ndarray:
    """e = x - x_d with attitude rows wrapped to (-pi, pi]."""
    e = np.asarray(x, dtype=float) - np.asarray(x_d, dtype=float)
    e[ETA_SLC] = wrap_angle(e[ETA_SLC])
    return e


@dataclass
class TrackingError:
    """Tracking error with its metric-weighted size."""

    e: np.ndarray
    norm_M: float


def make_tracking_error(x, x_d, M: np.ndarray) -> TrackingError:
    e = tracking_error(x, x_d)
    return TrackingError(e, float(np.sqrt(e @ M @ e)))


def clamp_command(u: np.ndarray, params: VehicleParams):
    """Clamp thrust and attitude rows of a reduced command; report if clipped."""
    clipped = u.copy()
    clipped[0] = np.clip(u[0], 0.0, params.f_max)
    clipped[1:4] = np.clip(u[1:4], -ETA_BOX, ETA_BOX)
    return clipped, bool(np.any(clipped != u))


def cbac_control(
    x: np.ndarray,
    x_d: np.ndarray,
    u_d: np.ndarray,
    model,
    a_hat: np.ndarray,
    field,
    x_r: np.ndarray,
    params: VehicleParams,
    K: np.ndarray | None = None,
    varphi_v: np.ndarray | None = None,
):
    """Reduced-model control command; returns (u, saturated).

    model and field may be None when the corresponding precomputed K /
    varphi_v values are supplied (the 100 Hz loop computes them once and
    shares them with the adaptation update).  With x == x_d the returned
    command equals u_d exactly before clamping.
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.asarray(u_d, dtype=float)
    e = tracking_error(x, x_d)
    if K is None:
        K = field.gain(x, x_d, u_d, params)
    u = u_d - K @ e
    if a_hat is not None and np.any(a_hat):
        if varphi_v is None:
            varphi_v = model.phi(x, x_r) - model.phi(x_d, x_r)
        B = dynamics.reduced_B(x, params)
        correction = pseudo_inverse(B) @ embed_basis(varphi_v) @ np.asarray(a_hat, dtype=float)
        u = u - correction
    return clamp_command(u, params)


@dataclass
class AttitudeGains:
    k_rot: float = 8.0
    k_omega: float = 0.6


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of the hat map for a skew-symmetric matrix."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def attitude_inner_loop(
    x_full: np.ndarray,
    cmd: np.ndarray,
    params: VehicleParams,
    gains: AttitudeGains | None = None,
) -> np.ndarray:
    """Thrust/torque command tracking a reduced command (f_u, eta absolute).

    Geometric attitude error on SO(3) with zero commanded rates:

        e_R = 0.5 vee(R_d^T R - R^T R_d),  e_w = omega
        tau = -k_rot e_R - k_omega e_w + omega x (J omega)

    The gyroscopic feedforward cancels the (J w) x w term of the plant,
    leaving pure PD error dynamics.  Thrust and torque are clamped to
    actuator limits.
    """
    gains = gains or AttitudeGains()
    cmd = np.asarray(cmd, dtype=float)
    f_u, eta_cmd = cmd[0], cmd[1:4]
    eta = x_full[ETA_SLC]
    omega = x_full[OMEGA_SLC]
    R = dynamics.rotation_matrix(eta)
    R_d = dynamics.rotation_matrix(eta_cmd)
    e_rot = 0.5 * vee(R_d.T @ R - R.T @ R_d)
    J_omega = params.inertia @ omega
    tau = -gains.k_rot * e_rot - gains.k_omega * omega + np.cross(omega, J_omega)
    u = np.empty(4)
    u[0] = np.clip(f_u, 0.0, params.f_max)
    u[1:4] = np.clip(tau, -params.tau_max, params.tau_max)
    return u


class AttitudeCommandFilter:
    """Accumulates the rate-like attitude correction into an absolute command.

    The reduced command's attitude rows are rates relative to the plan
    (eta_dot = eta_u).  Integrating the correction u_eta - u_{d,eta} on
    top of the planned attitude realizes those dynamics for the inner
    loop; the leak keeps the offset bounded on long runs.
    """

    def __init__(self, leak_time: float = 0.5):
        self.leak_time = leak_time
        self.offset = np.zeros(3)

    def reset(self) -> None:
        self.offset[:] = 0.0

    def update(self, eta_d: np.ndarray, u_eta: np.ndarray, u_d_eta: np.ndarray, dt: float) -> np.ndarray:
        decay = np.exp(-dt / self.leak_time)
        self.offset = decay * self.offset + dt * (np.asarray(u_eta) - np.asarray(u_d_eta))
        cmd = np.asarray(eta_d, dtype=float) + self.offset
        limit = 0.95 * ETA_BOX
        cmd[:2] = np.clip(cmd[:2], -limit[:2], limit[:2])
        cmd[2] = wrap_angle(cmd[2])
        return cmd
