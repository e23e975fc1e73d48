"""Receding-horizon trajectory planning on the reduced model.

The planner discretizes the reduced dynamics augmented with the learned
residual phi(x, x_r) a_hat and solves

    min  |x_N - r_N|^2_Q + sum_k |x_k - r_k|^2_Q + |u_k - u_eq|^2_R
    s.t. x_{k+1} = F(x_k, u_k, r_k),  u_k in U,  x_k in X,
         sd_obstacle(p_k) >= e_bar_k,  |x_N - r_N| <= eps_l (soft)

by direct multiple shooting and Gauss-Newton SQP.  Each iteration
linearizes the shooting defects, condenses the state perturbations onto
the control perturbations, and solves a box-constrained QP with a
projected active-set method; steps are globalized by an L1 merit
function on the defects.  Input effort is measured against the thrust
that holds each reference point static under the in-model disturbance
(the plain hover input when no model is attached), so an exact trim
plan has zero cost; penalizing raw thrust would bias every plan toward
free-fall, and penalizing distance from hover would fight the model
exactly where it matters, e.g. riding a ground cushion down to a pad.

Safety and state-box constraints enter as quadratic hinge penalties
whose weights escalate until the converged plan violates them by no
more than the feasibility tolerance; a plan that cannot be repaired is
returned as infeasible-relaxed.  A seed state already inside an eroded
obstacle admits no safe plan at all, and the planner falls back to a
brake-to-hover rollout flagged as degraded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import ETA_SLC, P_SLC, V_SLC, VehicleParams
from .errors import DomainError, SingularityError

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max-iter"
STATUS_INFEASIBLE = "infeasible-relaxed"

_ACTIVATION_BAND = 1.0e-3   # hinge curvature kept alive this close to the boundary


@dataclass
class SphereObstacle:
    """Keep-out ball; signed distance is positive outside."""

    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if self.radius <= 0.0:
            raise DomainError("obstacle radius must be positive")

    def signed_distance(self, p: np.ndarray) -> float:
        return float(np.linalg.norm(p - self.center) - self.radius)

    def distance_gradient(self, p: np.ndarray) -> np.ndarray:
        d = p - self.center
        n = np.linalg.norm(d)
        if n < 1e-12:
            return np.array([0.0, 0.0, 1.0])
        return d / n

    def describe(self) -> dict:
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass
class HalfSpaceObstacle:
    """Forbidden region {p : normal . p >= offset}, e.g. terrain."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=float).reshape(3)
        scale = np.linalg.norm(n)
        if scale < 1e-12:
            raise DomainError("half-space normal must be nonzero")
        self.normal = n / scale
        self.offset = float(self.offset) / scale

    def signed_distance(self, p: np.ndarray) -> float:
        return float(self.offset - self.normal @ p)

    def distance_gradient(self, p: np.ndarray) -> np.ndarray:
        return -self.normal

    def describe(self) -> dict:
        return {"kind": "half-space", "normal": list(self.normal), "offset": self.offset}


def obstacle_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "sphere":
        return SphereObstacle(np.array(d["center"]), d["radius"])
    if kind == "half-space":
        return HalfSpaceObstacle(np.array(d["normal"]), d["offset"])
    raise DomainError(f"unknown obstacle kind {kind!r}")


@dataclass
class BoxLimits:
    """State box X and input box U for the planner."""

    state_lb: np.ndarray = field(default_factory=lambda: np.array(
        [-100.0, -100.0, -100.0, -20.0, -20.0, -20.0, -1.2, -1.2, -np.pi]))
    state_ub: np.ndarray = field(default_factory=lambda: np.array(
        [100.0, 100.0, 100.0, 20.0, 20.0, 20.0, 1.2, 1.2, np.pi]))
    input_lb: np.ndarray = field(default_factory=lambda: np.array(
        [0.0, -6.0, -6.0, -6.0]))
    input_ub: np.ndarray = field(default_factory=lambda: np.array(
        [40.0, 6.0, 6.0, 6.0]))

    def __post_init__(self) -> None:
        for name in ("state_lb", "state_ub", "input_lb", "input_ub"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.state_lb.shape != (9,) or self.state_ub.shape != (9,):
            raise DomainError("state box must be two 9-vectors")
        if self.input_lb.shape != (4,) or self.input_ub.shape != (4,):
            raise DomainError("input box must be two 4-vectors")
        if np.any(self.state_ub < self.state_lb) or np.any(self.input_ub < self.input_lb):
            raise DomainError("box upper bounds must dominate lower bounds")

    def describe(self) -> dict:
        return {k: list(getattr(self, k))
                for k in ("state_lb", "state_ub", "input_lb", "input_ub")}


@dataclass
class SolverOptions:
    max_iter: int = 30
    tol_step: float = 1.0e-9
    tol_defect: float = 1.0e-9
    # Stationarity the condensed Gauss-Newton model can actually deliver:
    # cost gradients are O(10), so this is a relative 1e-7.
    tol_kkt: float = 1.0e-6
    armijo: float = 1.0e-4
    min_step: float = 2.0 ** -20
    mu_terminal: float = 1.0e4
    mu_safety: float = 1.0e5
    mu_state: float = 1.0e4
    escalation_factor: float = 10.0
    max_escalations: int = 4
    violation_tol: float = 1.0e-6

    def describe(self) -> dict:
        return {k: getattr(self, k) for k in (
            "max_iter", "tol_step", "tol_defect", "tol_kkt", "armijo",
            "mu_terminal", "mu_safety", "mu_state",
            "escalation_factor", "max_escalations", "violation_tol")}


def _check_spd(name: str, mat: np.ndarray, size: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (size, size):
        raise DomainError(f"{name} must be {size}x{size}")
    if np.abs(mat - mat.T).max() > 1e-12:
        raise DomainError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat)[0] <= 0.0:
        raise DomainError(f"{name} must be positive definite")
    return mat


@dataclass
class MpcConfig:
    N: int = 20
    dt: float = 0.1
    Q_m: np.ndarray = field(default_factory=lambda: np.diag(
        [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1]))
    R_m: np.ndarray = field(default_factory=lambda: np.diag([0.1, 1.0, 1.0, 1.0]))
    eps_l: float = 0.1
    obstacles: list = field(default_factory=list)
    limits: BoxLimits = field(default_factory=BoxLimits)
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if self.N < 2:
            raise DomainError("horizon must have at least 2 steps")
        if self.dt <= 0.0:
            raise DomainError("planning step must be positive")
        if self.eps_l <= 0.0:
            raise DomainError("goal radius must be positive")
        self.Q_m = _check_spd("Q_m", self.Q_m, 9)
        self.R_m = _check_spd("R_m", self.R_m, 4)

    def describe(self) -> dict:
        return {
            "N": self.N,
            "dt": self.dt,
            "Q_m": [list(r) for r in self.Q_m],
            "R_m": [list(r) for r in self.R_m],
            "eps_l": self.eps_l,
            "obstacles": [o.describe() for o in self.obstacles],
            "limits": self.limits.describe(),
            "solver": self.solver.describe(),
        }


@dataclass
class PlanResult:
    x_d_traj: np.ndarray          # (N+1, 9)
    u_d_traj: np.ndarray          # (N, 4)
    cost: float
    status: str
    kkt_residual: float
    iterations: int = 0
    wall_time: float = 0.0
    violation: float = 0.0
    degraded: bool = False

    def log_record(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "cost": self.cost,
            "kkt_residual": self.kkt_residual,
            "wall_time": self.wall_time,
            "violation": self.violation,
            "degraded": self.degraded,
        }


def hover_input(params: VehicleParams) -> np.ndarray:
    return np.array([params.hover_thrust, 0.0, 0.0, 0.0])


def _extract_a_hat(a_snapshot):
    if a_snapshot is None:
        return None
    if hasattr(a_snapshot, "a_hat"):
        return np.asarray(a_snapshot.a_hat, dtype=float)
    return np.asarray(a_snapshot[0], dtype=float)


def _aug_derivative(x, u, x_r, model, a_hat, params):
    dx = dynamics.reduced_derivative(x, u, params)
    if model is not None and a_hat is not None:
        dx[V_SLC] += model.phi(x, x_r) @ a_hat
    return dx


def discretize_augmented(x_d, u_d, x_r, model, a_hat, dt, params=None):
    """One RK4 step of the reduced dynamics plus the learned residual.

    The basis network is evaluated at every RK4 stage, so a state-dependent
    residual is integrated to the same order as the nominal terms.
    """
    params = params if params is not None else VehicleParams()
    x = np.asarray(x_d, dtype=float)
    u = np.asarray(u_d, dtype=float)
    if x.shape != (9,) or u.shape != (4,):
        raise DomainError("reduced state/control shapes must be (9,) and (4,)")
    a = None if a_hat is None else np.asarray(a_hat, dtype=float)

    def g(xs):
        return _aug_derivative(xs, u, x_r, model, a, params)

    k1 = g(x)
    k2 = g(x + 0.5 * dt * k1)
    k3 = g(x + 0.5 * dt * k2)
    k4 = g(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _aug_jacobians(x, u, x_r, model, a_hat, params):
    """(d xdot / dx, d xdot / du) of the augmented reduced dynamics."""
    eta = x[ETA_SLC]
    J = np.zeros((9, 9))
    J[P_SLC, V_SLC] = np.eye(3)
    J[V_SLC, ETA_SLC] = (u[0] / params.mass) * dynamics.thrust_axis_jacobian(eta)
    if model is not None and a_hat is not None:
        _, dphi = model.value_and_state_jacobian(x, x_r)
        J[V_SLC, :] += np.einsum("ikj,k->ij", dphi, a_hat)
    G = np.zeros((9, 4))
    G[V_SLC, 0] = dynamics.thrust_axis(eta) / params.mass
    G[ETA_SLC, 1:4] = np.eye(3)
    return J, G


def _step_with_jacobians(x, u, x_r, model, a_hat, dt, params):
    """RK4 step and its exact sensitivities to (x, u) by the chain rule."""
    eye = np.eye(9)

    def stage(xs, Dx, Du):
        k = _aug_derivative(xs, u, x_r, model, a_hat, params)
        J, G = _aug_jacobians(xs, u, x_r, model, a_hat, params)
        return k, J @ Dx, J @ Du + G

    k1, D1x, D1u = stage(x, eye, np.zeros((9, 4)))
    k2, D2x, D2u = stage(x + 0.5 * dt * k1, eye + 0.5 * dt * D1x, 0.5 * dt * D1u)
    k3, D3x, D3u = stage(x + 0.5 * dt * k2, eye + 0.5 * dt * D2x, 0.5 * dt * D2u)
    k4, D4x, D4u = stage(x + dt * k3, eye + dt * D3x, dt * D3u)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + (dt / 6.0) * (D1x + 2.0 * D2x + 2.0 * D3x + D4x)
    B = (dt / 6.0) * (D1u + 2.0 * D2u + 2.0 * D3u + D4u)
    return x_next, A, B


def reference_tracker(t: float, scenario, cfg: MpcConfig) -> np.ndarray:
    """Reference states sampled over the horizon, shape (N+1, 9)."""
    return np.stack([np.asarray(scenario.reference(t + k * cfg.dt), dtype=float)
                     for k in range(cfg.N + 1)])


def solve_box_qp(H, g, lb, ub, tol=1e-11, max_iter=500):
    """min 1/2 d'Hd + g'd over the box [lb, ub]; H positive definite.

    Primal active-set iteration: solve on the free coordinates, walk to
    the first blocking bound, and release bound constraints whose
    multipliers have the wrong sign.  Degenerate coordinates (lb == ub)
    stay clamped throughout.
    """
    n = g.shape[0]
    d = np.clip(np.zeros(n), lb, ub)
    # -1 at lower bound, +1 at upper, 0 free, 2 pinned (degenerate box)
    state = np.zeros(n, dtype=int)
    pinned = (ub - lb) <= 1e-14
    state[pinned] = 2
    d[pinned] = lb[pinned]
    span = np.maximum(ub - lb, 1e-30)

    for _ in range(max_iter):
        free = state == 0
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ d[~free])
            try:
                target = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                target = np.linalg.solve(Hff + 1e-12 * np.eye(Hff.shape[0]), rhs)
            step = target - d[free]
            # Ratio test against the box on the free coordinates.
            alpha = 1.0
            block_idx = -1
            block_side = 0
            free_ids = np.flatnonzero(free)
            for loc, i in enumerate(free_ids):
                s = step[loc]
                if s > tol * span[i] and d[i] + s > ub[i]:
                    a = (ub[i] - d[i]) / s
                    if a < alpha:
                        alpha, block_idx, block_side = a, i, 1
                elif s < -tol * span[i] and d[i] + s < lb[i]:
                    a = (lb[i] - d[i]) / s
                    if a < alpha:
                        alpha, block_idx, block_side = a, i, -1
            d[free] += max(alpha, 0.0) * step
            if block_idx >= 0:
                d[block_idx] = ub[block_idx] if block_side > 0 else lb[block_idx]
                state[block_idx] = block_side
                continue
        # Free subspace optimal; check bound multipliers.
        grad = H @ d + g
        release = -1
        worst = -tol * (1.0 + np.abs(grad).max())
        for i in np.flatnonzero(state == -1):
            if grad[i] < worst:
                worst = grad[i]
                release = i
        for i in np.flatnonzero(state == 1):
            if -grad[i] < worst:
                worst = -grad[i]
                release = i
        if release < 0:
            return d, grad
        state[release] = 0
    return d, H @ d + g


class Planner:
    """SQP planner bound to a vehicle, a basis model, and a config."""

    def __init__(self, cfg: MpcConfig, params: VehicleParams | None = None, model=None):
        self.cfg = cfg
        self.params = params if params is not None else VehicleParams()
        self.model = model
        self.u_eq = hover_input(self.params)
        self._u_ref = np.tile(self.u_eq, (cfg.N, 1))

    def _input_reference(self, x_r_traj, a_hat):
        """Per-stage zero-effort input: thrust balancing gravity minus the
        in-model disturbance at the reference point, attitude rates zero."""
        u_ref = np.tile(self.u_eq, (self.cfg.N, 1))
        if a_hat is None or self.model is None or not np.any(a_hat):
            return u_ref
        g_vec = np.array([0.0, 0.0, self.params.gravity])
        for k in range(self.cfg.N):
            r = x_r_traj[k]
            w = g_vec - self.model.phi(r, r) @ a_hat
            u_ref[k, 0] = self.params.mass * np.linalg.norm(w)
        np.clip(u_ref[:, 0], self.cfg.limits.input_lb[0],
                self.cfg.limits.input_ub[0], out=u_ref[:, 0])
        return u_ref

    # -- trajectory bookkeeping ------------------------------------------

    def _rollout(self, x0, U, x_r_traj, a_hat):
        X = np.empty((self.cfg.N + 1, 9))
        X[0] = x0
        for k in range(self.cfg.N):
            X[k + 1] = discretize_augmented(
                X[k], U[k], x_r_traj[k], self.model, a_hat, self.cfg.dt, self.params)
        return X

    def _defects(self, X, U, x_r_traj, a_hat):
        c = np.empty((self.cfg.N, 9))
        for k in range(self.cfg.N):
            pred = discretize_augmented(
                X[k], U[k], x_r_traj[k], self.model, a_hat, self.cfg.dt, self.params)
            c[k] = X[k + 1] - pred
        return c

    def _tracking_cost(self, X, U, x_r_traj):
        cfg = self.cfg
        cost = 0.0
        for k in range(1, cfg.N + 1):
            e = X[k] - x_r_traj[k]
            cost += e @ cfg.Q_m @ e
        e0 = X[0] - x_r_traj[0]
        cost += e0 @ cfg.Q_m @ e0
        for k in range(cfg.N):
            du = U[k] - self._u_ref[k]
            cost += du @ cfg.R_m @ du
        return float(cost)

    def _penalties(self, X, x_r_traj, e_bar, mu):
        """(penalty value, max hard-constraint violation)."""
        cfg = self.cfg
        mu_t, mu_s, mu_x = mu
        total = 0.0
        worst = 0.0
        h_term = np.linalg.norm(X[cfg.N] - x_r_traj[cfg.N]) - cfg.eps_l
        if h_term > 0.0:
            total += mu_t * h_term * h_term
        for k in range(1, cfg.N + 1):
            p = X[k][P_SLC]
            for obs in cfg.obstacles:
                h = e_bar[k] - obs.signed_distance(p)
                if h > 0.0:
                    total += mu_s * h * h
                    worst = max(worst, h)
            hi = X[k] - cfg.limits.state_ub
            lo = cfg.limits.state_lb - X[k]
            for h in np.concatenate([hi, lo]):
                if h > 0.0:
                    total += mu_x * h * h
                    worst = max(worst, h)
        return total, worst

    def _merit(self, X, U, x_r_traj, e_bar, a_hat, mu, sigma):
        try:
            c = self._defects(X, U, x_r_traj, a_hat)
            pen, _ = self._penalties(X, x_r_traj, e_bar, mu)
            cost = self._tracking_cost(X, U, x_r_traj)
        except (DomainError, SingularityError):
            return None, None
        return cost + pen + sigma * np.abs(c).sum(), c

    def _cost_gradients(self, X, U, x_r_traj, e_bar, mu):
        """Exact gradients of the penalized cost in the full (x, u) space."""
        cfg = self.cfg
        N = cfg.N
        mu_t, mu_s, mu_x = mu
        Gx = np.zeros((N + 1, 9))
        Gu = np.zeros((N, 4))
        for k in range(1, N + 1):
            Gx[k] = 2.0 * cfg.Q_m @ (X[k] - x_r_traj[k])
            p = X[k][P_SLC]
            for obs in cfg.obstacles:
                h = e_bar[k] - obs.signed_distance(p)
                if h > 0.0:
                    Gx[k][P_SLC] -= 2.0 * mu_s * h * obs.distance_gradient(p)
            Gx[k] += 2.0 * mu_x * np.maximum(X[k] - cfg.limits.state_ub, 0.0)
            Gx[k] -= 2.0 * mu_x * np.maximum(cfg.limits.state_lb - X[k], 0.0)
        eN = X[N] - x_r_traj[N]
        dist = np.linalg.norm(eN)
        if dist > cfg.eps_l:
            Gx[N] += 2.0 * mu_t * (dist - cfg.eps_l) * eN / dist
        for k in range(N):
            Gu[k] = 2.0 * cfg.R_m @ (U[k] - self._u_ref[k])
        return Gx, Gu

    # -- QP assembly ------------------------------------------------------

    def _build_qp(self, X, U, c, x_r_traj, e_bar, a_hat, mu):
        cfg = self.cfg
        N = cfg.N
        n_u = 4 * N
        mu_t, mu_s, mu_x = mu

        A = np.empty((N, 9, 9))
        B = np.empty((N, 9, 4))
        for k in range(N):
            _, A[k], B[k] = _step_with_jacobians(
                X[k], U[k], x_r_traj[k], self.model, a_hat, cfg.dt, self.params)

        # Condensation: delta x_k = m_k + S_k delta u.
        S = np.zeros((N + 1, 9, n_u))
        m = np.zeros((N + 1, 9))
        for k in range(N):
            S[k + 1] = A[k] @ S[k]
            S[k + 1][:, 4 * k:4 * k + 4] += B[k]
            m[k + 1] = A[k] @ m[k] - c[k]

        H = np.zeros((n_u, n_u))
        g = np.zeros(n_u)
        Q2 = 2.0 * cfg.Q_m
        R2 = 2.0 * cfg.R_m

        def add_state_quad(k, W, grad_vec):
            nonlocal H, g
            Sk = S[k]
            H += Sk.T @ W @ Sk
            g += Sk.T @ (grad_vec + W @ m[k])

        for k in range(1, N + 1):
            e = X[k] - x_r_traj[k]
            add_state_quad(k, Q2, Q2 @ e)
        for k in range(N):
            sl = slice(4 * k, 4 * k + 4)
            H[sl, sl] += R2
            g[sl] += R2 @ (U[k] - self._u_ref[k])

        # Soft terminal ball: hinge on the Euclidean goal distance.  The
        # hinge-squared term is smooth, so its exact (positive
        # semidefinite) Hessian is available, not just the Gauss-Newton
        # outer product.
        eN = X[N] - x_r_traj[N]
        dist = np.linalg.norm(eN)
        h = dist - cfg.eps_l
        if h > -_ACTIVATION_BAND and dist > 1e-9:
            grad9 = eN / dist
            gn = 2.0 * mu_t * np.outer(grad9, grad9)
            if h > 0.0:
                gn = gn + (2.0 * mu_t * h / dist) * (np.eye(9) - np.outer(grad9, grad9))
            add_state_quad(N, gn, 2.0 * mu_t * max(h, 0.0) * grad9)

        # Eroded obstacles and the state box, stage by stage.
        for k in range(1, N + 1):
            p = X[k][P_SLC]
            for obs in cfg.obstacles:
                h = e_bar[k] - obs.signed_distance(p)
                if h > -_ACTIVATION_BAND:
                    grad9 = np.zeros(9)
                    grad9[P_SLC] = -obs.distance_gradient(p)
                    gn = 2.0 * mu_s * np.outer(grad9, grad9)
                    add_state_quad(k, gn, 2.0 * mu_s * max(h, 0.0) * grad9)
            hi = X[k] - cfg.limits.state_ub
            lo = cfg.limits.state_lb - X[k]
            for i in range(9):
                if hi[i] > -_ACTIVATION_BAND:
                    grad9 = np.zeros(9)
                    grad9[i] = 1.0
                    add_state_quad(k, 2.0 * mu_x * np.outer(grad9, grad9),
                                   2.0 * mu_x * max(hi[i], 0.0) * grad9)
                if lo[i] > -_ACTIVATION_BAND:
                    grad9 = np.zeros(9)
                    grad9[i] = -1.0
                    add_state_quad(k, 2.0 * mu_x * np.outer(grad9, grad9),
                                   2.0 * mu_x * max(lo[i], 0.0) * grad9)

        H = 0.5 * (H + H.T)
        lb = np.tile(cfg.limits.input_lb, N) - U.reshape(-1)
        ub = np.tile(cfg.limits.input_ub, N) - U.reshape(-1)
        return H, g, lb, ub, S, m, A, B

    def _kkt_residual(self, X, U, x_r_traj, e_bar, A, B, mu):
        """Projected-gradient stationarity of the penalized cost over U."""
        cfg = self.cfg
        N = cfg.N
        mu_t, mu_s, mu_x = mu
        lam = 2.0 * cfg.Q_m @ (X[N] - x_r_traj[N])
        eN = X[N] - x_r_traj[N]
        dist = np.linalg.norm(eN)
        if dist > cfg.eps_l:
            lam = lam + 2.0 * mu_t * (dist - cfg.eps_l) * eN / dist
        grad_u = np.empty((N, 4))
        for k in range(N - 1, -1, -1):
            grad_u[k] = B[k].T @ lam + 2.0 * cfg.R_m @ (U[k] - self._u_ref[k])
            stage = 2.0 * cfg.Q_m @ (X[k] - x_r_traj[k])
            p = X[k][P_SLC]
            for obs in cfg.obstacles:
                h = e_bar[k] - obs.signed_distance(p)
                if h > 0.0:
                    grad9 = np.zeros(9)
                    grad9[P_SLC] = -obs.distance_gradient(p)
                    stage += 2.0 * mu_s * h * grad9
            hi = X[k] - cfg.limits.state_ub
            lo = cfg.limits.state_lb - X[k]
            stage += 2.0 * mu_x * np.maximum(hi, 0.0)
            stage -= 2.0 * mu_x * np.maximum(lo, 0.0)
            lam = A[k].T @ lam + stage
        flat = U.reshape(-1)
        lo_b = np.tile(cfg.limits.input_lb, N)
        hi_b = np.tile(cfg.limits.input_ub, N)
        proj = flat - np.clip(flat - grad_u.reshape(-1), lo_b, hi_b)
        return float(np.abs(proj).max())

    # -- main entry points -------------------------------------------------

    def _initial_trajectory(self, x0, x_r_traj, warm, a_hat):
        """Shifted warm start when available; otherwise seed the shooting
        states at the reference (multiple shooting tolerates the defects)."""
        cfg = self.cfg
        if warm is not None and warm.u_d_traj.shape == (cfg.N, 4):
            U = np.vstack([warm.u_d_traj[1:], warm.u_d_traj[-1:]])
            U = np.clip(U, cfg.limits.input_lb, cfg.limits.input_ub)
            X = np.empty((cfg.N + 1, 9))
            X[0] = x0
            X[1:cfg.N] = warm.x_d_traj[2:]
            try:
                X[cfg.N] = discretize_augmented(
                    warm.x_d_traj[cfg.N], U[cfg.N - 1], x_r_traj[cfg.N - 1],
                    self.model, a_hat, cfg.dt, self.params)
            except (DomainError, SingularityError):
                X[cfg.N] = warm.x_d_traj[cfg.N]
            return X, U
        U = np.clip(self._u_ref.copy(),
                    cfg.limits.input_lb, cfg.limits.input_ub)
        X = x_r_traj.copy()
        X[0] = x0
        # Keep the seed inside the model's attitude domain.
        X[:, 6:8] = np.clip(X[:, 6:8], -1.2, 1.2)
        return X, U

    def _brake_plan(self, x0, x_r_traj, start_time) -> PlanResult:
        """Level out and null the velocity: the fallback when no plan is safe."""
        cfg = self.cfg
        self._u_ref = np.tile(self.u_eq, (cfg.N, 1))
        X = np.empty((cfg.N + 1, 9))
        U = np.empty((cfg.N, 4))
        X[0] = x0
        for k in range(cfg.N):
            x = X[k]
            a_des = -1.5 * x[V_SLC]
            d = a_des + np.array([0.0, 0.0, self.params.gravity])
            d_norm = max(np.linalg.norm(d), 1e-6)
            f_u = self.params.mass * d_norm
            theta_des = np.arctan2(d[0], d[2])
            phi_des = np.arctan2(-d[1], np.hypot(d[0], d[2]))
            eta_des = np.array([phi_des, theta_des, 0.0])
            u = np.concatenate([[f_u], 4.0 * (eta_des - x[ETA_SLC])])
            U[k] = np.clip(u, cfg.limits.input_lb, cfg.limits.input_ub)
            X[k + 1] = discretize_augmented(
                x, U[k], x_r_traj[k], self.model, None, cfg.dt, self.params)
        return PlanResult(
            x_d_traj=X, u_d_traj=U,
            cost=self._tracking_cost(X, U, x_r_traj),
            status=STATUS_INFEASIBLE, kkt_residual=np.inf,
            iterations=0, wall_time=time.perf_counter() - start_time,
            violation=np.inf, degraded=True)

    def solve(self, x0, x_r_traj, a_snapshot=None, e_bar_traj=None, warm=None) -> PlanResult:
        cfg = self.cfg
        opts = cfg.solver
        start = time.perf_counter()
        x0 = np.asarray(x0, dtype=float).reshape(9)
        x_r_traj = np.asarray(x_r_traj, dtype=float)
        if x_r_traj.shape != (cfg.N + 1, 9):
            raise DomainError(f"reference must have shape ({cfg.N + 1}, 9)")
        e_bar = (np.zeros(cfg.N + 1) if e_bar_traj is None
                 else np.asarray(e_bar_traj, dtype=float).reshape(cfg.N + 1))
        a_hat = _extract_a_hat(a_snapshot)
        if self.model is None:
            a_hat = None
        self._u_ref = self._input_reference(x_r_traj, a_hat)

        # No plan can repair a seed already inside an eroded obstacle.
        for obs in cfg.obstacles:
            if obs.signed_distance(x0[P_SLC]) < e_bar[0]:
                return self._brake_plan(x0, x_r_traj, start)

        X, U = self._initial_trajectory(x0, x_r_traj, warm, a_hat)

        mu = [opts.mu_terminal, opts.mu_safety, opts.mu_state]
        sigma = 10.0
        damping = 0.0
        total_iters = 0
        converged = False
        A_lin = B_lin = None

        for escalation in range(opts.max_escalations + 1):
            converged = False
            restorations = 0
            for _ in range(opts.max_iter):
                total_iters += 1
                c = self._defects(X, U, x_r_traj, a_hat)
                H, g, lb, ub, S, m, A_lin, B_lin = self._build_qp(
                    X, U, c, x_r_traj, e_bar, a_hat, mu)
                # Reduced projected gradient: stationarity of the penalized
                # cost over the input box once defects are closed.
                flat = U.reshape(-1)
                pg = np.abs(flat - np.clip(flat - g, flat + lb, flat + ub)).max()
                if pg <= opts.tol_kkt and np.abs(c).max() <= opts.tol_defect:
                    converged = True
                    break
                H_qp = H
                if damping > 0.0:
                    H_qp = H + damping * np.diag(np.maximum(np.diag(H), 1e-8))
                du, _ = solve_box_qp(H_qp, g, lb, ub)
                dX = m + np.einsum("kij,j->ki", S, du)
                if np.abs(du).max() <= opts.tol_step and np.abs(c).max() <= opts.tol_defect:
                    converged = True
                    break

                # Han-Powell weight: the directional derivative of the L1
                # merit along (dX, du) must stay sufficiently negative.  The
                # weight may also shrink again, or it poisons later steps.
                c_l1 = np.abs(c).sum()
                Gx, Gu = self._cost_gradients(X, U, x_r_traj, e_bar, mu)
                d1 = float(np.einsum("ki,ki->", Gx, dX)
                           + Gu.reshape(-1) @ du)
                needed = 1.5 * d1 / c_l1 if (c_l1 > 1e-14 and d1 > 0.0) else 1.0
                sigma = min(max(needed, 0.5 * sigma, 1.0), 1e6)
                descent = d1 - sigma * c_l1
                if descent >= -1e-16:
                    converged = np.abs(c).max() <= opts.tol_defect
                    break

                merit0, _ = self._merit(X, U, x_r_traj, e_bar, a_hat, mu, sigma)
                t = 1.0
                accepted = False
                while t >= opts.min_step:
                    Xt = X + t * dX
                    Ut = U + t * du.reshape(cfg.N, 4)
                    merit_t, _ = self._merit(Xt, Ut, x_r_traj, e_bar, a_hat, mu, sigma)
                    if merit_t is not None and merit_t <= merit0 + opts.armijo * t * descent:
                        X, U = Xt, Ut
                        accepted = True
                        break
                    t *= 0.5
                if not accepted:
                    # Close the defects exactly and retry once or twice; if
                    # the trajectory is already consistent, no step helps.
                    if np.abs(c).max() > opts.tol_defect and restorations < 2:
                        try:
                            X = self._rollout(x0, U, x_r_traj, a_hat)
                            restorations += 1
                            damping = max(damping, 1e-2)
                            continue
                        except (DomainError, SingularityError):
                            break
                    # A dead line search from a feasible, near-stationary
                    # iterate is convergence at the model's resolution, not
                    # a failure.
                    converged = (np.abs(c).max() <= opts.tol_defect
                                 and pg <= 10.0 * opts.tol_kkt)
                    break
                # Once near-feasible, close the defects exactly so the next
                # iterations are plain descent on the penalized cost.
                c_now = self._defects(X, U, x_r_traj, a_hat)
                if 0.0 < np.abs(c_now).max() <= 1e-3:
                    try:
                        X = self._rollout(x0, U, x_r_traj, a_hat)
                    except (DomainError, SingularityError):
                        pass
                # Trust-region flavor: back off the Gauss-Newton model when
                # the line search collapses the step, relax when it does not.
                if t >= 0.5:
                    damping = 0.0 if damping < 1e-3 else damping * 0.25
                elif t < 2.0 ** -4:
                    damping = min(max(damping * 4.0, 1e-2), 10.0)
            # Deliver a dynamically exact trajectory whenever possible.
            try:
                X = self._rollout(x0, U, x_r_traj, a_hat)
            except (DomainError, SingularityError):
                pass
            _, violation = self._penalties(X, x_r_traj, e_bar, mu)
            if violation <= opts.violation_tol:
                break
            mu = [m_i * opts.escalation_factor for m_i in mu]
            damping = 0.0

        if A_lin is None:
            c = self._defects(X, U, x_r_traj, a_hat)
            _, _, _, _, _, _, A_lin, B_lin = self._build_qp(
                X, U, c, x_r_traj, e_bar, a_hat, mu)
        kkt = self._kkt_residual(X, U, x_r_traj, e_bar, A_lin, B_lin, mu)
        _, violation = self._penalties(X, x_r_traj, e_bar, mu)
        defect_max = float(np.abs(self._defects(X, U, x_r_traj, a_hat)).max())

        if converged and violation <= opts.violation_tol and defect_max <= 1e-6:
            status = STATUS_SOLVED
        elif converged:
            status = STATUS_INFEASIBLE
        else:
            status = STATUS_MAX_ITER
        return PlanResult(
            x_d_traj=X, u_d_traj=U,
            cost=self._tracking_cost(X, U, x_r_traj),
            status=status, kkt_residual=kkt,
            iterations=total_iters,
            wall_time=time.perf_counter() - start,
            violation=float(violation))


def solve(x0, x_r_traj, a_snapshot, e_bar_traj, cfg: MpcConfig, warm=None,
          *, model=None, params=None) -> PlanResult:
    """One receding-horizon solve; see Planner.solve for the semantics."""
    return Planner(cfg, params, model).solve(x0, x_r_traj, a_snapshot, e_bar_traj, warm)
