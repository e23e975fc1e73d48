"""Online coefficient estimation and the certified error-bound calculators.

The continuous adaptation law

    a_hat' = -sigma a_hat + P phi^T R^-1 (y - phi a_hat) + P (B B+ varphi)^T M e
    P'     = -2 sigma P + Q - P phi^T R^-1 phi P

runs at 100 Hz as a two-step Kalman filter: exact exponential decay of
the sigma terms and first-order hold for Q in the predict step, a Joseph
-form measurement update with per-step covariance R/dt, then the
tracking-error coupling applied with the predicted covariance.  The
measured discrepancy y comes from low-pass-filtered finite differences
of velocity against the nominal thrust model.

The same module owns the chance-constrained machinery: a from-scratch
chi-square inverse CDF, the uncertainty-set radius, the decay rate
alpha_bar certified by the block LMI, the disturbance envelope D_bar,
and the tube radius e_bar(t).  D_bar is reported in two readings: the
printed corollary formula, and a strictly dominating variant used where
a test has to stand behind "is an upper bound" (the printed form mixes
min/max eigenvalues of P in a way that a direct sup can exceed).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .cbac import embed_basis
from .errors import DomainError, InsufficientHistoryError

P_MIN = 1.0e-8


@dataclass
class AdaptConfig:
    sigma: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(3))
    R_meas: np.ndarray = field(default_factory=lambda: 0.05 * np.eye(3))
    delta: float = 0.05
    p_min: float = P_MIN
    P0: np.ndarray | None = None   # reset target on covariance collapse

    def __post_init__(self) -> None:
        self.Q = np.asarray(self.Q, dtype=float)
        self.R_meas = np.asarray(self.R_meas, dtype=float)
        if not (0.0 < self.delta < 1.0):
            raise DomainError("delta must lie in (0, 1)")
        if self.sigma < 0.0:
            raise DomainError("sigma must be nonnegative")
        for name, Mx in (("Q", self.Q), ("R_meas", self.R_meas)):
            if np.linalg.eigvalsh(0.5 * (Mx + Mx.T)).min() <= 0.0:
                raise DomainError(f"{name} must be SPD")

    @property
    def k(self) -> int:
        return self.Q.shape[0]


@dataclass
class AdaptState:
    a_hat: np.ndarray
    P: np.ndarray

    def __post_init__(self) -> None:
        self.a_hat = np.asarray(self.a_hat, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if not np.all(np.isfinite(self.a_hat)):
            raise DomainError("a_hat must be finite")

    def copy(self) -> "AdaptState":
        return AdaptState(self.a_hat.copy(), self.P.copy())


def measure_residual(x_hist, u_hist, params, dt: float = 0.01,
                     cutoff_hz: float = 10.0) -> np.ndarray:
    """Filtered velocity-residual measurement from recent full/reduced states.

    x_hist holds the last few states (rows, oldest first) and u_hist the
    controls applied over the preceding intervals (u_hist[i] acted on
    [i, i+1]).  The raw residual per interval is the finite-difference
    acceleration minus the nominal thrust model, with the thrust axis
    averaged over the interval endpoints; a first-order low pass at
    cutoff_hz smooths the chain and its final value is returned.
    """
    x_hist = np.atleast_2d(np.asarray(x_hist, dtype=float))
    u_hist = np.atleast_2d(np.asarray(u_hist, dtype=float))
    if len(x_hist) < 3:
        raise InsufficientHistoryError("need at least 3 state samples")
    if len(u_hist) < len(x_hist) - 1:
        raise InsufficientHistoryError("need a control per state interval")
    beta = math.exp(-2.0 * math.pi * cutoff_hz * dt)
    g_vec = np.array([0.0, 0.0, params.gravity])
    y = None
    for i in range(len(x_hist) - 1):
        v0, v1 = x_hist[i][dynamics.V_SLC], x_hist[i + 1][dynamics.V_SLC]
        axis = 0.5 * (dynamics.thrust_axis(x_hist[i][dynamics.ETA_SLC])
                      + dynamics.thrust_axis(x_hist[i + 1][dynamics.ETA_SLC]))
        y_raw = (v1 - v0) / dt - axis * (u_hist[i][0] / params.mass) + g_vec
        y = y_raw if y is None else beta * y + (1.0 - beta) * y_raw
    return y


class ResidualFilter:
    """Streaming form of measure_residual for the 100 Hz loop."""

    def __init__(self, params, cutoff_hz: float = 10.0):
        self.params = params
        self.cutoff_hz = cutoff_hz
        self._prev = None
        self._y = None
        self._count = 0

    def update(self, x, f_u: float, dt: float):
        """Feed the state at the end of an interval on which f_u acted."""
        x = np.asarray(x, dtype=float)
        v, eta = x[dynamics.V_SLC].copy(), x[dynamics.ETA_SLC].copy()
        self._count += 1
        if self._prev is not None:
            v0, eta0 = self._prev
            axis = 0.5 * (dynamics.thrust_axis(eta0) + dynamics.thrust_axis(eta))
            y_raw = ((v - v0) / dt - axis * (f_u / self.params.mass)
                     + np.array([0.0, 0.0, self.params.gravity]))
            beta = math.exp(-2.0 * math.pi * self.cutoff_hz * dt)
            self._y = y_raw if self._y is None else beta * self._y + (1.0 - beta) * y_raw
        self._prev = (v, eta)
        return self.value if self.ready else None

    @property
    def ready(self) -> bool:
        return self._count >= 3

    @property
    def value(self) -> np.ndarray:
        if not self.ready:
            raise InsufficientHistoryError("need at least 3 state samples")
        return self._y.copy()


def _spd_guard(P: np.ndarray, cfg: AdaptConfig) -> np.ndarray:
    """Symmetrize; on eigenvalue collapse reset to P0 per the config."""
    P = 0.5 * (P + P.T)
    lam = np.linalg.eigvalsh(P)
    if lam.min() < cfg.p_min:
        P0 = cfg.P0 if cfg.P0 is not None else np.eye(P.shape[0])
        return np.asarray(P0, dtype=float).copy()
    return P


def adapt_step(state: AdaptState, phi, y, e, M, B, B_dagger, varphi,
               cfg: AdaptConfig, dt: float) -> AdaptState:
    """One 100 Hz estimator step: decay-predict, Kalman update, tracking term.

    phi is the (3, k) basis at the measured state; varphi the (3, k)
    basis difference driving the control term; y the filtered residual
    measurement (pass None during filter warmup to skip the update).
    """
    a = np.asarray(state.a_hat, dtype=float)
    P = np.asarray(state.P, dtype=float)
    k = a.shape[0]

    decay = math.exp(-cfg.sigma * dt)
    a_pred = decay * a
    P_pred = decay * decay * P + cfg.Q * dt

    a_new = a_pred
    P_new = P_pred
    if y is not None and phi is not None:
        phi = np.asarray(phi, dtype=float)
        Rd = cfg.R_meas / dt
        S = phi @ P_pred @ phi.T + Rd
        K_g = P_pred @ phi.T @ np.linalg.inv(S)
        a_new = a_pred + K_g @ (np.asarray(y, dtype=float) - phi @ a_pred)
        IKH = np.eye(k) - K_g @ phi
        P_new = IKH @ P_pred @ IKH.T + K_g @ Rd @ K_g.T

    if varphi is not None and e is not None and M is not None:
        proj = B @ (B_dagger @ embed_basis(np.asarray(varphi, dtype=float)))
        a_new = a_new + dt * (P_pred @ (proj.T @ (M @ np.asarray(e, dtype=float))))

    return AdaptState(a_new, _spd_guard(P_new, cfg))


# --- chi-square inverse CDF, built on the regularized incomplete gamma ---

def _gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if x < 0.0 or a <= 0.0:
        raise DomainError("gamma_p requires x >= 0, a > 0")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        # Series representation.
        term = 1.0 / a
        total = term
        n = a
        for _ in range(500):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * 1.0e-16:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # Continued fraction for Q(a, x), modified Lentz.
    tiny = 1.0e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1.0e-16:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def chi2_icdf(k: int, p: float) -> float:
    """Chi-square quantile via bracketing bisection plus Newton polish."""
    if not (0.0 < p < 1.0):
        raise DomainError("probability must lie in (0, 1)")
    if k < 1:
        raise DomainError("degrees of freedom must be >= 1")
    a = 0.5 * k
    cdf = lambda x: _gamma_p(a, 0.5 * x)
    lo, hi = 0.0, float(k)
    while cdf(hi) < p:
        hi *= 2.0
        if hi > 1.0e8:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1.0e-12 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    # Newton polish on CDF(x) - p; density of chi2_k.
    for _ in range(8):
        pdf = math.exp((a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0)
                       - math.lgamma(a)) if x > 0 else 0.0
        if pdf <= 0.0:
            break
        step = (cdf(x) - p) / pdf
        x_new = x - step
        if x_new <= lo or x_new >= hi:
            break
        x = x_new
        if abs(step) < 1.0e-12 * max(1.0, x):
            break
    return x


def uncertainty_set_radius(state: AdaptState, delta: float):
    """(chi-square threshold, Euclidean radius) of the coefficient set.

    The set is {a : ||a_hat - a||_P^2 <= chi2_k(1 - delta)} with P as the
    printed weight, so the Euclidean radius is sqrt(chi2 / lambda_min(P)).
    """
    k = state.a_hat.shape[0]
    threshold = chi2_icdf(k, 1.0 - delta)
    lam_min = float(np.linalg.eigvalsh(state.P).min())
    if lam_min <= 0.0:
        raise DomainError("P must be SPD")
    return threshold, math.sqrt(threshold / lam_min)


@dataclass
class EnvelopeBounds:
    """Sup bounds over the flight envelope feeding the D_bar evaluation."""

    d_bar: float         # unmodeled disturbance, m/s^2 scale
    phi_bar: float       # sup ||phi||
    b_bar: float         # lambda_max(I - B B+)
    eps_bar: float       # measurement-noise sup
    varphi_bar: float = 0.0   # sup ||varphi||; falls back to 2 phi_bar

    def __post_init__(self) -> None:
        if self.varphi_bar == 0.0:
            self.varphi_bar = 2.0 * self.phi_bar


@dataclass
class DisturbanceBound:
    printed: float
    printed_alt: float   # sigma term with 1/lambda_max(P) (the likelier intent)
    strict: float        # dominates a direct sup of the driving term
    a_sup: float
    terms: dict


def compute_D_bar(state: AdaptState, bounds: EnvelopeBounds, metric_info: dict,
                  cfg: AdaptConfig, p_drift: float | None = None,
                  drift_threshold: float = 1.0e-2) -> DisturbanceBound:
    """Evaluate the steady-state disturbance envelope D_bar.

    metric_info needs omega_chi and (for the strict variant) lambda_max_M.
    p_drift, when given, is the recent |d lambda_min(P) / dt|; exceeding
    drift_threshold warns that the steady-state assumption is shaky.
    """
    if p_drift is not None and p_drift > drift_threshold:
        warnings.warn("covariance still drifting; D_bar assumes steady state",
                      RuntimeWarning, stacklevel=2)
    lam = np.linalg.eigvalsh(state.P)
    lam_min_P, lam_max_P = float(lam.min()), float(lam.max())
    threshold, radius = uncertainty_set_radius(state, cfg.delta)
    a_sup = float(np.linalg.norm(state.a_hat)) + radius

    omega_chi = float(metric_info["omega_chi"])
    lam_R = np.linalg.eigvalsh(cfg.R_meas)
    lam_max_R, lam_min_R = float(lam_R.max()), float(lam_R.min())
    sigma = cfg.sigma

    printed = (bounds.d_bar / omega_chi
               + bounds.phi_bar * bounds.eps_bar * lam_max_R
               + (bounds.b_bar * bounds.phi_bar / omega_chi + lam_min_P * sigma) * a_sup)
    printed_alt = (bounds.d_bar / omega_chi
                   + bounds.phi_bar * bounds.eps_bar * lam_max_R
                   + (bounds.b_bar * bounds.phi_bar / omega_chi
                      + sigma / lam_max_P) * a_sup)

    # Strict reading: norm of the stacked driving vector, each block bounded
    # by worst-case eigenvalues.  Dominates the Monte-Carlo sup of D.
    lam_max_M = float(metric_info.get("lambda_max_M", omega_chi))
    top = lam_max_M * (bounds.d_bar + bounds.b_bar * bounds.varphi_bar * a_sup)
    bottom = (bounds.phi_bar * bounds.eps_bar / lam_min_R
              + sigma * a_sup / lam_min_P)
    strict = math.hypot(top, bottom)

    return DisturbanceBound(
        printed=printed,
        printed_alt=printed_alt,
        strict=strict,
        a_sup=a_sup,
        terms={
            "d_term": bounds.d_bar / omega_chi,
            "noise_term": bounds.phi_bar * bounds.eps_bar * lam_max_R,
            "a_term_printed": (bounds.b_bar * bounds.phi_bar / omega_chi
                               + lam_min_P * sigma) * a_sup,
            "top_strict": top,
            "bottom_strict": bottom,
            "chi2": threshold,
        },
    )


@dataclass
class ErrorBoundParams:
    alpha_bar: float
    lambda_M_ratio: float    # sqrt(lambda_max(MM) / lambda_min(MM))
    lambda_min_M: float      # lambda_min of the composite block metric
    D_bar: float
    d_bar: float = 0.0
    e0: float = 0.0
    a_tilde0: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha_bar <= 0.0 or self.lambda_min_M <= 0.0:
            raise DomainError("alpha_bar and lambda_min_M must be positive")


def error_bound(t, params: ErrorBoundParams):
    """Tube radius e_bar(t): decaying initial ball plus saturating drive term."""
    t = np.asarray(t, dtype=float)
    decay = np.exp(-params.alpha_bar * t)
    initial = params.lambda_M_ratio * (params.e0 + params.a_tilde0)
    steady = params.D_bar / (params.alpha_bar * params.lambda_min_M)
    return decay * initial + (1.0 - decay) * steady


def composite_metric_eigs(M: np.ndarray, P: np.ndarray):
    """(lambda_min, lambda_max) of blkdiag(M, P^-1)."""
    lam_M = np.linalg.eigvalsh(np.asarray(M, dtype=float))
    lam_P = np.linalg.eigvalsh(np.asarray(P, dtype=float))
    return (min(lam_M.min(), 1.0 / lam_P.max()),
            max(lam_M.max(), 1.0 / lam_P.min()))


def _lmi_matrix(alpha_bar, alpha, M, P_inv, QPterm, phi_emb, phi_v, R_inv):
    n = M.shape[0]
    k = P_inv.shape[0]
    top_left = 2.0 * (alpha - alpha_bar) * M
    cross = M @ phi_emb
    bottom = QPterm + phi_v.T @ R_inv @ phi_v - 2.0 * alpha_bar * P_inv
    G = np.zeros((n + k, n + k))
    G[:n, :n] = top_left
    G[:n, n:] = cross
    G[n:, :n] = cross.T
    G[n:, n:] = bottom
    return G


def compute_alpha_bar(M, P, phi, Q, R_meas, alpha: float,
                      tol: float = 1.0e-4):
    """Largest decay rate certified by the stability block LMI.

    The printed condition pairs the contraction block 2(alpha - abar)M
    against the estimator block P^-1 Q P^-1 + phi^T R^-1 phi - 2 abar
    P^-1, coupled by M phi; the matrix as written is not symmetric, so
    the eigenvalue test runs on its symmetrization.  phi is the (3, k)
    basis, embedded into velocity rows for the coupling.  Returns
    (alpha_bar, feasible); infeasibility at alpha_bar -> 0 is flagged,
    not raised.
    """
    M = np.asarray(M, dtype=float)
    P = np.asarray(P, dtype=float)
    phi_v = np.asarray(phi, dtype=float)
    phi_emb = embed_basis(phi_v)
    P_inv = np.linalg.inv(P)
    QPterm = P_inv @ np.asarray(Q, dtype=float) @ P_inv
    R_inv = np.linalg.inv(np.asarray(R_meas, dtype=float))

    def feasible(ab):
        G = _lmi_matrix(ab, alpha, M, P_inv, QPterm, phi_emb, phi_v, R_inv)
        return np.linalg.eigvalsh(G).min() >= -1.0e-10

    if not feasible(0.0):
        return 0.0, False
    lo, hi = 0.0, alpha
    if feasible(hi):
        return hi, True
    while hi - lo > tol * max(alpha, 1.0):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo, True
