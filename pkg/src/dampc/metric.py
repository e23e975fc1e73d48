"""Contraction metric synthesis over a grid of target operating points.

At each grid node (phi_d, theta_d, f_u) the factorized dynamics give a
constant pair (A, B).  With a constant-per-node candidate the metric
derivative term drops and the synthesis reduces to the SDP

    min omega_chi  over  W_bar = W_bar^T, nu >= 0
    s.t.  A W_bar + W_bar A^T - 2 nu B R^-1 B^T  <=  -2 alpha W_bar
          I <= W_bar <= omega_chi I,   nu <= nu_max

solved pointwise.  An extra cap nu <= nu_max keeps the implied feedback
gain realizable in a discrete loop; without it the objective is
indifferent to nu and solvers push it to ~1e6.  The solver is pluggable;
acceptance of a field rests on the eigenvalue certificate

    lambda_max(A W_bar + W_bar A^T - 2 nu B R^-1 B^T + 2 alpha W_bar) <= tol

recomputed in plain numpy, never on solver status.

The metric is M = nu W_bar^{-1} (so W_bar = nu W with W = M^{-1}) and
the tracking gain is K(x, x_d) = R^-1 B(x)^T M(x_d, u_d).  Per-node
alpha line searches pick the largest rate on a geometric grid; the field
is re-solved at the global minimum so one alpha certifies every node.
Queries interpolate W_bar and nu multilinearly (convex combinations of
SPD matrices stay SPD) and clamp out-of-range targets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .artifacts import config_hash, load_arrays, save_arrays
from .dynamics import ETA_SLC, VehicleParams
from .errors import ArtifactError, DomainError

SCHEMA = "metric-field"
SCHEMA_VERSION = 1

CERT_TOL = 1.0e-8


@dataclass
class MetricConfig:
    phi_points: int = 9
    theta_points: int = 9
    fu_points: int = 7
    phi_max: float = 0.4
    theta_max: float = 0.4
    fu_span: tuple = (0.5, 1.5)
    alpha_min: float = 0.2
    alpha_ratio: float = 1.25
    alpha_max: float = 2.0
    omega_chi_max: float = 100.0
    nu_max: float = 100.0
    margin: float = 1.0e-5
    ctrl_weight: np.ndarray = field(default_factory=lambda: np.diag([1.0, 5.0, 5.0, 5.0]))
    solver: str = "CLARABEL"
    n_jobs: int = 4

    def __post_init__(self) -> None:
        self.ctrl_weight = np.asarray(self.ctrl_weight, dtype=float)
        if self.phi_points < 2 or self.theta_points < 2 or self.fu_points < 2:
            raise DomainError("metric grid needs at least two points per axis")
        if self.alpha_ratio <= 1.0:
            raise DomainError("alpha_ratio must exceed 1")

    def alpha_grid(self) -> np.ndarray:
        vals = [self.alpha_min]
        while vals[-1] * self.alpha_ratio <= self.alpha_max * (1.0 + 1e-12):
            vals.append(vals[-1] * self.alpha_ratio)
        return np.array(vals)

    def describe(self) -> dict:
        return {
            "phi_points": self.phi_points,
            "theta_points": self.theta_points,
            "fu_points": self.fu_points,
            "phi_max": self.phi_max,
            "theta_max": self.theta_max,
            "fu_span": list(self.fu_span),
            "alpha_min": self.alpha_min,
            "alpha_ratio": self.alpha_ratio,
            "alpha_max": self.alpha_max,
            "omega_chi_max": self.omega_chi_max,
            "nu_max": self.nu_max,
            "margin": self.margin,
            "ctrl_weight": [list(r) for r in self.ctrl_weight],
            "solver": self.solver,
        }


@dataclass
class MetricSolveResult:
    W_bar: np.ndarray
    nu: float
    alpha: float
    omega_chi: float
    status: str
    margin: float   # largest eigenvalue of the LMI residual; <= 0 when feasible

    @property
    def feasible(self) -> bool:
        return self.W_bar is not None and self.margin <= CERT_TOL


def node_system(phi_d: float, theta_d: float, f_u: float, params: VehicleParams):
    """(A, B) of the factorized reduced model at a target operating point."""
    eta_d = np.array([phi_d, theta_d, 0.0])
    x_d = np.zeros(9)
    x_d[ETA_SLC] = eta_d
    u_d = np.array([f_u, 0.0, 0.0, 0.0])
    A, _ = dynamics.sdc_matrix(x_d, x_d, u_d, params)
    B = dynamics.reduced_B(x_d, params)
    return A, B


def certificate_eig(A, B, W_bar, nu, alpha, ctrl_weight) -> float:
    """Largest eigenvalue of the contraction LMI residual (feasible <= 0)."""
    R_inv = np.linalg.inv(ctrl_weight)
    expr = A @ W_bar + W_bar @ A.T - 2.0 * nu * (B @ R_inv @ B.T) + 2.0 * alpha * W_bar
    return float(np.linalg.eigvalsh(0.5 * (expr + expr.T)).max())


class _CompiledNodeProblem:
    """Reusable parametrized SDP shared across grid nodes."""

    def __init__(self, cfg: MetricConfig):
        import cvxpy as cp

        self._cp = cp
        n = 9
        self.W = cp.Variable((n, n), symmetric=True)
        self.nu = cp.Variable(nonneg=True)
        self.chi = cp.Variable(nonneg=True)
        self.A_p = cp.Parameter((n, n))
        self.BRB_p = cp.Parameter((n, n), PSD=True)
        self.alpha_p = cp.Parameter(nonneg=True)
        lmi = (self.A_p @ self.W + self.W @ self.A_p.T
               - 2.0 * self.nu * self.BRB_p + 2.0 * self.alpha_p * self.W)
        cons = [
            self.W >> np.eye(n),
            self.W << self.chi * np.eye(n),
            lmi << -cfg.margin * np.eye(n),
            self.nu <= cfg.nu_max,
            self.chi <= cfg.omega_chi_max,
        ]
        self.problem = cp.Problem(cp.Minimize(self.chi), cons)
        self.solver = cfg.solver

    def solve(self, A, BRB, alpha):
        self.A_p.value = A
        self.BRB_p.value = BRB
        self.alpha_p.value = alpha
        kwargs = {}
        if self.solver == "CLARABEL":
            kwargs = dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
        try:
            # The "inaccurate solution" chatter is expected at probed
            # alphas near the feasibility edge; the numpy certificate is
            # the arbiter, not solver self-assessment.
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                self.problem.solve(solver=self.solver, **kwargs)
        except self._cp.error.SolverError:
            return None, None, "solver-error"
        if self.W.value is None:
            return None, None, str(self.problem.status)
        W = 0.5 * (self.W.value + self.W.value.T)
        return W, float(self.nu.value), str(self.problem.status)


_PROBLEM_CACHE: dict = {}


def _compiled_problem(cfg: MetricConfig) -> _CompiledNodeProblem:
    key = (cfg.margin, cfg.nu_max, cfg.omega_chi_max, cfg.solver)
    prob = _PROBLEM_CACHE.get(key)
    if prob is None:
        prob = _CompiledNodeProblem(cfg)
        _PROBLEM_CACHE[key] = prob
    return prob


def _solve_node_once(A, B, BRB, alpha, cfg: MetricConfig) -> MetricSolveResult:
    W, nu, status = _compiled_problem(cfg).solve(A, BRB, alpha)
    if W is None:
        return MetricSolveResult(None, np.nan, alpha, np.inf, status, np.inf)
    eigs = np.linalg.eigvalsh(W)
    cert = certificate_eig(A, B, W, nu, alpha, cfg.ctrl_weight)
    omega_chi = float(eigs[-1] / eigs[0])
    # Lower bound I <= W_bar can be violated by solver tolerance; reject only
    # meaningful violations, the certificate is what acceptance checks.
    if eigs[0] < 1.0 - 1e-6:
        return MetricSolveResult(None, np.nan, alpha, np.inf, "lower-bound-violated", np.inf)
    return MetricSolveResult(W, nu, alpha, omega_chi, status, cert)


def solve_metric_point(A, B, alpha, cfg: MetricConfig) -> MetricSolveResult:
    """Robust node solve at a fixed contraction rate.

    The conditioning objective squeezes W_bar until the contraction LMI
    blocks it, so optima ride the LMI boundary and an inaccurate solve
    can land a hair outside the certificate.  Borderline outcomes are
    retried at stricter internal margins, which pushes the returned
    point into the interior; the certificate itself never loosens.  A
    solve the solver cleanly proves infeasible is not retried.
    """
    R_inv = np.linalg.inv(cfg.ctrl_weight)
    BRB = B @ R_inv @ B.T
    BRB = 0.5 * (BRB + BRB.T)
    result = _solve_node_once(A, B, BRB, alpha, cfg)
    factor = 10.0
    while not result.feasible and result.status != "infeasible" and factor <= 1.0e3:
        strict = replace(cfg, margin=cfg.margin * factor)
        retry = _solve_node_once(A, B, BRB, alpha, strict)
        if retry.feasible:
            return retry
        factor *= 10.0
    return result


def _search_alpha(A, B, cfg: MetricConfig) -> MetricSolveResult | None:
    alphas = cfg.alpha_grid()
    results: dict[int, MetricSolveResult] = {}

    def feasible(idx: int) -> bool:
        if idx not in results:
            results[idx] = solve_metric_point(A, B, alphas[idx], cfg)
        return results[idx].feasible

    if not feasible(0):
        return None
    lo, hi = 0, len(alphas) - 1
    if feasible(hi):
        return results[hi]
    # Invariant: lo feasible, hi infeasible.
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return results[lo]


def line_search_alpha(A, B, cfg: MetricConfig) -> tuple[float, MetricSolveResult]:
    """Largest alpha on the geometric grid with a feasible node solve.

    Feasibility is monotone in alpha, so a bisection over grid indices
    finds the boundary with O(log n) solves.
    """
    res = _search_alpha(A, B, cfg)
    if res is None:
        raise DomainError(
            f"node SDP infeasible even at alpha = {cfg.alpha_min}")
    return res.alpha, res


def _grid_axes(cfg: MetricConfig, params: VehicleParams):
    phis = np.linspace(-cfg.phi_max, cfg.phi_max, cfg.phi_points)
    thetas = np.linspace(-cfg.theta_max, cfg.theta_max, cfg.theta_points)
    hover = params.hover_thrust
    fus = np.linspace(cfg.fu_span[0] * hover, cfg.fu_span[1] * hover, cfg.fu_points)
    return phis, thetas, fus


def _node_list(cfg: MetricConfig, params: VehicleParams):
    phis, thetas, fus = _grid_axes(cfg, params)
    nodes = [(p, t, f) for p in phis for t in thetas for f in fus]
    return phis, thetas, fus, nodes


def build_metric_field(params: VehicleParams, cfg: MetricConfig, progress=None) -> "MetricField":
    """Per-node alpha line search, then a re-solve of all nodes at the
    global minimum alpha so a single rate certifies the whole field."""
    from joblib import Parallel, delayed

    phis, thetas, fus, nodes = _node_list(cfg, params)
    systems = [node_system(p, t, f, params) for (p, t, f) in nodes]

    par = Parallel(n_jobs=cfg.n_jobs, prefer="processes")
    stage1 = par(delayed(_search_alpha)(A, B, cfg) for A, B in systems)
    bad = [nodes[i] for i, r in enumerate(stage1) if r is None]
    if bad:
        raise ArtifactError(
            f"metric synthesis infeasible at alpha_min for {len(bad)} nodes, first {bad[0]}")
    alpha_global = min(r.alpha for r in stage1)
    if progress:
        progress(f"line search done, global alpha = {alpha_global:.4f}")

    stage2 = par(delayed(solve_metric_point)(A, B, alpha_global, cfg) for A, B in systems)
    infeas = [nodes[i] for i, r in enumerate(stage2) if not r.feasible]
    if infeas:
        raise ArtifactError(
            f"re-solve at global alpha failed for {len(infeas)} nodes, first {infeas[0]}")

    shape = (cfg.phi_points, cfg.theta_points, cfg.fu_points)
    W_bar = np.empty(shape + (9, 9))
    nu = np.empty(shape)
    omega_chi = np.empty(shape)
    idx = 0
    for i in range(shape[0]):
        for j in range(shape[1]):
            for l in range(shape[2]):
                W_bar[i, j, l] = stage2[idx].W_bar
                nu[i, j, l] = stage2[idx].nu
                omega_chi[i, j, l] = stage2[idx].omega_chi
                idx += 1
    meta = {
        "alpha": alpha_global,
        "config": cfg.describe(),
        "mass": params.mass,
        "gravity": params.gravity,
    }
    meta["hash"] = config_hash(meta)
    return MetricField(phis, thetas, fus, W_bar, nu, alpha_global, cfg.ctrl_weight, meta)


class MetricField:
    """Synthesized metric over the target grid with multilinear queries."""

    def __init__(self, phi_axis, theta_axis, fu_axis, W_bar, nu, alpha, ctrl_weight, meta):
        self.phi_axis = np.asarray(phi_axis, dtype=float)
        self.theta_axis = np.asarray(theta_axis, dtype=float)
        self.fu_axis = np.asarray(fu_axis, dtype=float)
        self.W_bar = np.asarray(W_bar, dtype=float)
        self.nu = np.asarray(nu, dtype=float)
        self.alpha = float(alpha)
        self.ctrl_weight = np.asarray(ctrl_weight, dtype=float)
        self.ctrl_weight_inv = np.linalg.inv(self.ctrl_weight)
        self.meta = meta
        self.clamp_count = 0
        # Field-wide eigenvalue envelope of M = nu inv(W_bar) for bound terms.
        lam_min = np.inf
        lam_max = -np.inf
        omega_chi = -np.inf
        flat_W = self.W_bar.reshape(-1, 9, 9)
        flat_nu = self.nu.reshape(-1)
        for W, n in zip(flat_W, flat_nu):
            eigs = np.linalg.eigvalsh(W)
            lam_min = min(lam_min, n / eigs[-1])
            lam_max = max(lam_max, n / eigs[0])
            omega_chi = max(omega_chi, eigs[-1] / eigs[0])
        self.lambda_min_M = float(lam_min)
        self.lambda_max_M = float(lam_max)
        self.omega_chi = float(omega_chi)

    def _axis_weights(self, axis, value):
        if value <= axis[0]:
            return 0, 0.0, value < axis[0]
        if value >= axis[-1]:
            return len(axis) - 2, 1.0, value > axis[-1]
        idx = int(np.searchsorted(axis, value) - 1)
        w = (value - axis[idx]) / (axis[idx + 1] - axis[idx])
        return idx, w, False

    def interpolate(self, phi_d: float, theta_d: float, f_u: float):
        """Trilinear (W_bar, nu) at a target point; clamps outside the grid."""
        i, wi, ci = self._axis_weights(self.phi_axis, phi_d)
        j, wj, cj = self._axis_weights(self.theta_axis, theta_d)
        l, wl, cl = self._axis_weights(self.fu_axis, f_u)
        if ci or cj or cl:
            self.clamp_count += 1
        W = np.zeros((9, 9))
        nu = 0.0
        for di, fi in ((0, 1.0 - wi), (1, wi)):
            for dj, fj in ((0, 1.0 - wj), (1, wj)):
                for dl, fl in ((0, 1.0 - wl), (1, wl)):
                    w = fi * fj * fl
                    if w == 0.0:
                        continue
                    W += w * self.W_bar[i + di, j + dj, l + dl]
                    nu += w * self.nu[i + di, j + dj, l + dl]
        return W, nu

    def metric_at(self, x_d: np.ndarray, u_d: np.ndarray) -> np.ndarray:
        """M(x_d, u_d) = nu W_bar^{-1} at the interpolated node."""
        eta_d = np.asarray(x_d, dtype=float)[ETA_SLC]
        W, nu = self.interpolate(eta_d[0], eta_d[1], float(u_d[0]))
        return nu * np.linalg.inv(W)

    def gain(self, x: np.ndarray, x_d: np.ndarray, u_d: np.ndarray, params: VehicleParams) -> np.ndarray:
        """Tracking gain K = R^-1 B(x)^T M(x_d, u_d)."""
        M = self.metric_at(x_d, u_d)
        B = dynamics.reduced_B(x, params)
        return self.ctrl_weight_inv @ B.T @ M

    def save(self, path) -> None:
        save_arrays(
            path,
            SCHEMA,
            SCHEMA_VERSION,
            dict(self.meta, alpha=self.alpha),
            {
                "phi_axis": self.phi_axis,
                "theta_axis": self.theta_axis,
                "fu_axis": self.fu_axis,
                "W_bar": self.W_bar,
                "nu": self.nu,
                "ctrl_weight": self.ctrl_weight,
            },
        )

    def params_from_meta(self) -> VehicleParams:
        """Vehicle the field was synthesized for, as far as the node
        systems are concerned (they depend only on mass and gravity)."""
        return VehicleParams(mass=self.meta["mass"], gravity=self.meta["gravity"])

    @classmethod
    def load(cls, path, recheck: bool = True) -> "MetricField":
        meta, arr = load_arrays(path, SCHEMA, SCHEMA_VERSION)
        field = cls(
            arr["phi_axis"], arr["theta_axis"], arr["fu_axis"],
            arr["W_bar"], arr["nu"], meta["alpha"], arr["ctrl_weight"], meta,
        )
        if recheck:
            report = field.verify(field.params_from_meta())
            if not report["ok"]:
                raise ArtifactError(
                    f"stored metric fails its own certificate at "
                    f"{report['failures']} of {report['nodes']} nodes "
                    f"(worst margin {report['worst_margin']:.3e})")
        return field

    def verify(self, params: VehicleParams, tol: float = CERT_TOL) -> dict:
        """Recompute every node certificate; independent of any solver state.

        Besides the contraction LMI this rechecks the eigenvalue box
        I <= W_bar <= omega_chi I, with omega_chi the largest eigenvalue
        seen across the field (the per-node SDP objective at optimum).
        The lower bound tolerates the SDP solver's feasibility accuracy.
        """
        report = {
            "nodes": 0,
            "worst_margin": -np.inf,
            "alpha": self.alpha,
            "failures": 0,
            "max_recon_err": 0.0,
            "lambda_w_min": np.inf,
            "lambda_w_max": -np.inf,
        }
        for i, p in enumerate(self.phi_axis):
            for j, t in enumerate(self.theta_axis):
                for l, f in enumerate(self.fu_axis):
                    A, B = node_system(p, t, f, params)
                    W = self.W_bar[i, j, l]
                    nu = self.nu[i, j, l]
                    cert = certificate_eig(A, B, W, nu, self.alpha, self.ctrl_weight)
                    report["nodes"] += 1
                    report["worst_margin"] = max(report["worst_margin"], cert)
                    if cert > tol:
                        report["failures"] += 1
                    eigs = np.linalg.eigvalsh(W)
                    report["lambda_w_min"] = min(report["lambda_w_min"], eigs[0])
                    report["lambda_w_max"] = max(report["lambda_w_max"], eigs[-1])
                    # Scaling consistency: W_bar must equal nu M^{-1}.
                    M = nu * np.linalg.inv(W)
                    recon = nu * np.linalg.inv(M)
                    err = np.abs(recon - W).max() / max(1.0, np.abs(W).max())
                    report["max_recon_err"] = max(report["max_recon_err"], err)
        cap = self.meta.get("config", {}).get("omega_chi_max", np.inf)
        report["omega_chi"] = report["lambda_w_max"]
        report["bounds_ok"] = bool(report["lambda_w_min"] >= 1.0 - 1e-6
                                   and report["lambda_w_max"] <= cap + 1e-6)
        report["ok"] = report["failures"] == 0 and report["bounds_ok"]
        return report


def gain(field: MetricField, x, x_d, u_d, params: VehicleParams | None = None) -> np.ndarray:
    """Tracking gain K = R^-1 B(x)^T M(x_d, u_d) from a synthesized field."""
    if params is None:
        params = field.params_from_meta()
    return field.gain(x, x_d, u_d, params)
