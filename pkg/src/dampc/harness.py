"""Closed-loop flight harness: scenarios, the rate-layered loop, run logs.

A run closes three loops around the rigid-body simulation:

    1 kHz   plant integration (RK4, true disturbances) and the attitude
            autopilot that turns reduced commands into thrust/torque
  100 Hz    tracking controller, residual filter, coefficient estimator
    5 Hz    receding-horizon replanning; between solves the destination
            states and inputs interpolate linearly along the active plan,
            so a plan is never consumed more than 200 ms after it was cut

Three controller variants isolate where closed-loop improvement comes from:

    nominal-mpc       the planner ignores the learned basis and the plan
                      is flown open loop (u = u_d); replanning from the
                      measured state is the only position feedback
    mpc-plus-mlcbac   planner unchanged; a 100 Hz tracking loop adds the
                      metric-gain correction and subtracts the learned
                      disturbance with online-adapted coefficients
    full              the planner also consumes the coefficient snapshot

Runs persist as a CSV of 100 Hz records plus a JSON summary at
<root>/<scenario>/<variant>/<seed>/.  Every summary statistic is
recomputable from the records; wall-clock timing lives in a separate
"timing" block, the only part expected to differ between repeat runs.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cbac, dynamics, mpc
from .adaptation import (
    AdaptConfig,
    AdaptState,
    EnvelopeBounds,
    ErrorBoundParams,
    ResidualFilter,
    adapt_step,
    compute_alpha_bar,
    compute_D_bar,
    error_bound,
    uncertainty_set_radius,
)
from .disturbances import EnvConditions, make_disturbance, total_disturbance
from .dynamics import ETA_SLC, P_SLC, V_SLC, VehicleParams
from .errors import DomainError

VARIANTS = ("nominal-mpc", "mpc-plus-mlcbac", "full")

TOUCHDOWN_HEIGHT = 0.02

STATE12_NAMES = ("px", "py", "pz", "vx", "vy", "vz",
                 "roll", "pitch", "yaw", "wx", "wy", "wz")
STATE9_NAMES = STATE12_NAMES[:9]


# --- reference generators -------------------------------------------------

def figure8_reference(t, amplitude=2.0, period=8.0, center=(0.0, 0.0, 2.0)):
    """Planar figure-eight in the x-z plane with analytic velocities.

    x traces a sine of the full amplitude once per period while z traces
    half the amplitude at twice the rate, so the path crosses itself at
    the center where the speed peaks at amplitude * (2 pi / period) * sqrt(2).
    """
    w = 2.0 * math.pi / period
    cx, cy, cz = center
    x = np.zeros(9)
    x[0] = cx + amplitude * math.sin(w * t)
    x[1] = cy
    x[2] = cz + 0.5 * amplitude * math.sin(2.0 * w * t)
    x[3] = amplitude * w * math.cos(w * t)
    x[5] = amplitude * w * math.cos(2.0 * w * t)
    return x


@dataclass(frozen=True)
class Figure8Reference:
    amplitude: float = 2.0
    period: float = 8.0
    center: tuple = (0.0, 0.0, 2.0)

    def __call__(self, t: float) -> np.ndarray:
        return figure8_reference(t, self.amplitude, self.period, self.center)

    def describe(self) -> dict:
        return {"kind": "figure-8", "amplitude": self.amplitude,
                "period": self.period, "center": list(self.center)}


@dataclass(frozen=True)
class LandingReference:
    """Straight descent blended by a half-cosine, then hold the platform.

    The profile reaches the platform with zero vertical speed at
    descent_time, so a well-tracked vehicle settles softly.
    """

    start_z: float = 3.0
    platform_z: float = 0.0
    descent_time: float = 10.0
    xy: tuple = (0.0, 0.0)

    def __call__(self, t: float) -> np.ndarray:
        x = np.zeros(9)
        x[0], x[1] = self.xy
        drop = self.start_z - self.platform_z
        if t < self.descent_time:
            s = math.pi * t / self.descent_time
            x[2] = self.platform_z + 0.5 * drop * (1.0 + math.cos(s))
            x[5] = -0.5 * drop * (math.pi / self.descent_time) * math.sin(s)
        else:
            x[2] = self.platform_z
        return x

    def describe(self) -> dict:
        return {"kind": "landing", "start_z": self.start_z,
                "platform_z": self.platform_z,
                "descent_time": self.descent_time, "xy": list(self.xy)}


@dataclass(frozen=True)
class HoverReference:
    point: tuple = (0.0, 0.0, 2.0)

    def __call__(self, t: float) -> np.ndarray:
        x = np.zeros(9)
        x[:3] = self.point
        return x

    def describe(self) -> dict:
        return {"kind": "hover", "point": list(self.point)}


_REFERENCE_KINDS = {
    "figure-8": Figure8Reference,
    "landing": LandingReference,
    "hover": HoverReference,
}


def reference_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in _REFERENCE_KINDS:
        raise DomainError(f"unknown reference kind {kind!r}")
    args = {k: (tuple(v) if isinstance(v, list) else v)
            for k, v in d.items() if k != "kind"}
    return _REFERENCE_KINDS[kind](**args)


# --- scenarios ------------------------------------------------------------

@dataclass
class Scenario:
    """One closed-loop experiment: a reference, an environment, a variant."""

    name: str
    duration: float
    reference: object          # callable t -> 9-dim reduced reference state
    env: EnvConditions = field(default_factory=EnvConditions)
    variant: str = "full"
    seed: int = 0
    x0_jitter: float = 0.0     # std-dev of the seeded initial perturbation

    def __post_init__(self) -> None:
        if self.duration <= 0.0:
            raise DomainError("scenario duration must be positive")
        if self.variant not in VARIANTS:
            raise DomainError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not callable(self.reference):
            raise DomainError("reference must be callable t -> state")

    def describe(self) -> dict:
        ref = (self.reference.describe() if hasattr(self.reference, "describe")
               else {"kind": type(self.reference).__name__})
        return {
            "name": self.name,
            "duration": self.duration,
            "variant": self.variant,
            "seed": self.seed,
            "x0_jitter": self.x0_jitter,
            "reference": ref,
            "env": self.env.describe(),
        }


def figure8_scenario(variant: str, *, seed: int = 0, duration: float = 30.0,
                     env: EnvConditions | None = None,
                     x0_jitter: float = 0.0, name: str = "figure8") -> Scenario:
    """Figure-eight comparison scenario: 12 m/s +x crosswind over ground at
    z = 0 (the loop's low point stays ~1 m up, so the cushion is a trace
    effect here; the wind dominates)."""
    if env is None:
        env = EnvConditions(wind_velocity=np.array([12.0, 0.0, 0.0]),
                            ground_effect=True)
    return Scenario(name, duration, Figure8Reference(), env, variant, seed,
                    x0_jitter)


def landing_scenario(variant: str, *, seed: int = 0, duration: float = 15.0,
                     env: EnvConditions | None = None,
                     x0_jitter: float = 0.0, name: str = "landing") -> Scenario:
    """Descent onto a ground-level platform with ground effect active.

    The profile reaches the pad at t = 10; the hold that follows is where
    the controller settles through the cushion, which strengthens as 1/z^2
    until it saturates below half a rotor radius.  Touchdown ends the run
    early, so the duration only caps how long a stalling variant hovers.
    """
    if env is None:
        env = EnvConditions(ground_effect=True)
    return Scenario(name, duration, LandingReference(), env, variant, seed,
                    x0_jitter)


def hover_scenario(variant: str, *, seed: int = 0, duration: float = 10.0,
                   env: EnvConditions | None = None,
                   x0_jitter: float = 0.0, name: str = "hover") -> Scenario:
    if env is None:
        env = EnvConditions()
    return Scenario(name, duration, HoverReference(), env, variant, seed,
                    x0_jitter)


# --- run logs -------------------------------------------------------------

_STR_COLUMNS = {"mpc_status"}
_INT_COLUMNS = {"saturated", "replanned", "mpc_iterations", "mpc_degraded"}


def record_columns(k: int) -> list[str]:
    cols = ["t"]
    cols += [f"x_{n}" for n in STATE12_NAMES]
    cols += [f"xd_{n}" for n in STATE9_NAMES]
    cols += [f"xr_{n}" for n in STATE9_NAMES]
    cols += ["u_thrust", "u_roll_rate", "u_pitch_rate", "u_yaw_rate"]
    cols += [f"a_{i}" for i in range(k)]
    cols += [f"p_{i}{j}" for i in range(k) for j in range(i, k)]
    cols += ["p_min_eig", "e_bar", "d_bar", "e_norm", "e_norm_metric",
             "saturated", "replanned",
             "mpc_status", "mpc_iterations", "mpc_kkt", "mpc_violation",
             "mpc_degraded", "mpc_wall_ms", "cbac_wall_ms"]
    return cols


def _format_cell(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse_cell(column: str, text: str):
    if column in _STR_COLUMNS:
        return text
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


class RunLog:
    """Per-step records at 100 Hz plus a summary derived from them."""

    def __init__(self, scenario_meta: dict, records: list[dict], summary: dict):
        self.scenario_meta = scenario_meta
        self.records = records
        self.summary = summary

    def __len__(self) -> int:
        return len(self.records)

    def array(self, column: str) -> np.ndarray:
        if column in _STR_COLUMNS:
            return np.array([r[column] for r in self.records])
        return np.array([r[column] for r in self.records], dtype=float)

    def states(self, prefix: str) -> np.ndarray:
        names = STATE12_NAMES if prefix == "x" else STATE9_NAMES
        return np.column_stack([self.array(f"{prefix}_{n}") for n in names])

    def recompute_summary(self) -> dict:
        return summarize(self.records, self.scenario_meta)

    @property
    def columns(self) -> list[str]:
        return list(self.records[0].keys()) if self.records else []

    def run_dir(self, root) -> Path:
        m = self.scenario_meta
        return Path(root) / str(m["name"]) / str(m["variant"]) / str(m["seed"])

    def save(self, root) -> Path:
        out = self.run_dir(root)
        out.mkdir(parents=True, exist_ok=True)
        cols = self.columns
        with open(out / "records.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for rec in self.records:
                writer.writerow([_format_cell(rec[c]) for c in cols])
        payload = {"scenario": self.scenario_meta, "summary": self.summary}
        with open(out / "summary.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return out

    @classmethod
    def load(cls, run_dir) -> "RunLog":
        run_dir = Path(run_dir)
        with open(run_dir / "summary.json") as fh:
            payload = json.load(fh)
        records = []
        with open(run_dir / "records.csv", newline="") as fh:
            reader = csv.reader(fh)
            cols = next(reader)
            for row in reader:
                records.append({c: _parse_cell(c, v) for c, v in zip(cols, row)})
        return cls(payload["scenario"], records, payload["summary"])


def rmse(log_or_records) -> float:
    """Root-mean-square position error against the reference."""
    records = log_or_records.records if isinstance(log_or_records, RunLog) \
        else log_or_records
    sq = 0.0
    for rec in records:
        for n in ("px", "py", "pz"):
            sq += (rec[f"x_{n}"] - rec[f"xr_{n}"]) ** 2
    return math.sqrt(sq / len(records))


def summarize(records: list[dict], scenario_meta: dict,
              timing: dict | None = None) -> dict:
    """Summary statistics, every one of them a function of the records.

    The optional timing block is the exception: wall-clock medians are
    measurements of the host machine, not of the trajectory, and are the
    only summary entries allowed to differ between repeat runs.
    """
    if not records:
        raise DomainError("cannot summarize an empty run")
    last = records[-1]
    terminal = math.sqrt(sum(
        (last[f"x_{n}"] - last[f"xr_{n}"]) ** 2 for n in ("px", "py", "pz")))
    e_norm = np.array([r["e_norm"] for r in records])
    e_bar = np.array([r["e_bar"] for r in records])
    violations = float(np.mean(e_norm > e_bar))
    replans = [r for r in records if r["replanned"]]
    failures = sum(1 for r in replans if r["mpc_status"] != mpc.STATUS_SOLVED)
    ground = scenario_meta.get("env", {}).get("ground_height", 0.0)
    touched = (last["x_pz"] - ground) <= TOUCHDOWN_HEIGHT
    summary = {
        "n_records": len(records),
        "duration": last["t"],
        "completed": bool(last["t"] >= scenario_meta["duration"] - 0.011),
        "rmse": rmse(records),
        "terminal_error": terminal,
        "terminal_height_error": abs(last["x_pz"] - last["xr_pz"]),
        "max_error_norm": float(e_norm.max()),
        "bound_violation_fraction": violations,
        "saturation_fraction": float(np.mean([r["saturated"] for r in records])),
        "mpc_solves": len(replans),
        "mpc_failures": failures,
        "mpc_median_iterations": (float(np.median([r["mpc_iterations"]
                                                   for r in replans]))
                                  if replans else 0.0),
        "touchdown": bool(touched),
        "touchdown_time": last["t"] if touched else None,
        "touchdown_speed": abs(last["x_vz"]) if touched else None,
    }
    if timing is not None:
        summary["timing"] = timing
    return summary


# --- tube bookkeeping -----------------------------------------------------

def _field_metric_extremes(metric_field) -> tuple[float, float]:
    """(min, max) eigenvalue of M = nu W_bar^-1 over all field nodes."""
    W = np.asarray(metric_field.W_bar)
    nu = np.asarray(metric_field.nu)
    lo, hi = np.inf, -np.inf
    for idx in np.ndindex(nu.shape):
        eigs = np.linalg.eigvalsh(W[idx])
        lo = min(lo, nu[idx] / eigs[-1])
        hi = max(hi, nu[idx] / eigs[0])
    return float(lo), float(hi)


@dataclass
class TubeOptions:
    """Envelope constants feeding the disturbance bound of the tube.

    d_bar bounds the residual acceleration the basis cannot represent,
    eps_bar the error of the filtered finite-difference measurement, and
    phi_bar the basis magnitude over the flight envelope; b_bar = 1 is
    the worst-case unmatched fraction (thrust spans one of the three
    velocity directions).  alpha_bar, when None, is certified at the
    start of the run from the initial metric and covariance.
    """

    d_bar: float = 0.5
    eps_bar: float = 0.5
    phi_bar: float | None = None
    b_bar: float = 1.0
    alpha_bar: float | None = None

    def resolve_phi_bar(self, model, reference, duration: float) -> float:
        if self.phi_bar is not None:
            return self.phi_bar
        if model is None:
            return 1.0
        sup = 0.0
        for t in np.linspace(0.0, duration, 25):
            x_r = reference(t)
            sup = max(sup, float(np.linalg.norm(model.phi(x_r, x_r), 2)))
        return 2.0 * sup + 1.0e-6


class _TubeTracker:
    """Evaluates the current tube radius e_bar(t) during a run."""

    def __init__(self, metric_field, model, scenario, adapt_cfg: AdaptConfig,
                 opts: TubeOptions, state0: AdaptState):
        self.cfg = adapt_cfg
        self.opts = opts
        self.lam_min_field, self.lam_max_field = \
            _field_metric_extremes(metric_field)
        self.bounds = EnvelopeBounds(
            d_bar=opts.d_bar,
            phi_bar=opts.resolve_phi_bar(model, scenario.reference,
                                         scenario.duration),
            b_bar=opts.b_bar,
            eps_bar=opts.eps_bar,
        )
        self.metric_info = {
            "omega_chi": metric_field.omega_chi,
            "lambda_max_M": self.lam_max_field,
        }
        self.certified = True
        if opts.alpha_bar is not None:
            self.alpha_bar = opts.alpha_bar
        else:
            x_r0 = np.asarray(scenario.reference(0.0), dtype=float)
            M0 = metric_field.metric_at(x_r0, mpc.hover_input(
                metric_field.params_from_meta()))
            phi0 = (model.phi(x_r0, x_r0) if model is not None
                    else np.zeros((3, adapt_cfg.k)))
            ab, ok = compute_alpha_bar(
                M0, state0.P, phi0, adapt_cfg.Q, adapt_cfg.R_meas,
                metric_field.alpha)
            if not ok or ab <= 0.0:
                # no certified composite rate at this operating point; a
                # slower assumed decay only widens the logged tube
                ab, self.certified = 0.1 * metric_field.alpha, False
            self.alpha_bar = ab
        _, self.a_tilde0 = uncertainty_set_radius(state0, adapt_cfg.delta)
        self.e0 = 0.0   # plans start at the measured state

    def describe(self) -> dict:
        return {
            "alpha_bar": self.alpha_bar,
            "certified": self.certified,
            "d_bar": self.bounds.d_bar,
            "phi_bar": self.bounds.phi_bar,
            "b_bar": self.bounds.b_bar,
            "eps_bar": self.bounds.eps_bar,
            "a_tilde0": self.a_tilde0,
            "lambda_min_M_field": self.lam_min_field,
            "lambda_max_M_field": self.lam_max_field,
        }

    def detail(self, t: float, state: AdaptState) -> tuple[float, float]:
        """(tube radius, disturbance envelope) at elapsed time t."""
        lam_P = np.linalg.eigvalsh(state.P)
        lam_min = min(self.lam_min_field, 1.0 / lam_P[-1])
        lam_max = max(self.lam_max_field, 1.0 / lam_P[0])
        bound = compute_D_bar(state, self.bounds, self.metric_info, self.cfg)
        params = ErrorBoundParams(
            alpha_bar=self.alpha_bar,
            lambda_M_ratio=math.sqrt(lam_max / lam_min),
            lambda_min_M=lam_min,
            D_bar=bound.strict,
            e0=self.e0,
            a_tilde0=self.a_tilde0,
        )
        return float(error_bound(t, params)), bound.strict

    def radius(self, t: float, state: AdaptState) -> float:
        return self.detail(t, state)[0]

    def horizon(self, t: float, state: AdaptState, cfg: mpc.MpcConfig) -> np.ndarray:
        return np.array([self.radius(t + k * cfg.dt, state)
                         for k in range(cfg.N + 1)])


# --- the closed-loop run --------------------------------------------------

@dataclass
class RunOptions:
    """Loop rates and controller wiring that are not scenario identity."""

    ctrl_dt: float = 0.01
    sim_substeps: int = 10
    replan_period: float = 0.2
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    gains: cbac.AttitudeGains = field(default_factory=cbac.AttitudeGains)
    leak_time: float = 0.5
    tube: TubeOptions = field(default_factory=TubeOptions)

    def __post_init__(self) -> None:
        if self.ctrl_dt <= 0.0 or self.sim_substeps < 1:
            raise DomainError("control period and substeps must be positive")
        if self.replan_period < self.ctrl_dt:
            raise DomainError("replanning cannot be faster than the control loop")


def _plan_lookup(plan: mpc.PlanResult, age: float, dt: float):
    """Destination state and input at a given age, linear between nodes."""
    N = plan.u_d_traj.shape[0]
    s = age / dt
    k = min(int(s), N - 1)
    w = min(s - k, 1.0)
    x_d = (1.0 - w) * plan.x_d_traj[k] + w * plan.x_d_traj[k + 1]
    u_hi = plan.u_d_traj[min(k + 1, N - 1)]
    u_d = (1.0 - w) * plan.u_d_traj[k] + w * u_hi
    return x_d, u_d


def run(scenario: Scenario, metric_field, model=None,
        params: VehicleParams | None = None,
        mpc_cfg: mpc.MpcConfig | None = None,
        options: RunOptions | None = None,
        out_root=None) -> RunLog:
    """Simulate one scenario under its controller variant.

    The learned model is required for the adaptive variants; the metric
    field is required always (it supplies the tracking gain).  Planner
    failures degrade to a braking plan and are recorded, never raised.
    """
    params = params if params is not None else metric_field.params_from_meta()
    if mpc_cfg is None:
        # steady wind shifts the trim state, so the default goal ball must
        # admit a tilted, offset terminal node without a penalty fight
        mpc_cfg = mpc.MpcConfig(eps_l=1.0)
    opts = options if options is not None else RunOptions()
    adaptive = scenario.variant != "nominal-mpc"
    if adaptive and model is None:
        raise DomainError(f"variant {scenario.variant!r} needs a learned model")

    planner = mpc.Planner(mpc_cfg, params,
                          model if scenario.variant == "full" else None)
    adapt_cfg = opts.adapt
    a_state = AdaptState(np.zeros(adapt_cfg.k),
                         adapt_cfg.P0 if adapt_cfg.P0 is not None
                         else np.eye(adapt_cfg.k))
    tube = _TubeTracker(metric_field, model if adaptive else None,
                        scenario, adapt_cfg, opts.tube, a_state)
    residual = ResidualFilter(params)
    att_filter = cbac.AttitudeCommandFilter(opts.leak_time)
    disturbance = make_disturbance(scenario.env, params)

    rng = np.random.default_rng(scenario.seed)
    x_r0 = np.asarray(scenario.reference(0.0), dtype=float)
    x12 = np.zeros(12)
    x12[:9] = x_r0
    if scenario.x0_jitter > 0.0:
        x12[P_SLC] += scenario.x0_jitter * rng.standard_normal(3)
        x12[V_SLC] += 0.5 * scenario.x0_jitter * rng.standard_normal(3)

    n_steps = int(round(scenario.duration / opts.ctrl_dt))
    sim_dt = opts.ctrl_dt / opts.sim_substeps
    plan: mpc.PlanResult | None = None
    plan_t0 = -np.inf
    prev_thrust = params.hover_thrust
    records: list[dict] = []
    mpc_walls: list[float] = []
    cbac_walls: list[float] = []
    aborted = None
    wall_start = time.perf_counter()

    for step in range(n_steps):
        t = step * opts.ctrl_dt
        x9 = x12[:9].copy()

        # residual measurement over the interval the last command acted on
        y = residual.update(x12, prev_thrust, opts.ctrl_dt) if adaptive else None

        replanned = 0
        if plan is None or t - plan_t0 >= opts.replan_period - 1e-9:
            x_r_traj = mpc.reference_tracker(t, scenario, mpc_cfg)
            snapshot = a_state if scenario.variant == "full" else None
            e_bar_traj = tube.horizon(t, a_state, mpc_cfg)
            try:
                plan = planner.solve(x9, x_r_traj, snapshot, e_bar_traj, warm=plan)
            except Exception:   # noqa: BLE001 - degrade, never abort the run
                plan = planner._brake_plan(x9, x_r_traj, time.perf_counter())
            plan_t0 = t
            replanned = 1
            mpc_walls.append(plan.wall_time)

        tick = time.perf_counter()
        x_d, u_d = _plan_lookup(plan, t - plan_t0, mpc_cfg.dt)
        x_r_now = np.asarray(scenario.reference(t), dtype=float)
        M = metric_field.metric_at(x_d, u_d)
        e = cbac.tracking_error(x9, x_d)

        if adaptive:
            K = metric_field.gain(x9, x_d, u_d, params)
            phi_x = model.phi(x9, x_r_now)
            varphi = phi_x - model.phi(x_d, x_r_now)
            B = dynamics.reduced_B(x9, params)
            a_state = adapt_step(
                a_state, phi_x, y, e, M, B, cbac.pseudo_inverse(B), varphi,
                adapt_cfg, opts.ctrl_dt)
            u_red, saturated = cbac.cbac_control(
                x9, x_d, u_d, model, a_state.a_hat, metric_field, x_r_now,
                params, K=K, varphi_v=varphi)
        else:
            u_red, saturated = cbac.clamp_command(
                np.asarray(u_d, dtype=float), params)
        eta_cmd = att_filter.update(x_d[ETA_SLC], u_red[1:4], u_d[1:4],
                                    opts.ctrl_dt)
        cbac_wall = time.perf_counter() - tick
        cbac_walls.append(cbac_wall)

        e_bar_now, d_bar_now = tube.detail(t, a_state)
        records.append(_make_record(
            t, x12, x_d, x_r_now, u_red, a_state, e, M, e_bar_now, d_bar_now,
            saturated, replanned, plan, cbac_wall))

        # 1 kHz plant: attitude autopilot reacts to the true state at
        # every substep while the reduced command holds for the full tick
        prev_thrust = u_red[0]
        try:
            for _ in range(opts.sim_substeps):
                u_full = cbac.attitude_inner_loop(
                    x12, np.concatenate([[u_red[0]], eta_cmd]), params,
                    opts.gains)
                x12 = dynamics.integrate_step(x12, u_full, params,
                                              disturbance, sim_dt)
        except (DomainError, FloatingPointError) as exc:
            aborted = f"simulation stopped at t={t:.2f}: {exc}"
            break

        z = x12[2] - scenario.env.ground_height
        if isinstance(scenario.reference, LandingReference) and \
                z <= TOUCHDOWN_HEIGHT:
            records.append(_make_record(
                t + opts.ctrl_dt, x12, x_d, scenario.reference(t + opts.ctrl_dt),
                u_red, a_state, e, M, e_bar_now, d_bar_now, saturated, 0,
                plan, 0.0))
            break
        if z < -0.5:
            aborted = f"went below ground at t={t:.2f}"
            break

    timing = {
        "median_mpc_wall_ms": float(np.median(mpc_walls) * 1e3) if mpc_walls else 0.0,
        "median_cbac_wall_ms": float(np.median(cbac_walls) * 1e3) if cbac_walls else 0.0,
        "total_wall_s": time.perf_counter() - wall_start,
    }
    meta = scenario.describe()
    meta["tube_constants"] = tube.describe()
    summary = summarize(records, meta, timing)
    if aborted:
        summary["aborted"] = aborted
    log = RunLog(meta, records, summary)
    if out_root is not None:
        log.save(out_root)
    return log


def _make_record(t, x12, x_d, x_r, u_red, a_state, e, M, e_bar, d_bar,
                 saturated, replanned, plan, cbac_wall) -> dict:
    rec = {"t": float(t)}
    for n, v in zip(STATE12_NAMES, x12):
        rec[f"x_{n}"] = float(v)
    for n, v in zip(STATE9_NAMES, x_d):
        rec[f"xd_{n}"] = float(v)
    for n, v in zip(STATE9_NAMES, x_r):
        rec[f"xr_{n}"] = float(v)
    for n, v in zip(("u_thrust", "u_roll_rate", "u_pitch_rate", "u_yaw_rate"),
                    u_red):
        rec[n] = float(v)
    k = a_state.a_hat.shape[0]
    for i, v in enumerate(a_state.a_hat):
        rec[f"a_{i}"] = float(v)
    for i in range(k):
        for j in range(i, k):
            rec[f"p_{i}{j}"] = float(a_state.P[i, j])
    rec["p_min_eig"] = float(np.linalg.eigvalsh(a_state.P)[0])
    rec["e_bar"] = float(e_bar)
    rec["d_bar"] = float(d_bar)
    rec["e_norm"] = float(np.linalg.norm(e))
    rec["e_norm_metric"] = float(math.sqrt(e @ M @ e))
    rec["saturated"] = int(saturated)
    rec["replanned"] = int(replanned)
    rec["mpc_status"] = plan.status
    rec["mpc_iterations"] = int(plan.iterations)
    rec["mpc_kkt"] = float(plan.kkt_residual)
    rec["mpc_violation"] = float(plan.violation)
    rec["mpc_degraded"] = int(plan.degraded)
    rec["mpc_wall_ms"] = float(plan.wall_time * 1e3)
    rec["cbac_wall_ms"] = float(cbac_wall * 1e3)
    return rec


# --- batch sweeps ---------------------------------------------------------

def sweep_scenarios(base: Scenario, seeds, envs=None,
                    x0_jitter: float = 0.1) -> list[Scenario]:
    """Seeded copies of a scenario, optionally cycling an env list."""
    out = []
    for i, seed in enumerate(seeds):
        env = envs[i % len(envs)] if envs else base.env
        out.append(replace(base, seed=int(seed), env=env,
                           x0_jitter=x0_jitter,
                           name=base.name))
    return out


def run_batch(scenarios, metric_field, model=None, params=None,
              mpc_cfg=None, options=None, out_root=None,
              n_jobs: int = -1) -> list[RunLog]:
    """Run many scenarios in parallel worker processes."""
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(
        delayed(run)(s, metric_field, model, params, mpc_cfg, options,
                     out_root)
        for s in scenarios)


# --- certificate replays --------------------------------------------------

def contraction_run(metric_field, params: VehicleParams | None = None,
                    e0: np.ndarray | None = None, duration: float = 3.0,
                    dt: float = 1.0e-3) -> dict:
    """Disturbance-free reduced-model tracking from a perturbed start.

    Holds a hover destination, applies u = u_d - K e with the metric
    gain, and records the metric-weighted error against the certified
    exponential envelope.  Returns arrays for the decay comparison.
    """
    params = params if params is not None else metric_field.params_from_meta()
    x_d = np.array([0.0, 0.0, 2.0, 0, 0, 0, 0, 0, 0])
    u_d = mpc.hover_input(params)
    if e0 is None:
        e0 = np.array([0.3, -0.2, 0.25, 0.2, -0.1, 0.15, 0.05, -0.04, 0.06])
    x = x_d + np.asarray(e0, dtype=float)
    n = int(round(duration / dt))
    M = metric_field.metric_at(x_d, u_d)
    ts = np.empty(n + 1)
    norms = np.empty(n + 1)
    ts[0] = 0.0
    norms[0] = math.sqrt(e0 @ M @ e0)
    for i in range(n):
        e = cbac.tracking_error(x, x_d)
        K = metric_field.gain(x, x_d, u_d, params)
        u = u_d - K @ e
        # half-step midpoint integration of the reduced model
        k1 = dynamics.reduced_derivative(x, u, params)
        k2 = dynamics.reduced_derivative(x + 0.5 * dt * k1, u, params)
        x = x + dt * k2
        e_next = cbac.tracking_error(x, x_d)
        ts[i + 1] = (i + 1) * dt
        norms[i + 1] = math.sqrt(e_next @ M @ e_next)
    lam = np.linalg.eigvalsh(M)
    ratio = math.sqrt(lam[-1] / lam[0])
    envelope = ratio * norms[0] * np.exp(-metric_field.alpha * ts)
    return {"t": ts, "e_norm_M": norms, "envelope": envelope,
            "alpha": metric_field.alpha, "lambda_ratio": ratio}


def best_fit_coefficients(log: RunLog, model,
                          params: VehicleParams | None = None) -> np.ndarray:
    """Least-squares projection of the true disturbance onto the basis.

    The simulated environment is known exactly from the log, so the
    sharpest coefficient vector the estimator could converge to is the
    one minimizing sum ||phi(x_t, x_r_t) a - d(x_t)/m||^2 over the run.
    """
    env = EnvConditions.from_dict(log.scenario_meta["env"])
    if params is None:
        params = VehicleParams()
    X = log.states("x")
    Xr = log.states("xr")
    thrust = log.array("u_thrust")
    rows, targets = [], []
    for i in range(len(log)):
        rows.append(model.phi(X[i, :9], Xr[i]))
        targets.append(total_disturbance(X[i], Xr[i], env, thrust[i], params)
                       / params.mass)
    A = np.vstack(rows)
    b = np.concatenate(targets)
    a_star, *_ = np.linalg.lstsq(A, b, rcond=None)
    return a_star


def lyapunov_margins(log: RunLog, metric_field, model,
                     params: VehicleParams | None = None,
                     alpha_bar: float | None = None) -> dict:
    """Replay the composite decrease inequality along a logged run.

    V = e' M e + a~' P^-1 a~ with a~ the gap between the logged estimate
    and the best condition-fit coefficients, dV/dt by central
    differences, and the logged disturbance envelope on the right side:

        dV/dt <= -2 alpha_bar V + 2 sqrt(V / lambda_min) d_bar

    Interior replan steps splice plans cut from the measured state, so
    error jumps point downward; the fraction of steps satisfying the
    inequality is what the certificate claims.
    """
    meta_tube = log.scenario_meta.get("tube_constants", {})
    if alpha_bar is None:
        alpha_bar = meta_tube.get("alpha_bar", 0.1 * metric_field.alpha)
    if params is None:
        params = metric_field.params_from_meta()
    a_star = best_fit_coefficients(log, model, params)
    k = a_star.shape[0]
    t = log.array("t")
    a_hat = np.column_stack([log.array(f"a_{i}") for i in range(k)])
    lam_min_field = meta_tube.get("lambda_min_M_field")
    if lam_min_field is None:
        lam_min_field = _field_metric_extremes(metric_field)[0]
    n = len(log)
    V = np.empty(n)
    lam_min = np.empty(n)
    for i in range(n):
        P = np.empty((k, k))
        for r in range(k):
            for c in range(r, k):
                P[r, c] = P[c, r] = log.records[i][f"p_{r}{c}"]
        a_tilde = a_star - a_hat[i]
        V[i] = log.records[i]["e_norm_metric"] ** 2 \
            + a_tilde @ np.linalg.solve(P, a_tilde)
        lam_min[i] = min(lam_min_field, 1.0 / np.linalg.eigvalsh(P)[-1])
    dV = np.gradient(V, t)
    d_bar = log.array("d_bar")
    rhs = -2.0 * alpha_bar * V + 2.0 * np.sqrt(V / lam_min) * d_bar
    margin = dV - rhs
    ok = margin <= 1e-8 + 1e-6 * np.abs(rhs)
    return {"t": t, "V": V, "dV": dV, "rhs": rhs, "margin": margin,
            "fraction_ok": float(np.mean(ok)), "alpha_bar": alpha_bar}
