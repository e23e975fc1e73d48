"""Ground-truth disturbance models and meta-dataset generation.

Two physical effects act on the vehicle:

* Ground effect: near-ground thrust augmentation following the classic
  single-rotor in-ground-effect correlation,

      f_ge = f_u * (1 / (1 - rho (R / 4z)^2) - 1),

  acting along the body thrust axis.  z is height above the ground plane,
  clamped below at R/2 where the correlation blows up; rho scales the
  nominal correlation to the airframe.

* Crosswind drag, quadratic in relative airspeed per axis:

      f_w = c_d * (v_wind - v) * ||v_wind - v||.

The meta-dataset samples M wind/ground-effect conditions, flies scripted
figure-eight and low-dipping trajectories in each with a simple chase
controller, and records velocity-row residuals y.  Because we own the
simulator, training residuals are exact (true disturbance acceleration
plus synthetic sensor noise); the online estimator is the one that has
to live with finite differences.  Each condition is persisted to its own
CSV (columns t, x[9], u[4], y[3], x_r[9]) next to a JSON manifest with
conditions, seeds, and the config hash.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics
from .artifacts import config_hash
from .dynamics import ETA_SLC, P_SLC, V_SLC, VehicleParams
from .errors import DomainError


@dataclass
class EnvConditions:
    """A single disturbance condition (the hidden environment state)."""

    wind_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drag_coeff: np.ndarray = field(default_factory=lambda: np.full(3, 0.02))
    ground_effect: bool = False
    ge_strength: float = 1.0
    ground_height: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.wind_velocity = np.asarray(self.wind_velocity, dtype=float)
        self.drag_coeff = np.asarray(self.drag_coeff, dtype=float)
        if self.wind_velocity.shape != (3,) or self.drag_coeff.shape != (3,):
            raise DomainError("wind_velocity and drag_coeff must have shape (3,)")
        if np.any(self.drag_coeff < 0.0) or self.ge_strength < 0.0:
            raise DomainError("drag coefficients and ge_strength must be nonnegative")

    def describe(self) -> dict:
        return {
            "wind_velocity": list(self.wind_velocity),
            "drag_coeff": list(self.drag_coeff),
            "ground_effect": self.ground_effect,
            "ge_strength": self.ge_strength,
            "ground_height": self.ground_height,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConditions":
        return cls(
            wind_velocity=np.array(d["wind_velocity"], dtype=float),
            drag_coeff=np.array(d["drag_coeff"], dtype=float),
            ground_effect=bool(d["ground_effect"]),
            ge_strength=float(d["ge_strength"]),
            ground_height=float(d["ground_height"]),
            rng_seed=int(d.get("rng_seed", 0)),
        )


def ground_effect_force(z: float, f_u: float, params: VehicleParams, rho: float = 1.0) -> float:
    """Extra thrust (N) along the body axis at height z above ground."""
    R = params.rotor_radius
    if R <= 0.0:
        raise DomainError("rotor radius must be positive")
    z_eff = max(z, 0.5 * R)
    ratio = rho * (R / (4.0 * z_eff)) ** 2
    return f_u * (1.0 / (1.0 - ratio) - 1.0)


def crosswind_force(v: np.ndarray, env: EnvConditions) -> np.ndarray:
    """Quadratic drag force (N) from relative airspeed."""
    rel = env.wind_velocity - np.asarray(v, dtype=float)
    return env.drag_coeff * rel * np.linalg.norm(rel)


def total_disturbance(x, x_r, env: EnvConditions, f_u: float,
                      params: VehicleParams) -> np.ndarray:
    """World-frame disturbance force (N): crosswind plus thrust-axis ground effect.

    Deterministic; sensor noise belongs to dataset generation only.  x may
    be the 12- or 9-dim state (the first nine entries are shared); x_r is
    accepted for signature symmetry with the learned model but the truth
    does not depend on it.
    """
    x = np.asarray(x, dtype=float)
    f = crosswind_force(x[V_SLC], env)
    if env.ground_effect:
        z = float(x[P_SLC][2]) - env.ground_height
        f_ge = ground_effect_force(z, f_u, params, env.ge_strength)
        f = f + f_ge * dynamics.thrust_axis(x[ETA_SLC])
    return f


def make_disturbance(env: EnvConditions, params: VehicleParams):
    """Callback (x_full, u_full) -> (f_dist, tau_dist) for integrate_step."""

    def dist(x, u):
        return total_disturbance(x, None, env, u[0], params), np.zeros(3)

    return dist


def default_conditions(base: EnvConditions | None = None) -> list[EnvConditions]:
    """The M = 10 training conditions: 5 wind speeds x ground effect on/off."""
    base = base or EnvConditions()
    conds = []
    for ge in (False, True):
        for speed in (0.0, 3.0, 6.0, 9.0, 12.0):
            conds.append(replace(
                base,
                wind_velocity=np.array([speed, 0.0, 0.0]),
                ground_effect=ge,
            ))
    return conds


@dataclass
class DatasetConfig:
    samples_per_condition: int = 1500
    sample_dt: float = 0.02
    sim_dt: float = 1.0e-3
    noise_std: float = 0.05
    seed: int = 0
    conditions: list[EnvConditions] = field(default_factory=default_conditions)


@dataclass
class DomainDataset:
    """Sampled residual data for one environment condition."""

    t: np.ndarray
    x: np.ndarray      # (n, 9)
    u: np.ndarray      # (n, 4)
    y: np.ndarray      # (n, 3) velocity-row residual, m/s^2
    x_r: np.ndarray    # (n, 9)
    condition: EnvConditions

    def __len__(self) -> int:
        return len(self.t)


def _chase_command(x9, x_ref, v_ref, params):
    """Small-angle PD position controller used only for data collection."""
    kp, kv = 4.0, 3.0
    acc = kp * (x_ref - x9[P_SLC]) + kv * (v_ref - x9[V_SLC])
    acc = np.clip(acc, -5.0, 5.0)
    acc_total = acc + np.array([0.0, 0.0, params.gravity])
    f_u = float(np.clip(params.mass * np.linalg.norm(acc_total), 0.1, params.f_max))
    # Invert r3 ~ (theta, -phi, 1) for small angles at zero yaw.
    theta = np.arctan2(acc_total[0], acc_total[2])
    phi = np.arctan2(-acc_total[1], np.hypot(acc_total[0], acc_total[2]))
    eta_cmd = np.array([np.clip(phi, -0.5, 0.5), np.clip(theta, -0.5, 0.5), 0.0])
    return f_u, eta_cmd


def _collection_path(t, path_args, z_floor):
    """Reference for data collection: a slanted figure eight that dips low."""
    ax, az, period, cx, cz = path_args
    om = 2.0 * np.pi / period
    pos = np.array([cx + ax * np.sin(om * t), 0.0, cz + az * np.sin(2.0 * om * t)])
    vel = np.array([ax * om * np.cos(om * t), 0.0, 2.0 * az * om * np.cos(2.0 * om * t)])
    if pos[2] < z_floor:
        pos[2] = z_floor
        vel[2] = 0.0
    return pos, vel


def _collect_condition(env: EnvConditions, params, cfg: DatasetConfig, rng):
    """Fly one condition and return its DomainDataset."""
    from .cbac import AttitudeGains, attitude_inner_loop

    gains = AttitudeGains()
    dist = make_disturbance(env, params)
    sub = max(1, int(round(cfg.sample_dt / cfg.sim_dt)))
    dt = cfg.sample_dt / sub

    ax = rng.uniform(1.0, 2.5)
    az = rng.uniform(0.5, 1.2)
    period = rng.uniform(6.0, 10.0)
    cx = rng.uniform(-1.0, 1.0)
    # Ground-effect conditions must ride the floor clamp: the cushion only
    # becomes strong below ~2 rotor radii, and a landing controller needs
    # data from exactly that band.
    cz = rng.uniform(0.0, 0.3) + az if env.ground_effect else rng.uniform(1.5, 2.5)
    path_args = (ax, az, period, cx, cz)
    z_floor = 0.55 * params.rotor_radius

    pos0, vel0 = _collection_path(0.0, path_args, z_floor)
    x = np.zeros(12)
    x[P_SLC] = pos0
    x[V_SLC] = vel0

    rows_t, rows_x, rows_u, rows_y, rows_xr = [], [], [], [], []
    n = cfg.samples_per_condition
    for k in range(n):
        t = k * cfg.sample_dt
        pos_r, vel_r = _collection_path(t, path_args, z_floor)
        x9 = x[:9].copy()
        f_u, eta_cmd = _chase_command(x9, pos_r, vel_r, params)
        u_red = np.concatenate([[f_u], eta_cmd])
        x_r = np.concatenate([pos_r, vel_r, np.zeros(3)])

        # Exact residual: the simulator's own disturbance acceleration at the
        # sample instant, plus synthetic sensor noise.
        y = total_disturbance(x9, x_r, env, f_u, params) / params.mass
        y = y + rng.normal(0.0, cfg.noise_std, size=3)

        rows_t.append(t)
        rows_x.append(x9)
        rows_u.append(u_red)
        rows_y.append(y)
        rows_xr.append(x_r)

        for _ in range(sub):
            u_full = attitude_inner_loop(x, u_red, params, gains)
            x = dynamics.integrate_step(x, u_full, params, dist, dt)

    return DomainDataset(np.array(rows_t), np.array(rows_x), np.array(rows_u),
                         np.array(rows_y), np.array(rows_xr), env)


def generate_meta_dataset(cfg: DatasetConfig, params: VehicleParams) -> list[DomainDataset]:
    """Simulate every condition and return one DomainDataset per condition."""
    if len(cfg.conditions) < 2:
        raise DomainError("need at least two conditions")
    if cfg.samples_per_condition < 100:
        raise DomainError("need at least 100 samples per condition")
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.conditions))
    datasets = []
    for i, (env, seed) in enumerate(zip(cfg.conditions, seeds)):
        rng = np.random.default_rng(seed)
        env = replace(env, rng_seed=cfg.seed * 1000 + i)
        datasets.append(_collect_condition(env, params, cfg, rng))
    return datasets


_CSV_COLUMNS = (
    ["t"]
    + [f"x{i}" for i in range(9)]
    + [f"u{i}" for i in range(4)]
    + [f"y{i}" for i in range(3)]
    + [f"xr{i}" for i in range(9)]
)


def dataset_manifest(datasets: list[DomainDataset], cfg: DatasetConfig | None = None) -> dict:
    manifest = {
        "files": [f"condition_{i:02d}.csv" for i in range(len(datasets))],
        "conditions": [d.condition.describe() for d in datasets],
        "samples_per_condition": [len(d) for d in datasets],
    }
    if cfg is not None:
        manifest["seed"] = cfg.seed
        manifest["sample_dt"] = cfg.sample_dt
        manifest["noise_std"] = cfg.noise_std
    manifest["hash"] = config_hash(manifest)
    return manifest


def save_dataset(datasets: list[DomainDataset], out_dir, cfg: DatasetConfig | None = None) -> dict:
    """Write one CSV per condition plus manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset_manifest(datasets, cfg)
    for name, ds in zip(manifest["files"], datasets):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_CSV_COLUMNS)
            for j in range(len(ds)):
                row = [f"{ds.t[j]:.6f}"]
                row += [f"{v:.12g}" for v in ds.x[j]]
                row += [f"{v:.12g}" for v in ds.u[j]]
                row += [f"{v:.12g}" for v in ds.y[j]]
                row += [f"{v:.12g}" for v in ds.x_r[j]]
                w.writerow(row)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(in_dir) -> list[DomainDataset]:
    """Read datasets written by save_dataset."""
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    datasets = []
    for name, cond in zip(manifest["files"], manifest["conditions"]):
        rows = []
        with open(src / name, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != _CSV_COLUMNS:
                raise DomainError(f"unexpected dataset CSV columns in {name}")
            for row in reader:
                rows.append([float(v) for v in row])
        arr = np.array(rows)
        datasets.append(DomainDataset(
            t=arr[:, 0],
            x=arr[:, 1:10],
            u=arr[:, 10:14],
            y=arr[:, 14:17],
            x_r=arr[:, 17:26],
            condition=EnvConditions.from_dict(cond),
        ))
    return datasets
