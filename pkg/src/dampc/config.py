"""One JSON config for the whole pipeline, with strict schema validation.

Every tunable constant in the package appears in the default config, so a
dumped default file doubles as the catalogue of what can be changed.  A
loaded file may specify any subset; everything else keeps its default.
Unknown keys are rejected with their dotted path rather than silently
ignored, since a typo that drops a constant is the worst kind of quiet
failure in a pipeline whose artifacts are expensive to rebuild.

Sections mirror the owning modules: `vehicle`, `dataset`, `basis`,
`train`, `adaptation`, `metric`, `mpc`, `run`, `scenario`, plus the
top-level `seeds`, `variants`, and `out_dir`.  The `scenario.env` entry
is null by default, meaning each scenario's canonical environment; a
full environment object there overrides it.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import harness, mpc
from .adaptation import AdaptConfig
from .artifacts import config_hash
from .basisnet import BasisConfig, TrainConfig
from .disturbances import DatasetConfig, EnvConditions, default_conditions
from .dynamics import VehicleParams
from .errors import ConfigError
from .metric import MetricConfig

CONFIG_SCHEMA_VERSION = 1
OUT_ROOT_ENV = "DAMPC_OUT_ROOT"

SCENARIO_KINDS = ("figure8", "landing", "hover")


@dataclass
class ScenarioSpec:
    """Which experiment to fly; null duration means the builder default."""

    kind: str = "figure8"
    duration: float | None = None
    x0_jitter: float = 0.0
    name: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(
                f"scenario.kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")


@dataclass
class RunConfig:
    """Everything the pipeline commands need, in one validated object."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    mpc: mpc.MpcConfig = field(default_factory=lambda: mpc.MpcConfig(eps_l=1.0))
    run: harness.RunOptions = field(default_factory=harness.RunOptions)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    env: EnvConditions | None = None
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=lambda: list(harness.VARIANTS))
    out_dir: str = "out"

    def __post_init__(self) -> None:
        for v in self.variants:
            if v not in harness.VARIANTS:
                raise ConfigError(
                    f"variants entries must be among {harness.VARIANTS}, got {v!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        self.run.adapt = self.adaptation

    def out_root(self) -> Path:
        return Path(os.environ.get(OUT_ROOT_ENV, self.out_dir))

    def hash(self) -> str:
        return config_hash(to_dict(self))

    def build_scenario(self, variant: str, seed: int) -> harness.Scenario:
        sp = self.scenario
        builders = {
            "figure8": harness.figure8_scenario,
            "landing": harness.landing_scenario,
            "hover": harness.hover_scenario,
        }
        kwargs: dict = {"seed": seed, "x0_jitter": sp.x0_jitter, "env": self.env}
        if sp.duration is not None:
            kwargs["duration"] = sp.duration
        if sp.name is not None:
            kwargs["name"] = sp.name
        return builders[sp.kind](variant, **kwargs)


# -- dict <-> config ------------------------------------------------------

_LEAF_TYPES = (int, float, bool, str, type(None))


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return [_to_jsonable(v) for v in value.tolist()] \
            if value.ndim > 1 else [float(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _to_jsonable(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, _LEAF_TYPES):
        return value
    if hasattr(value, "describe"):
        return value.describe()
    raise ConfigError(f"cannot serialize config value of type {type(value)!r}")


def to_dict(cfg: RunConfig) -> dict:
    """JSON-compatible dict with every constant spelled out."""
    d = {f.name: _to_jsonable(getattr(cfg, f.name))
         for f in dataclasses.fields(cfg)}
    # DatasetConfig carries its conditions as objects; spell them out.
    d["dataset"]["conditions"] = [c.describe() for c in cfg.dataset.conditions]
    d["mpc"]["obstacles"] = [_obstacle_dict(o) for o in cfg.mpc.obstacles]
    # The adaptation section is authoritative for the estimator constants;
    # the copy RunOptions carries would shadow it on a round trip.
    d["run"].pop("adapt", None)
    d["schema_version"] = CONFIG_SCHEMA_VERSION
    return d


def _obstacle_dict(obs) -> dict:
    if isinstance(obs, mpc.SphereObstacle):
        return {"kind": "sphere", "center": list(obs.center),
                "radius": obs.radius}
    if isinstance(obs, mpc.HalfSpaceObstacle):
        return {"kind": "halfspace", "normal": list(obs.normal),
                "offset": obs.offset}
    raise ConfigError(f"unknown obstacle type {type(obs)!r}")


def _obstacle_from(d: dict, path: str):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{path}: each obstacle needs a 'kind'")
    kind = d["kind"]
    try:
        if kind == "sphere":
            _reject_unknown(d, {"kind", "center", "radius"}, path)
            return mpc.SphereObstacle(np.array(d["center"], dtype=float),
                                      float(d["radius"]))
        if kind == "halfspace":
            _reject_unknown(d, {"kind", "normal", "offset"}, path)
            return mpc.HalfSpaceObstacle(np.array(d["normal"], dtype=float),
                                         float(d["offset"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}: unknown obstacle kind {kind!r}")


def _reject_unknown(d: dict, known: set, path: str) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(
            f"{path}: unknown key(s) {sorted(unknown)}; known: {sorted(known)}")


def _coerce(value, default, path: str):
    """Interpret a JSON value in the shape the default suggests."""
    if isinstance(default, np.ndarray):
        try:
            return np.asarray(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: expected a numeric array") from exc
    if dataclasses.is_dataclass(default) and not isinstance(default, type):
        return _build(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    # Fully dynamic fields (defaults of None) pass through; the owning
    # class validates them.  A list here can only mean a matrix-like value.
    if default is None and isinstance(value, list):
        return np.asarray(value, dtype=float)
    return value


def _build(cls, d, path: str):
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(d, names, path)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        kwargs[f.name] = _coerce(d[f.name], getattr(proto, f.name),
                                 f"{path}.{f.name}")
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_SECTION_TYPES = {
    "vehicle": VehicleParams,
    "dataset": DatasetConfig,
    "basis": BasisConfig,
    "train": TrainConfig,
    "adaptation": AdaptConfig,
    "metric": MetricConfig,
    "mpc": mpc.MpcConfig,
    "run": harness.RunOptions,
    "scenario": ScenarioSpec,
    "env": EnvConditions,
}

_TOP_KEYS = set(_SECTION_TYPES) | {"seeds", "variants", "out_dir",
                                   "schema_version"}


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(d, _TOP_KEYS, "config")
    version = d.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version {version} unsupported "
            f"(this build reads {CONFIG_SCHEMA_VERSION})")

    kwargs: dict = {}
    for name, cls in _SECTION_TYPES.items():
        if name not in d:
            continue
        if name == "env":
            kwargs["env"] = _build(EnvConditions, d["env"], "config.env")
            continue
        if name == "run" and isinstance(d["run"], dict) and "adapt" in d["run"]:
            raise ConfigError(
                "config.run.adapt: set the top-level 'adaptation' section "
                "instead (it is the single source for estimator constants)")
        section = dict(d[name]) if isinstance(d[name], dict) else d[name]
        if name == "dataset" and isinstance(section, dict) \
                and "conditions" in section:
            conds = section.pop("conditions")
            if not isinstance(conds, list):
                raise ConfigError("config.dataset.conditions: expected a list")
            built = [_build(EnvConditions, c, f"config.dataset.conditions[{i}]")
                     for i, c in enumerate(conds)]
            cfg = _build(DatasetConfig, section, "config.dataset")
            cfg.conditions = built
            kwargs["dataset"] = cfg
            continue
        if name == "mpc" and isinstance(section, dict) \
                and "obstacles" in section:
            obs = section.pop("obstacles")
            if not isinstance(obs, list):
                raise ConfigError("config.mpc.obstacles: expected a list")
            built_obs = [_obstacle_from(o, f"config.mpc.obstacles[{i}]")
                         for i, o in enumerate(obs)]
            base = _build(mpc.MpcConfig, section, "config.mpc")
            base.obstacles = built_obs
            kwargs["mpc"] = base
            continue
        kwargs[name] = _build(cls, section, f"config.{name}")

    for name in ("seeds", "variants"):
        if name in d:
            if not isinstance(d[name], list):
                raise ConfigError(f"config.{name}: expected a list")
            kwargs[name] = list(d[name])
    if "out_dir" in d:
        if not isinstance(d["out_dir"], str):
            raise ConfigError("config.out_dir: expected a string")
        kwargs["out_dir"] = d["out_dir"]

    try:
        return RunConfig(**kwargs)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def default_config() -> RunConfig:
    return RunConfig()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
