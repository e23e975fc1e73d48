"""Disturbance-aware planning and adaptive control for a quadrotor.

The pipeline runs in four stages, each persisted so later stages can be
rerun without earlier ones: simulate training conditions (disturbances),
meta-train a shared disturbance basis (basisnet), synthesize a gridded
tracking metric with a contraction certificate (metric), then fly
closed-loop scenarios (harness) with a Gauss-Newton SQP planner (mpc)
and an adaptive tracking controller (cbac, adaptation).
"""

from .adaptation import (
    AdaptConfig,
    AdaptState,
    DisturbanceBound,
    EnvelopeBounds,
    ErrorBoundParams,
    adapt_step,
    compute_D_bar,
    error_bound,
    uncertainty_set_radius,
)
from .basisnet import (
    BasisConfig,
    MlpBasis,
    TrainConfig,
    fit_coeffs,
    load_model,
    save_model,
    train_meta,
)
from .cbac import AttitudeGains, cbac_control, tracking_error
from .config import (
    RunConfig,
    ScenarioSpec,
    default_config,
    load_config,
    save_config,
)
from .disturbances import (
    DatasetConfig,
    EnvConditions,
    generate_meta_dataset,
    load_dataset,
    save_dataset,
)
from .dynamics import VehicleParams
from .errors import (
    ArtifactError,
    ConfigError,
    DivergenceError,
    DomainError,
    InsufficientHistoryError,
    RankDeficiencyError,
    SingularityError,
)
from .harness import (
    RunLog,
    RunOptions,
    Scenario,
    VARIANTS,
    figure8_scenario,
    hover_scenario,
    landing_scenario,
    run,
)
from .metric import MetricConfig, MetricField, build_metric_field
from .mpc import BoxLimits, MpcConfig, Planner, SphereObstacle

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptState", "DisturbanceBound", "EnvelopeBounds",
    "ErrorBoundParams", "adapt_step", "compute_D_bar", "error_bound",
    "uncertainty_set_radius",
    "BasisConfig", "MlpBasis", "TrainConfig", "fit_coeffs", "load_model",
    "save_model", "train_meta",
    "AttitudeGains", "cbac_control", "tracking_error",
    "RunConfig", "ScenarioSpec", "default_config", "load_config",
    "save_config",
    "DatasetConfig", "EnvConditions", "generate_meta_dataset",
    "load_dataset", "save_dataset",
    "VehicleParams",
    "ArtifactError", "ConfigError", "DivergenceError", "DomainError",
    "InsufficientHistoryError", "RankDeficiencyError", "SingularityError",
    "RunLog", "RunOptions", "Scenario", "VARIANTS", "figure8_scenario",
    "hover_scenario", "landing_scenario", "run",
    "MetricConfig", "MetricField", "build_metric_field",
    "BoxLimits", "MpcConfig", "Planner", "SphereObstacle",
    "__version__",
]
