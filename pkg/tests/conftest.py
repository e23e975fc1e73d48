"""Shared fixtures.

The expensive artifacts (trained basis, certified metric field) are
built once into tests/_artifacts and reused across sessions; delete the
directory to force a rebuild.  DAMPC_TEST_ARTIFACTS points the fixtures
at an existing artifact directory instead (e.g. a pipeline out/ tree).
"""

import os
from pathlib import Path

import numpy as np
import pytest

from dampc import basisnet, disturbances, metric
from dampc.dynamics import VehicleParams

ARTIFACT_DIR = Path(
    os.environ.get("DAMPC_TEST_ARTIFACTS",
                   Path(__file__).resolve().parent / "_artifacts"))


def _ensure_model(path: Path):
    if path.exists():
        return basisnet.load_model(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = VehicleParams()
    data_cfg = disturbances.DatasetConfig()
    datasets = disturbances.generate_meta_dataset(data_cfg, params)
    model, coeffs, report = basisnet.train_meta(
        datasets, basisnet.BasisConfig(), basisnet.TrainConfig())
    basisnet.save_model(path, model, coeffs, report)
    return basisnet.load_model(path)


def _ensure_field(path: Path):
    if path.exists():
        return metric.MetricField.load(path, recheck=False)
    path.parent.mkdir(parents=True, exist_ok=True)
    field = metric.build_metric_field(VehicleParams(), metric.MetricConfig())
    field.save(path)
    return field


@pytest.fixture(scope="session")
def trained_model():
    """Production-settings basis model (built once, then cached on disk)."""
    model, meta, extras = _ensure_model(ARTIFACT_DIR / "model.bin")
    return model, meta, extras


@pytest.fixture(scope="session")
def metric_field():
    """Full default-grid metric field (built once, then cached on disk)."""
    return _ensure_field(ARTIFACT_DIR / "metric.bin")


@pytest.fixture(scope="session")
def small_field(tmp_path_factory):
    """Coarse 3x3x3 field for tests that only need a valid gain source."""
    path = ARTIFACT_DIR / "metric_small.bin"
    if path.exists():
        return metric.MetricField.load(path, recheck=False)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = metric.MetricConfig(phi_points=3, theta_points=3, fu_points=3)
    field = metric.build_metric_field(VehicleParams(), cfg)
    field.save(path)
    return field


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
