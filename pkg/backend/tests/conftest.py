# backend/tests/conftest.py
import numpy as np
import pytest

from app.core.heston import HestonParams, SimConfig, simulate_paths

TRUE = HestonParams(mu=0.03, kappa=5.0, theta=0.05, sigma=0.2, rho=-0.5)


@pytest.fixture
def true_params():
    return TRUE


@pytest.fixture
def short_config():
    return SimConfig(s0=10.0, v0=0.01, n_steps=50, dt=1 / 250, n_paths=4, seed=7)


@pytest.fixture
def short_paths(true_params, short_config):
    return simulate_paths(true_params, short_config)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch, tmp_path):
    for name in ("SLICED_CONFIG", "SLICED_OUTPUT_DIR", "SLICED_WORKERS"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
