# backend/tests/test_settings.py
import pytest

from app.config.settings import (
    DEFAULT_SEEDS,
    Settings,
    all_keys,
    load_settings,
    parse_flat_config,
    settings_from_flat,
)
from app.core.enums import FeatureMode, SlicingMode
from app.errors import UsageError


def test_defaults():
    settings = Settings()
    assert settings.model.mu == 0.03
    assert settings.sim.dt == pytest.approx(1 / 250)
    assert settings.sir.n_slices == 10
    assert settings.optim.memory == 10
    assert settings.study.x0 == [0.02, 5.2, 0.04, 0.1, -0.6]
    assert settings.study.seeds == DEFAULT_SEEDS
    assert len(DEFAULT_SEEDS) == 15


def test_flat_keys_are_dotted():
    keys = all_keys()
    assert "sim.seed" in keys
    assert "optim.grad_tol" in keys
    assert list(Settings().flatten()) == keys


def test_parse_flat_config_skips_comments():
    text = "# header\n\nsim.seed = 7   # trailing\n sir.n_slices=4\n"
    assert parse_flat_config(text) == {"sim.seed": "7", "sir.n_slices": "4"}


def test_parse_flat_config_rejects_garbage():
    with pytest.raises(UsageError):
        parse_flat_config("sim.seed 7\n")


def test_values_are_coerced():
    settings = settings_from_flat({
        "sim.dt": "1/250",
        "study.seeds": "5, 6",
        "study.feature_mode": "per-timestep",
        "sir.slicing_mode": "equal-count",
        "bounds.rho_open": "false",
    })
    assert settings.sim.dt == pytest.approx(0.004)
    assert settings.study.seeds == [5, 6]
    assert settings.study.feature_mode is FeatureMode.PER_TIMESTEP
    assert settings.sir.slicing_mode is SlicingMode.EQUAL_COUNT
    assert settings.bounds.rho_open is False


def test_unknown_key_suggests_nearest():
    with pytest.raises(UsageError) as info:
        settings_from_flat({"sim.sed": "1"})
    assert "sim.seed" in str(info.value)
    assert info.value.stage == "usage"


@pytest.mark.parametrize(
    "key, value",
    [("sim.n_steps", "0"), ("model.rho", "1.5"), ("bounds.mu", "0.1, -0.1"), ("study.x0", "1, 2"), ("sim.dt", "1/0")],
)
def test_invalid_values_are_usage_errors(key, value):
    with pytest.raises(UsageError):
        settings_from_flat({key: value})


def test_flat_text_reloads_to_same_settings():
    settings = Settings().with_overrides({"sim.seed": "123", "study.n_list": "5, 10"})
    reloaded = settings_from_flat(parse_flat_config(settings.to_flat_text()))
    assert reloaded == settings
    assert reloaded.bounds.kappa[1] == float("inf")


def test_load_settings_file_then_overrides(tmp_path):
    config = tmp_path / "base.cfg"
    config.write_text("sim.seed = 5\nsim.n_paths = 3\n", encoding="utf-8")
    settings = load_settings(config, {"sim.seed": "42"})
    assert settings.sim.seed == 42
    assert settings.sim.n_paths == 3


def test_load_settings_from_environment(tmp_path, monkeypatch):
    config = tmp_path / "env.cfg"
    config.write_text("optim.max_iters = 7\n", encoding="utf-8")
    monkeypatch.setenv("SLICED_CONFIG", str(config))
    assert load_settings().optim.max_iters == 7


def test_missing_config_file(tmp_path):
    with pytest.raises(UsageError):
        load_settings(tmp_path / "nope.cfg")


def test_workers_default_from_environment(monkeypatch):
    monkeypatch.setenv("SLICED_WORKERS", "4")
    assert Settings().study.workers == 4
