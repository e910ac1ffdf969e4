# backend/tests/test_heston.py
import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.core.heston import (
    HestonParams,
    SimConfig,
    draw_noise,
    resimulate,
    simulate_paths,
    variance_moments,
)
from app.errors import DimensionMismatchError, InvalidInputError


def test_path_layout_and_invariants(short_paths, short_config):
    assert short_paths.S.shape == (4, 51)
    assert short_paths.V.shape == (4, 51)
    assert short_paths.Q.shape == (4, 50)
    assert_array_equal(short_paths.S[:, 0], short_config.s0)
    assert_array_equal(short_paths.V[:, 0], short_config.v0)
    assert (short_paths.V >= 0).all()
    assert_array_equal(short_paths.Q, short_paths.S[:, 1:] / short_paths.S[:, :-1])
    assert short_paths.noise.shape == (2, 4, 50)


def test_paths_are_read_only(short_paths):
    with pytest.raises(ValueError):
        short_paths.S[0, 0] = 1.0


def test_same_seed_is_bit_identical(true_params, short_config):
    first = simulate_paths(true_params, short_config)
    second = simulate_paths(true_params, short_config)
    assert_array_equal(first.S, second.S)
    assert_array_equal(first.V, second.V)


def test_path_stream_does_not_depend_on_path_count(true_params, short_config):
    few = simulate_paths(true_params, dataclasses.replace(short_config, n_paths=2))
    many = simulate_paths(true_params, dataclasses.replace(short_config, n_paths=5))
    assert_array_equal(few.S, many.S[:2])
    assert_array_equal(draw_noise(7, 2, 50), draw_noise(7, 5, 50)[:, :2])


def test_different_seeds_differ(true_params, short_config):
    other = simulate_paths(true_params, dataclasses.replace(short_config, seed=8))
    assert not np.array_equal(simulate_paths(true_params, short_config).S, other.S)


def test_variance_fixed_point_without_vol_of_vol():
    params = HestonParams(mu=0.03, kappa=3.0, theta=0.05, sigma=0.0, rho=-0.5)
    paths = simulate_paths(params, SimConfig(v0=0.05, n_steps=20, n_paths=3, seed=1))
    assert_array_equal(paths.V, 0.05)


def test_single_deterministic_variance_step():
    params = HestonParams(mu=0.03, kappa=5.0, theta=0.05, sigma=0.0, rho=0.0)
    paths = simulate_paths(params, SimConfig(v0=0.0, n_steps=3, n_paths=2, seed=1))
    assert_allclose(paths.V[:, 1], 0.001, rtol=1e-12)


def test_zero_noise_gives_deterministic_prices(true_params):
    config = SimConfig(n_steps=30, n_paths=2, seed=3)
    paths = simulate_paths(true_params, config, noise=np.zeros((2, 2, 30)))
    expected = config.s0 * (1 + true_params.mu * config.dt) ** np.arange(31)
    assert_allclose(paths.S, np.tile(expected, (2, 1)), rtol=1e-12)


def test_noise_override_shape_is_checked(true_params):
    with pytest.raises(DimensionMismatchError):
        simulate_paths(true_params, SimConfig(n_steps=10, n_paths=2), noise=np.zeros((2, 2, 9)))


@pytest.mark.parametrize(
    "overrides",
    [{"dt": 0.0}, {"n_paths": 0}, {"n_steps": 0}, {"s0": -1.0}, {"v0": -0.1}],
)
def test_invalid_config_is_rejected(true_params, overrides):
    with pytest.raises(InvalidInputError):
        simulate_paths(true_params, dataclasses.replace(SimConfig(), **overrides))


def test_rho_outside_unit_interval_is_rejected():
    with pytest.raises(InvalidInputError):
        simulate_paths(HestonParams(0.03, 5.0, 0.05, 0.2, 1.0), SimConfig(n_steps=5))


def test_feller_predicate(true_params):
    assert true_params.feller_ok()
    assert not HestonParams(0.0, 0.1, 0.01, 0.3, 0.0).feller_ok()


def test_validate_accepts_feller_violation(true_params):
    true_params.validate()
    HestonParams(0.0, 0.1, 0.01, 0.3, 0.0).validate()


@pytest.mark.parametrize(
    "overrides",
    [{"kappa": 0.0}, {"theta": -0.01}, {"sigma": 0.0}, {"rho": 1.0}, {"rho": -1.0}, {"mu": np.nan}],
)
def test_validate_rejects_invalid_params(true_params, overrides):
    with pytest.raises(InvalidInputError) as info:
        dataclasses.replace(true_params, **overrides).validate()
    assert info.value.stage == "params"
    assert next(iter(overrides)) in str(info.value)


def test_resimulate_with_same_params_reproduces_paths(true_params, short_paths):
    again = resimulate(short_paths, true_params)
    assert_array_equal(again.S, short_paths.S)
    assert_array_equal(again.V, short_paths.V)


def test_resimulate_needs_noise(true_params, short_paths):
    stripped = dataclasses.replace(short_paths, noise=None)
    with pytest.raises(InvalidInputError):
        resimulate(stripped, true_params)


class TestVarianceMoments:
    def test_mean_at_fixed_point(self, true_params):
        for t in (0.0, 0.5, 3.0):
            assert variance_moments(true_params, true_params.theta, t).mean == pytest.approx(0.05)

    def test_mean_decays_to_theta(self, true_params):
        assert abs(variance_moments(true_params, 0.01, 1000.0).mean - 0.05) <= 1e-12

    def test_stationary_variance(self, true_params):
        assert variance_moments(true_params, 0.01, 1.0).stationary_variance == pytest.approx(2.0e-4)

    def test_negative_time_is_rejected(self, true_params):
        with pytest.raises(InvalidInputError):
            variance_moments(true_params, 0.01, -1.0)


def test_increment_correlation_matches_rho(true_params):
    config = SimConfig(n_steps=250, n_paths=2000, seed=11)
    paths = simulate_paths(true_params, config)
    v = paths.V[:, :-1]
    a = paths.Q - 1 - true_params.mu * config.dt
    b = paths.V[:, 1:] - v - true_params.kappa * (true_params.theta - v) * config.dt
    corr = np.corrcoef(a.ravel(), b.ravel())[0, 1]
    assert abs(corr - true_params.rho) <= 0.05


@pytest.mark.slow
def test_terminal_variance_moments_match_monte_carlo(true_params):
    config = SimConfig(s0=10.0, v0=0.01, n_steps=250, dt=1 / 250, n_paths=100_000, seed=2024)
    v_T = simulate_paths(true_params, config).V[:, -1]
    moments = variance_moments(true_params, config.v0, 1.0)

    standard_error = v_T.std(ddof=1) / np.sqrt(v_T.size)
    assert abs(v_T.mean() - moments.mean) <= 3 * standard_error
    assert v_T.var(ddof=1) == pytest.approx(moments.stationary_variance, rel=0.15)
