# backend/tests/test_optimizer.py
import logging
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.config.settings import BoundsSettings, OptimSettings, DEFAULT_INITIAL_GUESS
from app.core.heston import HestonParams, SimConfig, simulate_paths
from app.core.likelihood import build_reduced_model, direct_nll
from app.core.optimizer import (
    ParamBounds,
    TerminationReason,
    finite_difference_gradient,
    fit_direct,
    fit_sliced,
    minimize,
    projected_gradient_norm,
)
from app.core.sir import FeatureMatrix, SirConfig, SirProjection
from app.errors import InvalidInputError

UNIT_BOX = ParamBounds(lower=np.zeros(5), upper=np.ones(5))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


class TestParamBounds:
    def test_default_box(self):
        box = ParamBounds.default()
        assert_allclose(box.lower[:4], [-0.05, 5.0, 0.01, 0.00001])
        assert box.upper[1] == 1e3
        assert box.lower[4] == pytest.approx(-0.9 + 1e-8)
        assert box.upper[4] == pytest.approx(0.7 - 1e-8)

    def test_closed_rho(self):
        box = ParamBounds.from_settings(BoundsSettings(rho_open=False), kappa_cap=50.0)
        assert box.lower[4] == -0.9
        assert box.upper[1] == 50.0

    def test_rejects_inverted_box(self):
        with pytest.raises(InvalidInputError):
            ParamBounds(lower=np.ones(5), upper=np.zeros(5))

    def test_interior(self):
        inner = UNIT_BOX.interior(1e-3)
        assert_allclose(inner.lower, 1e-3)
        assert_allclose(inner.upper, 1 - 1e-3)


class TestFiniteDifferenceGradient:
    def test_matches_analytic_gradient(self, rng):
        def f(x):
            return float(np.sum(np.sin(x[:-1]) * x[1:] ** 2) + np.exp(0.1 * x).sum())

        def grad(x):
            g = 0.1 * np.exp(0.1 * x)
            g[:-1] += np.cos(x[:-1]) * x[1:] ** 2
            g[1:] += 2 * np.sin(x[:-1]) * x[1:]
            return g

        for _ in range(100):
            x = rng.uniform(-2, 2, size=5)
            assert_allclose(finite_difference_gradient(f, x), grad(x), rtol=1e-5, atol=1e-8)

    def test_stencil_is_cut_at_bounds(self):
        slope = np.array([1.0, -2.0, 3.0, 0.5, 4.0])
        x = np.zeros(5)
        g = finite_difference_gradient(lambda z: float(slope @ z), x, lower=np.zeros(5), upper=np.ones(5))
        assert_allclose(g, slope, rtol=1e-8)

    def test_one_sided_fallback(self):
        def f(x):
            return float(x[0]) if x[0] >= 0.5 else math.inf

        g = finite_difference_gradient(f, np.array([0.5, 0, 0, 0, 0]))
        assert g[0] == pytest.approx(1.0)


class TestMinimize:
    def test_interior_quadratic(self):
        c = np.array([0.01, 6.0, 0.03, 0.1, 0.2])
        result = minimize(lambda x: float(np.sum((x - c) ** 2)), DEFAULT_INITIAL_GUESS, ParamBounds.default())
        assert result.converged
        assert_allclose(result.x, c, atol=1e-6)

    def test_exterior_quadratic_lands_on_projection(self):
        c = np.array([2.0, -1.0, 0.5, 0.25, 3.0])
        result = minimize(lambda x: float(np.sum((x - c) ** 2)), np.full(5, 0.5), UNIT_BOX)
        assert_allclose(result.x, np.clip(c, 0, 1), atol=1e-6)

    def test_rosenbrock(self):
        box = ParamBounds(lower=np.array([0, 0, 0, 0, -1.0]), upper=np.array([2, 6, 2, 2, 2.0]))
        result = minimize(rosenbrock, DEFAULT_INITIAL_GUESS, box)
        assert result.nll <= 1e-8
        assert_allclose(result.x, 1.0, atol=1e-2)

    def test_iterates_stay_inside_box(self):
        seen = []

        def objective(x):
            seen.append(np.array(x, copy=True))
            return rosenbrock(x)

        box = ParamBounds(lower=np.array([0, 0, 0, 0, -1.0]), upper=np.array([2, 6, 2, 2, 2.0]))
        result = minimize(objective, DEFAULT_INITIAL_GUESS, box)
        points = np.array(seen)
        assert (points >= box.lower).all() and (points <= box.upper).all()
        assert box.contains(result.x)
        assert result.n_evaluations == len(seen)

    def test_start_is_clipped_into_box(self):
        result = minimize(lambda x: float(np.sum(x**2)), np.full(5, -3.0), UNIT_BOX)
        assert UNIT_BOX.contains(result.x)
        assert_allclose(result.x, 0.0, atol=1e-6)

    def test_non_finite_start(self):
        result = minimize(lambda x: math.inf, np.full(5, 0.5), UNIT_BOX)
        assert result.termination_reason is TerminationReason.NON_FINITE_OBJECTIVE
        assert not result.converged
        assert result.n_iterations == 0

    def test_non_finite_region_is_avoided(self):
        def objective(x):
            if x[0] > 0.6:
                return math.nan
            return float(np.sum((x - 0.9) ** 2))

        result = minimize(objective, np.full(5, 0.2), UNIT_BOX)
        assert math.isfinite(result.nll)
        assert result.x[0] <= 0.6

    def test_cliff_next_to_start_is_backtracked(self):
        # steep descent toward a corner where the objective stops being finite
        target = np.array([0.9, 0.9, 0.9, 0.9, 0.9])

        def objective(x):
            if x[3] > 0.5:
                return math.inf
            return 1e6 * float(np.sum((x - target) ** 2))

        start = np.full(5, 0.2)
        f_start = objective(start)
        result = minimize(objective, start, UNIT_BOX)
        assert math.isfinite(result.nll)
        assert result.nll < 0.5 * f_start
        assert not np.allclose(result.x, start)
        assert 0.4 < result.x[3] <= 0.5
        assert_allclose(result.x[[0, 1, 2, 4]], 0.9, atol=1e-3)

    def test_no_finite_descent_is_not_convergence(self):
        def objective(x):
            return float(np.sum(x)) if np.all(x >= 0.5) else math.nan

        start = np.full(5, 0.5)
        result = minimize(objective, start, UNIT_BOX)
        assert result.termination_reason is TerminationReason.NON_FINITE_OBJECTIVE
        assert not result.converged
        assert result.nll == pytest.approx(2.5)
        assert_array_equal(result.x, start)

    def test_projected_gradient_norm(self):
        x = np.array([0.0, 0.5, 1.0, 0.5, 0.5])
        grad = np.array([3.0, 0.0, -2.0, 0.0, 0.0])
        assert projected_gradient_norm(x, grad, UNIT_BOX) == 0.0
        grad[1] = 0.25
        assert projected_gradient_norm(x, grad, UNIT_BOX) == pytest.approx(0.25)

    def test_iteration_limit(self):
        result = minimize(rosenbrock, DEFAULT_INITIAL_GUESS, ParamBounds(np.full(5, -2.0), np.full(5, 6.0)),
                          OptimSettings(max_iters=2))
        assert result.termination_reason is TerminationReason.MAX_ITERATIONS
        assert not result.converged

    def test_deterministic(self):
        runs = [minimize(rosenbrock, DEFAULT_INITIAL_GUESS, ParamBounds(np.zeros(5), np.full(5, 6.0))) for _ in range(2)]
        assert_array_equal(runs[0].x, runs[1].x)
        assert runs[0].n_evaluations == runs[1].n_evaluations


class TestFitDirect:
    def test_descends_from_initial_guess(self, true_params):
        paths = simulate_paths(true_params, SimConfig(n_steps=100, n_paths=5, seed=3))
        start = direct_nll(HestonParams.from_array(DEFAULT_INITIAL_GUESS), paths).value
        bounds = ParamBounds.default()
        result = fit_direct(paths, DEFAULT_INITIAL_GUESS, bounds)
        assert result.nll <= start
        assert bounds.contains(result.x)
        assert result.wall_time_seconds > 0

    def test_zero_noise_recovers_drift(self):
        truth = HestonParams(mu=0.03, kappa=6.0, theta=0.04, sigma=0.2, rho=-0.5)
        config = SimConfig(n_steps=250, n_paths=2, seed=1)
        paths = simulate_paths(truth, config, noise=np.zeros((2, 2, 250)))
        result = fit_direct(paths, [0.0, 5.5, 0.045, 0.1, 0.0], ParamBounds.default())
        assert abs(result.params.mu - truth.mu) <= 1e-3

    def test_feller_warning(self, caplog, true_params):
        paths = simulate_paths(true_params, SimConfig(n_steps=20, n_paths=1, seed=5))
        box = ParamBounds(
            lower=np.array([-0.05, 0.1, 0.01, 0.25, -0.9]), upper=np.array([0.05, 0.2, 0.011, 0.3, 0.7])
        )
        with caplog.at_level(logging.WARNING):
            fit_direct(paths, [0.0, 0.15, 0.0105, 0.28, 0.0], box, settings=OptimSettings(max_iters=5))
        assert "Feller" in caplog.text


class TestFitSliced:
    def test_identity_projection_matches_moments(self, true_params):
        model = build_reduced_model(true_params, dt=1.0)
        rng = np.random.default_rng(77)
        X = rng.multivariate_normal(model.mu_X, model.Sigma_X, size=10_000)
        fm = FeatureMatrix(X, X[:, 0])

        result, proj = fit_sliced(
            fm, SirConfig(), DEFAULT_INITIAL_GUESS, ParamBounds.default(), dt=1.0,
            projection=SirProjection.identity(6),
        )
        fitted = result.params
        assert proj.n_directions == 6
        assert fitted.theta == pytest.approx(X[:, 1].mean(), rel=0.05)
        implied = fitted.sigma**2 * fitted.theta / (2 * fitted.kappa)
        assert implied == pytest.approx(X[:, 1].var(), rel=0.05)

    def test_single_row_does_not_crash(self, true_params):
        X = np.array([[0.02, 5.2, 0.04, 0.1, -0.6, 0.012]])
        result, proj = fit_sliced(
            FeatureMatrix(X, [1.0001]), SirConfig(), DEFAULT_INITIAL_GUESS, ParamBounds.default(),
            settings=OptimSettings(max_iters=20),
        )
        assert proj.degenerate
        assert result.termination_reason in set(TerminationReason)
