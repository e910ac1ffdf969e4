# backend/app/core/likelihood.py
"""
Negative log-likelihoods for the two estimators.

``direct_nll``: bivariate normal Euler transition of (Q, v) summed over all
paths and steps. ``reduced_nll``: multivariate normal model of the
SIR-reduced feature rows, with mean and covariance pushed through the same
affine map the projection applies to the data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..errors import DimensionMismatchError, InvalidInputError
from .heston import HestonParams, PathSet
from .sir import SirProjection

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
DEFAULT_DELTA = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NllValue:
    value: float
    n_terms: int
    clamped_terms: int = 0
    finite: bool = True

    @classmethod
    def sentinel(cls, n_terms: int, clamped_terms: int = 0) -> "NllValue":
        return cls(value=math.inf, n_terms=n_terms, clamped_terms=clamped_terms, finite=False)


@dataclass(frozen=True, eq=False)
class ReducedModel:
    mu_X: np.ndarray
    Sigma_X: np.ndarray
    delta: float
    dt: float


def direct_nll(params: HestonParams, paths: PathSet) -> NllValue:
    """
    Negative log-likelihood of all transitions t -> t+1 of all paths::

        Q'  | v ~ N(1 + mu dt, v dt)
        v'  | v ~ N(v + kappa (theta - v) dt, sigma^2 v dt),  corr rho
    """
    n_terms = paths.n_paths * paths.n_steps
    if not (params.sigma > 0 and -1.0 < params.rho < 1.0):
        return NllValue.sentinel(n_terms)

    dt = paths.dt
    v_raw = paths.V[:, :-1]
    clamped = int(np.count_nonzero(v_raw < VARIANCE_FLOOR))
    v = np.maximum(v_raw, VARIANCE_FLOOR)

    one_minus_rho2 = 1.0 - params.rho**2
    sd_q = np.sqrt(v * dt)
    sd_v = params.sigma * sd_q
    a = (paths.Q - 1.0 - params.mu * dt) / sd_q
    b = (paths.V[:, 1:] - v - params.kappa * (params.theta - v) * dt) / sd_v

    quadratic = (a * a - 2.0 * params.rho * a * b + b * b) / (2.0 * one_minus_rho2)
    terms = LOG_2PI + np.log(sd_q) + np.log(sd_v) + 0.5 * math.log(one_minus_rho2) + quadratic

    # Per-path sums first, then across paths: fixed order regardless of caller.
    value = float(np.sum(np.sum(terms, axis=1)))
    if clamped:
        logger.debug("direct_nll clamped %d variance values to %g", clamped, VARIANCE_FLOOR)
    if not math.isfinite(value):
        return NllValue.sentinel(n_terms, clamped)
    return NllValue(value=value, n_terms=n_terms, clamped_terms=clamped)


def build_reduced_model(
    params: HestonParams, d: int = 6, dt: float = 1.0 / 250.0, delta: float = DEFAULT_DELTA
) -> ReducedModel:
    """
    Model-implied moments of a feature row ordered (Q, v, mu, kappa, theta, rho).
    The stationary variance ``sigma^2 theta / (2 kappa)`` is not rescaled by dt.
    """
    if d < 2:
        raise InvalidInputError(f"reduced model needs d >= 2 (got {d})", stage="reduced_model")
    if not delta > 0:
        raise InvalidInputError(f"delta must be positive (got {delta})", stage="reduced_model")
    if params.kappa == 0:
        raise InvalidInputError("kappa = 0 leaves sigma^2 theta / (2 kappa) undefined", stage="reduced_model")

    var_v = params.sigma**2 * params.theta / (2.0 * params.kappa)

    mu_X = np.zeros(d)
    mu_X[0] = 1.0 + params.mu * dt
    mu_X[1] = params.theta

    Sigma_X = np.diag(np.full(d, delta))
    Sigma_X[0, 0] = params.theta * dt
    Sigma_X[1, 1] = var_v
    Sigma_X[0, 1] = Sigma_X[1, 0] = params.rho * var_v
    return ReducedModel(mu_X=mu_X, Sigma_X=Sigma_X, delta=delta, dt=dt)


def reduced_nll(
    params: HestonParams,
    X_reduced: np.ndarray,
    proj: SirProjection,
    dt: float = 1.0 / 250.0,
    delta: float = DEFAULT_DELTA,
) -> NllValue:
    X_reduced = np.atleast_2d(np.asarray(X_reduced, dtype=float))
    n, B = X_reduced.shape
    if B != proj.n_directions:
        raise DimensionMismatchError(
            f"reduced data has {B} columns but the projection keeps {proj.n_directions}",
            stage="reduced_nll",
        )
    if n < 1:
        raise InvalidInputError("reduced data has no rows", stage="reduced_nll")
    if params.kappa == 0:
        return NllValue.sentinel(n)

    model = build_reduced_model(params, proj.d, dt, delta)
    A = proj.transform
    mu_R = (model.mu_X - proj.sample_mean) @ A
    Sigma_R = A.T @ model.Sigma_X @ A
    Sigma_R = 0.5 * (Sigma_R + Sigma_R.T)

    try:
        L = linalg.cholesky(Sigma_R, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return NllValue.sentinel(n)

    diag = np.diag(L)
    if not (np.all(np.isfinite(diag)) and np.all(diag > 0)):
        return NllValue.sentinel(n)

    residuals = linalg.solve_triangular(L, (X_reduced - mu_R).T, lower=True, check_finite=False)
    value = (
        0.5 * n * B * LOG_2PI
        + n * float(np.sum(np.log(diag)))
        + 0.5 * float(np.sum(residuals * residuals))
    )
    if not math.isfinite(value):
        return NllValue.sentinel(n)
    return NllValue(value=value, n_terms=n)
