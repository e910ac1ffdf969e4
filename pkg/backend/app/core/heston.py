# backend/app/core/heston.py
"""
Heston paths under Euler-Maruyama with full truncation of the variance.

Recursion per step, with ``v`` the already floored variance::

    v'  = max(0, v + kappa (theta - v) dt + sigma sqrt(v dt) Z1)
    S'  = S (1 + mu dt + sqrt(v dt) (rho Z1 + sqrt(1 - rho^2) Z2))
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ..errors import DimensionMismatchError, InvalidInputError

logger = logging.getLogger(__name__)

PARAM_NAMES = ("mu", "kappa", "theta", "sigma", "rho")


@dataclass(frozen=True)
class HestonParams:
    mu: float
    kappa: float
    theta: float
    sigma: float
    rho: float

    def feller_ok(self) -> bool:
        return 2.0 * self.kappa * self.theta >= self.sigma**2

    def validate(self) -> None:
        """Reject parameters the recursion cannot use. A Feller violation is allowed."""
        problems = []
        for name in ("kappa", "theta", "sigma"):
            value = getattr(self, name)
            if not value > 0:
                problems.append(f"{name} must be positive (got {value})")
        if not -1.0 < self.rho < 1.0:
            problems.append(f"rho must lie in (-1, 1) (got {self.rho})")
        if not np.isfinite(self.mu):
            problems.append(f"mu must be finite (got {self.mu})")
        if problems:
            raise InvalidInputError("; ".join(problems), stage="params")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.kappa, self.theta, self.sigma, self.rho], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "HestonParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (5,):
            raise DimensionMismatchError(
                f"expected 5 parameters, got {values.shape[0]}", stage="params"
            )
        return cls(*(float(value) for value in values))


@dataclass(frozen=True)
class SimConfig:
    s0: float = 10.0
    v0: float = 0.01
    n_steps: int = 250
    dt: float = 1.0 / 250.0
    n_paths: int = 1
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if not self.dt > 0:
            problems.append(f"dt must be positive (got {self.dt})")
        if not self.s0 > 0:
            problems.append(f"s0 must be positive (got {self.s0})")
        if not self.v0 >= 0:
            problems.append(f"v0 must be non-negative (got {self.v0})")
        if self.n_steps < 1:
            problems.append(f"n_steps must be at least 1 (got {self.n_steps})")
        if self.n_paths < 1:
            problems.append(f"n_paths must be at least 1 (got {self.n_paths})")
        if not 0 <= self.seed < 2**64:
            problems.append(f"seed must fit in 64 bits (got {self.seed})")
        if problems:
            raise InvalidInputError("; ".join(problems), stage="simulate")


@dataclass(frozen=True, eq=False)
class PathSet:
    """
    Simulated trajectories. ``S`` and ``V`` are ``n_paths x (n_steps + 1)``,
    ``Q`` is ``n_paths x n_steps`` with ``Q[:, t] = S[:, t + 1] / S[:, t]``.
    ``noise`` holds the standard-normal drivers with shape ``(2, n_paths, n_steps)``
    (Z1 then Z2), or ``None`` for paths read back from CSV.
    """

    S: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    dt: float
    seed: Optional[int] = None
    noise: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for array in (self.S, self.Q, self.V, self.noise):
            if array is not None:
                array.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    @property
    def n_steps(self) -> int:
        return self.Q.shape[1]

    @property
    def z1(self) -> np.ndarray:
        return self._require_noise()[0]

    @property
    def z2(self) -> np.ndarray:
        return self._require_noise()[1]

    def _require_noise(self) -> np.ndarray:
        if self.noise is None:
            raise InvalidInputError(
                "paths carry no noise draws; re-simulation needs paths from simulate_paths",
                stage="resimulate",
            )
        return self.noise


class VarianceMoments(NamedTuple):
    mean: float
    stationary_variance: float


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """PCG64 substream for one path, independent of how many paths are drawn."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(path_index,))
    return np.random.Generator(np.random.PCG64(sequence))


def draw_noise(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    noise = np.empty((2, n_paths, n_steps), dtype=float)
    for index in range(n_paths):
        noise[:, index, :] = path_generator(seed, index).standard_normal((2, n_steps))
    return noise


def _check_params(params: HestonParams) -> None:
    if not -1.0 < params.rho < 1.0:
        raise InvalidInputError(f"rho must lie in (-1, 1) (got {params.rho})", stage="simulate")
    if params.kappa < 0 or params.theta < 0 or params.sigma < 0:
        raise InvalidInputError(
            "kappa, theta and sigma must be non-negative for simulation", stage="simulate"
        )


def _euler_recursion(
    params: HestonParams,
    s0: np.ndarray,
    v0: np.ndarray,
    dt: float,
    noise: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    n_paths, n_steps = noise.shape[1], noise.shape[2]
    S = np.empty((n_paths, n_steps + 1), dtype=float)
    V = np.empty((n_paths, n_steps + 1), dtype=float)
    S[:, 0] = s0
    V[:, 0] = np.maximum(v0, 0.0)

    z1, z2 = noise[0], noise[1]
    rho_bar = np.sqrt(1.0 - params.rho**2)
    for t in range(n_steps):
        v = V[:, t]
        root = np.sqrt(v * dt)
        V[:, t + 1] = np.maximum(
            v + params.kappa * (params.theta - v) * dt + params.sigma * root * z1[:, t],
            0.0,
        )
        S[:, t + 1] = S[:, t] * (
            1.0 + params.mu * dt + root * (params.rho * z1[:, t] + rho_bar * z2[:, t])
        )
    return S, V


def _assemble(
    params: HestonParams,
    s0: np.ndarray,
    v0: np.ndarray,
    dt: float,
    noise: np.ndarray,
    seed: Optional[int],
) -> PathSet:
    S, V = _euler_recursion(params, s0, v0, dt, noise)
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = S[:, 1:] / S[:, :-1]
    return PathSet(S=S, Q=Q, V=V, dt=dt, seed=seed, noise=noise)


def simulate_paths(
    params: HestonParams,
    config: SimConfig,
    noise: Optional[np.ndarray] = None,
) -> PathSet:
    """
    Simulate ``config.n_paths`` paths. ``noise`` overrides the seeded draws and
    must have shape ``(2, n_paths, n_steps)``.
    """
    config.validate()
    _check_params(params)

    if noise is None:
        noise = draw_noise(config.seed, config.n_paths, config.n_steps)
    else:
        noise = np.array(noise, dtype=float)
        expected = (2, config.n_paths, config.n_steps)
        if noise.shape != expected:
            raise DimensionMismatchError(
                f"noise override has shape {noise.shape}, expected {expected}",
                stage="simulate",
            )

    logger.debug(
        "Simulating %d paths x %d steps (seed=%d, dt=%g)",
        config.n_paths,
        config.n_steps,
        config.seed,
        config.dt,
    )
    s0 = np.full(config.n_paths, config.s0, dtype=float)
    v0 = np.full(config.n_paths, config.v0, dtype=float)
    return _assemble(params, s0, v0, config.dt, noise, config.seed)


def resimulate(paths: PathSet, params: HestonParams) -> PathSet:
    """Re-run the recursion on ``paths``' own noise and initial state (common random numbers)."""
    _check_params(params)
    return _assemble(params, paths.S[:, 0], paths.V[:, 0], paths.dt, paths._require_noise(), paths.seed)


def variance_moments(params: HestonParams, v0: float, t: float) -> VarianceMoments:
    if t < 0:
        raise InvalidInputError(f"t must be non-negative (got {t})", stage="variance_moments")
    if not params.kappa > 0:
        raise InvalidInputError("kappa must be positive", stage="variance_moments")
    mean = params.theta + (v0 - params.theta) * np.exp(-params.kappa * t)
    stationary = params.sigma**2 * params.theta / (2.0 * params.kappa)
    return VarianceMoments(mean=float(mean), stationary_variance=float(stationary))


def with_dt(paths: PathSet, dt: float) -> PathSet:
    return dataclasses.replace(paths, dt=dt)
