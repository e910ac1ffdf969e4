# backend/app/core/optimizer.py
"""
Box-constrained quasi-Newton minimization (SciPy's L-BFGS-B) with central
finite-difference gradients, plus the two estimators built on it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import OptimizeResult
from scipy.optimize import minimize as scipy_minimize

from ..config.settings import BoundsSettings, OptimSettings
from ..errors import DimensionMismatchError, InvalidInputError
from .enums import ProjectionMode
from .heston import HestonParams, PathSet, with_dt
from .likelihood import DEFAULT_DELTA, direct_nll, reduced_nll
from .sir import FeatureMatrix, SirConfig, SirProjection, fit_sir, reduce

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]

OPEN_BOUND_SHRINK = 1e-8
ARMIJO_SLOPE = 1e-4
MAX_BACKTRACKS = 60


class TerminationReason(str, Enum):
    GRADIENT_TOLERANCE = "gradient-tolerance"
    STEP_TOLERANCE = "step-tolerance"
    MAX_ITERATIONS = "max-iterations"
    NON_FINITE_OBJECTIVE = "non-finite-objective"


@dataclass(frozen=True, eq=False)
class ParamBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise DimensionMismatchError("lower and upper bounds differ in length", stage="bounds")
        if not np.all(lower < upper):
            raise InvalidInputError("every lower bound must be below its upper bound", stage="bounds")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_settings(cls, bounds: BoundsSettings, kappa_cap: float = 1e3) -> "ParamBounds":
        """Study box with kappa's infinite upper end capped and rho's open ends shrunk."""
        pairs = [bounds.mu, bounds.kappa, bounds.theta, bounds.sigma, bounds.rho]
        lower = np.array([pair[0] for pair in pairs], dtype=float)
        upper = np.array([pair[1] for pair in pairs], dtype=float)
        upper[1] = min(upper[1], kappa_cap)
        if bounds.rho_open:
            lower[4] += OPEN_BOUND_SHRINK
            upper[4] -= OPEN_BOUND_SHRINK
        return cls(lower=lower, upper=upper)

    @classmethod
    def default(cls, kappa_cap: float = 1e3) -> "ParamBounds":
        return cls.from_settings(BoundsSettings(), kappa_cap)

    def interior(self, eps: float) -> "ParamBounds":
        width = self.upper - self.lower
        margin = np.where(np.isfinite(width), eps * width, eps)
        return ParamBounds(lower=self.lower + margin, upper=self.upper - margin)

    def clip(self, x: Sequence[float]) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass(frozen=True, eq=False)
class OptimResult:
    x: np.ndarray
    nll: float
    n_iterations: int
    n_evaluations: int
    converged: bool
    termination_reason: TerminationReason
    message: str = ""
    clamped_terms: int = 0
    wall_time_seconds: float = 0.0

    @property
    def params(self) -> HestonParams:
        return HestonParams.from_array(self.x)


@dataclass
class _RunState:
    n_evaluations: int = 0
    n_iterations: int = 0
    reason: Optional[TerminationReason] = None
    previous_x: Optional[np.ndarray] = None
    best_x: Optional[np.ndarray] = None
    best_f: float = math.inf
    f_start: float = math.inf
    non_finite_trials: int = 0

    @property
    def made_progress(self) -> bool:
        return self.best_f < self.f_start


def finite_difference_gradient(
    objective: Objective,
    x: np.ndarray,
    rel_step: float = 1e-6,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Central differences with ``h_i = rel_step * max(|x_i|, 1)``. The stencil is
    cut at the bounds, and a side that evaluates non-finite is dropped in favour
    of a one-sided difference.
    """
    x = np.asarray(x, dtype=float)
    lower = np.full_like(x, -np.inf) if lower is None else lower
    upper = np.full_like(x, np.inf) if upper is None else upper
    f_center: Optional[float] = None
    grad = np.zeros_like(x)

    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        hi_x, lo_x = x.copy(), x.copy()
        hi_x[i] = min(x[i] + h, upper[i])
        lo_x[i] = max(x[i] - h, lower[i])
        f_hi, f_lo = objective(hi_x), objective(lo_x)

        if math.isfinite(f_hi) and math.isfinite(f_lo):
            grad[i] = (f_hi - f_lo) / (hi_x[i] - lo_x[i])
            continue
        if f_center is None:
            f_center = objective(x)
        if math.isfinite(f_hi) and hi_x[i] > x[i]:
            grad[i] = (f_hi - f_center) / (hi_x[i] - x[i])
        elif math.isfinite(f_lo) and lo_x[i] < x[i]:
            grad[i] = (f_center - f_lo) / (x[i] - lo_x[i])
        else:
            grad[i] = 0.0
    return grad


def projected_gradient_norm(x: np.ndarray, grad: np.ndarray, box: ParamBounds) -> float:
    """Infinity norm of ``P(x - g) - x``, zero at a box-constrained stationary point."""
    return float(np.max(np.abs(box.clip(x - grad) - x)))


class _Backtrack(NamedTuple):
    x: Optional[np.ndarray]
    f: float
    saw_finite: bool


def _backtrack(
    evaluate: Objective, x: np.ndarray, fx: float, grad: np.ndarray, box: ParamBounds
) -> _Backtrack:
    """
    Halve the projected steepest-descent step from ``x`` until the objective is
    finite and satisfies the Armijo condition.
    """
    direction = box.clip(x - grad) - x
    saw_finite = False
    alpha = 1.0
    for _ in range(MAX_BACKTRACKS):
        trial = box.clip(x + alpha * direction)
        if np.array_equal(trial, x):
            break
        value = evaluate(trial)
        if math.isfinite(value):
            saw_finite = True
            if value <= fx + ARMIJO_SLOPE * float(grad @ (trial - x)) and value < fx:
                return _Backtrack(trial, value, True)
        alpha *= 0.5
    return _Backtrack(None, fx, saw_finite)


def _scipy_round(
    tracked: Objective,
    gradient: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    box: ParamBounds,
    settings: OptimSettings,
    state: _RunState,
) -> OptimizeResult:
    state.previous_x = x.copy()
    state.non_finite_trials = 0
    remaining = settings.max_iters - state.n_iterations

    def callback(intermediate_result: OptimizeResult) -> None:
        state.n_iterations += 1
        current = np.asarray(intermediate_result.x, dtype=float)
        step = np.max(np.abs(current - state.previous_x)) / max(np.max(np.abs(state.previous_x)), 1.0)
        state.previous_x = current.copy()
        if step > settings.step_tol:
            return
        # A step that goes nowhere before any descent is a stall, not convergence.
        if step > 0 and state.made_progress:
            state.reason = TerminationReason.STEP_TOLERANCE
        raise StopIteration

    return scipy_minimize(
        tracked,
        x,
        method="L-BFGS-B",
        jac=gradient,
        bounds=list(zip(box.lower, box.upper)),
        callback=callback,
        options={
            "maxcor": settings.memory,
            "gtol": settings.grad_tol,
            "ftol": settings.f_tol,
            "maxiter": remaining,
            "maxfun": max(15000, 50 * remaining),
            "maxls": settings.max_line_search,
        },
    )


def _stopped_on_f_reduction(result: OptimizeResult) -> bool:
    return "REL_REDUCTION" in str(result.message).upper()


def minimize(
    objective: Objective,
    x0: Sequence[float],
    bounds: ParamBounds,
    settings: Optional[OptimSettings] = None,
) -> OptimResult:
    """
    L-BFGS-B from ``x0`` inside ``bounds``.

    A non-finite trial point is shown to the line search as a finite wall just
    above the best value, so it backtracks. When a round stalls with such trials,
    or on a step that made no progress, the search bisects a projected-gradient
    step from the best point until the objective is finite and lower, then
    restarts L-BFGS-B there. ``converged`` means the projected gradient met
    ``grad_tol``, or a small step followed real descent.
    """
    settings = settings or OptimSettings()
    box = bounds.interior(settings.interior_eps)
    start = box.clip(x0)
    if not np.array_equal(start, np.asarray(x0, dtype=float)):
        logger.info("Initial guess clipped into the box interior: %s", np.array2string(start))

    state = _RunState()

    def counted(x: np.ndarray) -> float:
        state.n_evaluations += 1
        value = float(objective(x))
        return value if math.isfinite(value) else math.inf

    def evaluate(x: np.ndarray) -> float:
        value = counted(x)
        if value < state.best_f:
            state.best_x, state.best_f = np.array(x, copy=True), value
        return value

    f_start = evaluate(start)
    if not math.isfinite(f_start):
        logger.warning("Objective is not finite at the initial guess")
        return OptimResult(
            x=start,
            nll=math.inf,
            n_iterations=0,
            n_evaluations=state.n_evaluations,
            converged=False,
            termination_reason=TerminationReason.NON_FINITE_OBJECTIVE,
            message="objective not finite at x0",
        )
    state.f_start = f_start

    def tracked(x: np.ndarray) -> float:
        value = evaluate(x)
        if math.isfinite(value):
            return value
        state.non_finite_trials += 1
        return state.best_f + abs(state.best_f) + 1.0

    def gradient(x: np.ndarray) -> np.ndarray:
        return finite_difference_gradient(counted, x, settings.fd_step_rel, box.lower, box.upper)

    reason: Optional[TerminationReason] = None
    message = ""
    n_rounds = 0
    while reason is None:
        if state.n_iterations >= settings.max_iters:
            reason = TerminationReason.MAX_ITERATIONS
            break
        n_rounds += 1
        result = _scipy_round(tracked, gradient, state.best_x.copy(), box, settings, state)
        message = str(result.message)

        x, fx = state.best_x.copy(), state.best_f
        grad = gradient(x)
        if projected_gradient_norm(x, grad, box) <= settings.grad_tol:
            reason = TerminationReason.GRADIENT_TOLERANCE
        elif state.reason is not None:
            reason = state.reason
        elif state.n_iterations >= settings.max_iters:
            reason = TerminationReason.MAX_ITERATIONS
        elif _stopped_on_f_reduction(result) and state.non_finite_trials == 0 and state.made_progress:
            reason = TerminationReason.STEP_TOLERANCE
        else:
            found = _backtrack(evaluate, x, fx, grad, box)
            state.n_iterations += 1
            if found.x is None:
                if found.saw_finite:
                    reason = TerminationReason.STEP_TOLERANCE
                    message = "no descent step from the best point"
                else:
                    reason = TerminationReason.NON_FINITE_OBJECTIVE
                    message = "no finite point along the backtracked step"
            elif fx - found.f <= settings.f_tol * max(abs(fx), 1.0):
                reason = TerminationReason.STEP_TOLERANCE
            else:
                logger.debug("Restarting L-BFGS-B after a backtracked step (f=%.6g)", found.f)

    x_final, f_final = box.clip(state.best_x), state.best_f
    converged = math.isfinite(f_final) and (
        reason is TerminationReason.GRADIENT_TOLERANCE
        or (reason is TerminationReason.STEP_TOLERANCE and state.made_progress)
    )
    logger.info(
        "L-BFGS-B finished after %d iterations / %d evaluations in %d round(s): %s (f=%.6g)",
        state.n_iterations,
        state.n_evaluations,
        n_rounds,
        reason.value,
        f_final,
    )
    return OptimResult(
        x=x_final,
        nll=f_final,
        n_iterations=state.n_iterations,
        n_evaluations=state.n_evaluations,
        converged=converged,
        termination_reason=reason,
        message=message,
    )


def _warn_feller(params: HestonParams, label: str) -> None:
    if not params.feller_ok():
        logger.warning(
            "%s fit violates the Feller condition: 2*kappa*theta=%.4g < sigma^2=%.4g",
            label,
            2 * params.kappa * params.theta,
            params.sigma**2,
        )


def _with_timing(result: OptimResult, started: float, clamped_terms: int = 0) -> OptimResult:
    return OptimResult(
        x=result.x,
        nll=result.nll,
        n_iterations=result.n_iterations,
        n_evaluations=result.n_evaluations,
        converged=result.converged,
        termination_reason=result.termination_reason,
        message=result.message,
        clamped_terms=clamped_terms,
        wall_time_seconds=max(time.perf_counter() - started, 1e-9),
    )


def fit_direct(
    paths: PathSet,
    x0: Sequence[float],
    bounds: ParamBounds,
    dt: Optional[float] = None,
    settings: Optional[OptimSettings] = None,
) -> OptimResult:
    """Joint maximum likelihood over all paths. ``dt`` defaults to the paths' own step."""
    if dt is not None and dt != paths.dt:
        paths = with_dt(paths, dt)

    started = time.perf_counter()
    result = minimize(
        lambda x: direct_nll(HestonParams.from_array(x), paths).value, x0, bounds, settings
    )
    clamped = direct_nll(result.params, paths).clamped_terms
    result = _with_timing(result, started, clamped)

    if clamped:
        logger.warning("Direct fit clamped %d variance values at the optimum", clamped)
    _warn_feller(result.params, "Direct")
    return result


def fit_sliced(
    X: FeatureMatrix,
    cfg: SirConfig,
    x0: Sequence[float],
    bounds: ParamBounds,
    dt: float = 1.0 / 250.0,
    delta: float = DEFAULT_DELTA,
    settings: Optional[OptimSettings] = None,
    projection_mode: ProjectionMode = ProjectionMode.WHITENED,
    projection: Optional[SirProjection] = None,
) -> Tuple[OptimResult, SirProjection]:
    """
    SIR projection of ``X`` followed by maximum likelihood on the reduced rows.
    ``projection`` skips the SIR fit and uses the given projection as is.
    """
    started = time.perf_counter()
    if projection is None:
        projection = fit_sir(X, cfg)
        if ProjectionMode(projection_mode) is ProjectionMode.RAW:
            projection = projection.raw()

    X_reduced = reduce(X, projection)
    result = minimize(
        lambda x: reduced_nll(HestonParams.from_array(x), X_reduced, projection, dt, delta).value,
        x0,
        bounds,
        settings,
    )
    result = _with_timing(result, started)
    _warn_feller(result.params, "Sliced")
    return result, projection
