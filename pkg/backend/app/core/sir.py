# backend/app/core/sir.py
"""
Sliced Inverse Regression.

Pipeline: standardize X, slice the range of Y, average the standardized rows
within each slice, form the weighted covariance of the slice means and keep
its leading eigenvectors. Directions are kept in the standardized scale; data
are reduced as ``(X - mean) @ whitener @ W``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from ..errors import DimensionMismatchError, InvalidInputError, SingularStandardizationError
from .enums import SlicingMode

logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    X: np.ndarray
    Y: np.ndarray
    column_labels: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).ravel()
        n, d = X.shape
        if n < 1 or d < 1:
            raise InvalidInputError(f"feature matrix must be non-empty (got {X.shape})", stage="features")
        if Y.shape[0] != n:
            raise DimensionMismatchError(
                f"target has {Y.shape[0]} entries but X has {n} rows", stage="features"
            )
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise InvalidInputError("feature matrix contains NaN or Inf", stage="features")
        labels = tuple(self.column_labels) or tuple(f"x{j + 1}" for j in range(d))
        if len(labels) != d:
            raise DimensionMismatchError(
                f"{len(labels)} column labels for {d} columns", stage="features"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "column_labels", labels)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SirConfig:
    n_slices: int = 10
    n_directions: int = 6
    ridge: float = DEFAULT_RIDGE
    slicing_mode: SlicingMode = SlicingMode.EQUAL_WIDTH

    def validate(self, d: int) -> None:
        if self.n_slices < 1:
            raise InvalidInputError(f"n_slices must be at least 1 (got {self.n_slices})", stage="fit_sir")
        if not 1 <= self.n_directions <= d:
            raise InvalidInputError(
                f"n_directions must lie in [1, {d}] (got {self.n_directions})", stage="fit_sir"
            )
        if not self.ridge >= 0:
            raise InvalidInputError(f"ridge must be non-negative (got {self.ridge})", stage="fit_sir")


class Standardization(NamedTuple):
    Z: np.ndarray
    mean: np.ndarray
    whitener: np.ndarray


class Slicing(NamedTuple):
    assignments: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    degenerate: bool

    @property
    def occupied(self) -> int:
        return int(np.count_nonzero(self.counts))


@dataclass(frozen=True, eq=False)
class SirProjection:
    W: np.ndarray
    eigenvalues: np.ndarray
    slice_counts: np.ndarray
    sample_mean: np.ndarray
    whitener: np.ndarray
    slice_edges: np.ndarray = field(default_factory=lambda: np.empty(0))
    degenerate: bool = False
    column_labels: Tuple[str, ...] = ()

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n_directions(self) -> int:
        return self.W.shape[1]

    @property
    def transform(self) -> np.ndarray:
        """Composite linear map ``whitener @ W`` applied after centering."""
        return self.whitener @ self.W

    @classmethod
    def identity(cls, d: int) -> "SirProjection":
        eye = np.eye(d)
        return cls(
            W=eye,
            eigenvalues=np.ones(d),
            slice_counts=np.zeros(0, dtype=int),
            sample_mean=np.zeros(d),
            whitener=eye.copy(),
        )

    def raw(self) -> "SirProjection":
        """Same directions applied to raw rows: no centering, no whitening."""
        return dataclasses.replace(
            self, sample_mean=np.zeros(self.d), whitener=np.eye(self.d)
        )


def _as_matrix(X: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        return X.X
    return np.atleast_2d(np.asarray(X, dtype=float))


def _labels(X: Union[FeatureMatrix, np.ndarray], d: int) -> Tuple[str, ...]:
    if isinstance(X, FeatureMatrix):
        return X.column_labels
    return tuple(f"x{j + 1}" for j in range(d))


def standardize(X: Union[FeatureMatrix, np.ndarray], ridge: float = DEFAULT_RIDGE) -> Standardization:
    """Whiten rows: ``z_i = (cov + ridge I)^(-1/2) (x_i - mean)``."""
    data = _as_matrix(X)
    n, d = data.shape
    if n < 1:
        raise InvalidInputError("cannot standardize an empty matrix", stage="standardize")

    mean = data.mean(axis=0)
    centered = data - mean
    # A single row has no sample covariance; only the ridge remains.
    cov = np.cov(data, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    cov = cov + ridge * np.eye(d)

    eigenvalues, eigenvectors = linalg.eigh(cov)
    tolerance = np.finfo(float).eps * d * max(float(eigenvalues.max()), np.finfo(float).tiny)
    if eigenvalues.min() <= tolerance:
        raise SingularStandardizationError(
            _offending_columns(cov, eigenvectors[:, 0], tolerance, _labels(X, d)),
            smallest_eigenvalue=float(eigenvalues.min()),
        )

    whitener = (eigenvectors / np.sqrt(eigenvalues)) @ eigenvectors.T
    whitener = 0.5 * (whitener + whitener.T)
    return Standardization(Z=centered @ whitener, mean=mean, whitener=whitener)


def _offending_columns(
    cov: np.ndarray, null_vector: np.ndarray, tolerance: float, labels: Sequence[str]
) -> list[str]:
    flat = np.flatnonzero(np.diag(cov) <= tolerance)
    if flat.size == 0:
        flat = np.flatnonzero(np.abs(null_vector) > 1e-3)
    return [labels[j] for j in flat]


def slice_target(
    Y: np.ndarray, n_slices: int, mode: SlicingMode = SlicingMode.EQUAL_WIDTH
) -> Slicing:
    """
    Assign every observation to one of ``n_slices`` intervals of Y.

    Bins are right-closed with the first bin also closed on the left, so the
    maximum of Y always lands in the last slice. Empty slices are kept with a
    zero count. If all Y are equal everything goes to slice 0 and the result
    is flagged degenerate.
    """
    if n_slices < 1:
        raise InvalidInputError(f"n_slices must be at least 1 (got {n_slices})", stage="slice")
    Y = np.asarray(Y, dtype=float).ravel()
    low, high = float(Y.min()), float(Y.max())

    if low == high:
        logger.warning("All %d target values are identical; using a single slice", Y.size)
        counts = np.zeros(n_slices, dtype=int)
        counts[0] = Y.size
        edges = np.full(n_slices + 1, low)
        return Slicing(np.zeros(Y.size, dtype=int), counts, edges, True)

    if SlicingMode(mode) is SlicingMode.EQUAL_COUNT:
        edges = np.quantile(Y, np.linspace(0.0, 1.0, n_slices + 1))
    else:
        edges = np.linspace(low, high, n_slices + 1)
    edges[0], edges[-1] = low, high

    assignments = np.searchsorted(edges[1:-1], Y, side="left")
    counts = np.bincount(assignments, minlength=n_slices)
    return Slicing(assignments, counts, edges, False)


def inverse_regression_cov(Z: np.ndarray, assignments: np.ndarray, n_slices: int) -> np.ndarray:
    """``V = n^-1 sum_m n_m zbar_m zbar_m^T`` over the non-empty slices."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n, d = Z.shape
    assignments = np.asarray(assignments, dtype=int)

    sums = np.zeros((n_slices, d))
    np.add.at(sums, assignments, Z)
    counts = np.bincount(assignments, minlength=n_slices)
    occupied = counts > 0
    slice_means = sums[occupied] / counts[occupied, None]

    V = (slice_means.T * counts[occupied]) @ slice_means / n
    return 0.5 * (V + V.T)


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit_sir(X: FeatureMatrix, cfg: SirConfig) -> SirProjection:
    cfg.validate(X.d)
    standardized = standardize(X, cfg.ridge)
    slicing = slice_target(X.Y, cfg.n_slices, cfg.slicing_mode)
    if X.n < cfg.n_slices:
        logger.warning(
            "Only %d rows for %d slices; effective slice count is %d",
            X.n,
            cfg.n_slices,
            slicing.occupied,
        )

    V = inverse_regression_cov(standardized.Z, slicing.assignments, cfg.n_slices)
    eigenvalues, eigenvectors = linalg.eigh(V)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = _canonical_signs(eigenvectors[:, order])

    logger.info(
        "SIR fit on %d x %d rows: leading eigenvalues %s",
        X.n,
        X.d,
        np.array2string(eigenvalues[: cfg.n_directions], precision=4),
    )
    return SirProjection(
        W=eigenvectors[:, : cfg.n_directions].copy(),
        eigenvalues=eigenvalues,
        slice_counts=slicing.counts,
        sample_mean=standardized.mean,
        whitener=standardized.whitener,
        slice_edges=slicing.edges,
        degenerate=slicing.degenerate,
        column_labels=X.column_labels,
    )


def reduce(X: Union[FeatureMatrix, np.ndarray], proj: SirProjection) -> np.ndarray:
    data = _as_matrix(X)
    if data.shape[1] != proj.d:
        raise DimensionMismatchError(
            f"X has {data.shape[1]} columns but the projection expects {proj.d}",
            stage="reduce",
        )
    return (data - proj.sample_mean) @ proj.transform


def projection_from_arrays(
    W: np.ndarray,
    eigenvalues: np.ndarray,
    slice_counts: np.ndarray,
    whitener: np.ndarray,
    sample_mean: Optional[np.ndarray] = None,
    slice_edges: Optional[np.ndarray] = None,
) -> SirProjection:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    d = W.shape[0]
    whitener = np.asarray(whitener, dtype=float).reshape(d, d)
    mean = np.zeros(d) if sample_mean is None else np.asarray(sample_mean, dtype=float).ravel()
    if mean.shape != (d,):
        raise DimensionMismatchError("sample mean does not match W", stage="projection")
    return SirProjection(
        W=W,
        eigenvalues=np.asarray(eigenvalues, dtype=float).ravel(),
        slice_counts=np.asarray(slice_counts, dtype=int).ravel(),
        sample_mean=mean,
        whitener=whitener,
        slice_edges=np.empty(0) if slice_edges is None else np.asarray(slice_edges, dtype=float),
    )
