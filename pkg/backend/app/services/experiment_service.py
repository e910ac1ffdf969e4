# backend/app/services/experiment_service.py

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from statsmodels.tsa.stattools import acf as sm_acf

from ..cache.cache_manager import PathCache
from ..config.settings import OptimSettings, Settings
from ..core.enums import (
    ColumnSource,
    FeatureMode,
    Method,
    ProjectionMode,
    SinglePathMode,
    TargetMode,
    VarianceFeature,
)
from ..core.heston import PARAM_NAMES, HestonParams, PathSet, SimConfig, resimulate
from ..core.optimizer import OptimResult, ParamBounds, fit_direct, fit_sliced
from ..core.sir import FeatureMatrix, SirConfig, SirProjection
from ..errors import InvalidInputError, NonFiniteResultError

logger = logging.getLogger(__name__)

FEATURE_LABELS = PARAM_NAMES + ("v",)
REPORT_COLUMNS = [
    "study", "seed", "n_paths", "method", *PARAM_NAMES,
    "nll", "mse", "time_s", "converged", "clamped",
]
MSE_CHECKPOINT = 10


@dataclass(frozen=True)
class ExperimentConfig:
    true_params: HestonParams
    sim: SimConfig
    sir: SirConfig
    bounds: ParamBounds
    x0: Tuple[float, ...]
    seeds: Tuple[int, ...]
    feature_mode: FeatureMode = FeatureMode.PER_PATH
    single_path_mode: SinglePathMode = SinglePathMode.PER_TIMESTEP
    target_mode: TargetMode = TargetMode.MEAN_Q
    variance_feature: VarianceFeature = VarianceFeature.MEAN_V
    column_source: ColumnSource = ColumnSource.INITIAL_GUESS
    projection_mode: ProjectionMode = ProjectionMode.WHITENED
    delta: float = 1e-6
    optim: OptimSettings = field(default_factory=OptimSettings)
    n_list: Tuple[int, ...] = (50, 100, 250)
    workers: int = 1
    acf_max_lag: int = 20

    def __post_init__(self) -> None:
        if not self.seeds:
            raise InvalidInputError("at least one seed is required", stage="experiment")
        if len(self.x0) != 5:
            raise InvalidInputError("x0 needs five entries", stage="experiment")
        self.true_params.validate()

    @classmethod
    def from_settings(cls, settings: Settings) -> "ExperimentConfig":
        model, sim, sir, study = settings.model, settings.sim, settings.sir, settings.study
        return cls(
            true_params=HestonParams(model.mu, model.kappa, model.theta, model.sigma, model.rho),
            sim=SimConfig(
                s0=sim.s0, v0=sim.v0, n_steps=sim.n_steps, dt=sim.dt,
                n_paths=sim.n_paths, seed=sim.seed,
            ),
            sir=SirConfig(
                n_slices=sir.n_slices, n_directions=sir.n_directions,
                ridge=sir.ridge, slicing_mode=sir.slicing_mode,
            ),
            bounds=ParamBounds.from_settings(settings.bounds, settings.optim.kappa_cap),
            x0=tuple(study.x0),
            seeds=tuple(study.seeds),
            feature_mode=study.feature_mode,
            single_path_mode=study.single_path_mode,
            target_mode=study.target_mode,
            variance_feature=study.variance_feature,
            column_source=study.column_source,
            projection_mode=study.projection_mode,
            delta=study.delta,
            optim=settings.optim,
            n_list=tuple(study.n_list),
            workers=study.workers,
            acf_max_lag=study.acf_max_lag,
        )

    def column_values(self) -> np.ndarray:
        if ColumnSource(self.column_source) is ColumnSource.TRUE_PARAMS:
            return self.true_params.as_array()
        return np.asarray(self.x0, dtype=float)

    def sim_for(self, seed: int, n_paths: int) -> SimConfig:
        return SimConfig(
            s0=self.sim.s0, v0=self.sim.v0, n_steps=self.sim.n_steps,
            dt=self.sim.dt, n_paths=n_paths, seed=seed,
        )


def build_features(
    paths: PathSet,
    params_for_columns: Sequence[float],
    mode: FeatureMode = FeatureMode.PER_PATH,
    target_mode: TargetMode = TargetMode.MEAN_Q,
    variance_feature: VarianceFeature = VarianceFeature.MEAN_V,
) -> FeatureMatrix:
    """
    Rows ``[mu, kappa, theta, sigma, rho, v]`` with the first five columns held
    at ``params_for_columns``.

    per-path: one row per path, ``v`` and ``Y`` summarised over the path.
    per-timestep: one row per step ``t < T`` with ``v = V[t]`` and ``Y = Q[t]``;
    several paths are stacked path by path.
    """
    columns = np.asarray(params_for_columns, dtype=float).ravel()
    if columns.shape != (5,):
        raise InvalidInputError("parameter columns need five values", stage="features")

    if FeatureMode(mode) is FeatureMode.PER_TIMESTEP:
        v = paths.V[:, :-1].ravel()
        Y = paths.Q.ravel()
    else:
        if VarianceFeature(variance_feature) is VarianceFeature.TERMINAL_V:
            v = paths.V[:, -1]
        else:
            v = paths.V.mean(axis=1)
        if TargetMode(target_mode) is TargetMode.TERMINAL_Q:
            Y = paths.Q[:, -1]
        else:
            Y = paths.Q.mean(axis=1)

    X = np.column_stack([np.tile(columns, (v.size, 1)), v])
    return FeatureMatrix(X=X, Y=Y, column_labels=FEATURE_LABELS)


def mse_per_path(true_paths: PathSet, fitted: HestonParams) -> np.ndarray:
    """Per-path mean squared price error over ``t = 1..T`` after re-simulating on the same noise."""
    estimated = resimulate(true_paths, fitted)
    diff = estimated.S[:, 1:] - true_paths.S[:, 1:]
    per_path = np.mean(diff * diff, axis=1)
    if not np.all(np.isfinite(per_path)):
        raise NonFiniteResultError("re-simulated prices are not finite", stage="mse")
    return per_path


def mse_paths(true_paths: PathSet, fitted: HestonParams) -> float:
    """Mean squared price error over all paths and ``t = 1..T``."""
    return float(np.mean(mse_per_path(true_paths, fitted)))


class AcfResult(NamedTuple):
    values: np.ndarray
    degenerate: bool


def acf(series: Sequence[float], max_lag: int) -> AcfResult:
    """Biased sample ACF ``r_0..r_max_lag``. A constant series gives zeros, flagged."""
    x = np.asarray(series, dtype=float).ravel()
    if max_lag < 0:
        raise InvalidInputError(f"max_lag must be non-negative (got {max_lag})", stage="acf")
    if x.size <= max_lag:
        raise InvalidInputError(
            f"series of length {x.size} is too short for {max_lag} lags", stage="acf"
        )
    if np.ptp(x) == 0:
        logger.warning("ACF requested for a constant series of length %d", x.size)
        return AcfResult(np.zeros(max_lag + 1), True)
    values = sm_acf(x, nlags=max_lag, adjusted=False, fft=False, missing="none")
    return AcfResult(np.asarray(values, dtype=float), False)


@dataclass(frozen=True)
class RunRecord:
    study: str
    seed: int
    n_paths: int
    method: Method
    params: HestonParams
    nll: float
    mse: float
    wall_time_seconds: float
    converged: bool
    clamped_terms: int = 0
    termination_reason: str = ""
    path_mse: Tuple[float, ...] = ()

    def as_row(self) -> Dict[str, Any]:
        return {
            "study": self.study,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "method": Method(self.method).value,
            **dict(zip(PARAM_NAMES, self.params.as_array())),
            "nll": self.nll,
            "mse": self.mse,
            "time_s": self.wall_time_seconds,
            "converged": self.converged,
            "clamped": self.clamped_terms,
        }


def _above_upper_fence(values: pd.Series) -> pd.Series:
    q1, q3 = values.quantile(0.25), values.quantile(0.75)
    return values > q3 + 1.5 * (q3 - q1)


def _upper_outliers(values: pd.Series) -> int:
    return int(_above_upper_fence(values).sum())


@dataclass
class ExperimentReport:
    study: str
    records: List[RunRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        ordered = sorted(self.records, key=lambda r: (r.n_paths, r.seed, Method(r.method).value))
        return pd.DataFrame([r.as_row() for r in ordered], columns=REPORT_COLUMNS)

    def _by_method(self) -> Dict[str, pd.DataFrame]:
        frame = self.to_frame()
        return {m.value: frame[frame["method"] == m.value] for m in Method}

    def aggregates(self) -> Dict[str, Any]:
        groups = self._by_method()
        return {
            "mean_mse_DI": float(groups["DI"]["mse"].mean()),
            "mean_mse_SI": float(groups["SI"]["mse"].mean()),
            "mean_time_DI": float(groups["DI"]["time_s"].mean()),
            "mean_time_SI": float(groups["SI"]["time_s"].mean()),
            "outlier_counts": self.outlier_counts(),
        }

    def outlier_counts(self) -> Dict[str, int]:
        return {method: _upper_outliers(group["mse"]) for method, group in self._by_method().items()}

    def max_median_ratio(self) -> Dict[str, float]:
        ratios = {}
        for method, group in self._by_method().items():
            median = group["mse"].median()
            ratios[method] = float(group["mse"].max() / median) if median > 0 else float("inf")
        return ratios

    def cumulative_mse(self, checkpoint: int = MSE_CHECKPOINT) -> pd.DataFrame:
        """Mean MSE per method over the first ``checkpoint`` seeds and over all seeds."""
        frame = self.to_frame()
        seeds = list(dict.fromkeys(frame["seed"]))
        rows = []
        for n_runs in sorted({min(checkpoint, len(seeds)), len(seeds)}):
            subset = frame[frame["seed"].isin(seeds[:n_runs])]
            means = subset.groupby("method")["mse"].mean()
            rows.append({"runs": n_runs, "mse_DI": means.get("DI"), "mse_SI": means.get("SI")})
        return pd.DataFrame(rows, columns=["runs", "mse_DI", "mse_SI"])

    def cost_by_paths(self) -> pd.DataFrame:
        """Wall time and average MSE per path count and method."""
        frame = self.to_frame()
        wide = frame.pivot_table(index="n_paths", columns="method", values=["time_s", "mse"], aggfunc="mean")
        table = pd.DataFrame({
            "n_paths": wide.index.astype(int),
            "time_DI": wide[("time_s", "DI")].to_numpy(),
            "mse_DI": wide[("mse", "DI")].to_numpy(),
            "time_SI": wide[("time_s", "SI")].to_numpy(),
            "mse_SI": wide[("mse", "SI")].to_numpy(),
        })
        return table.reset_index(drop=True)

    def mse_box(self) -> pd.DataFrame:
        frame = self.to_frame()
        wide = frame.pivot(index="seed", columns="method", values="mse").reset_index()
        return wide.rename(columns={"DI": "mse_DI", "SI": "mse_SI"})[["seed", "mse_DI", "mse_SI"]]

    def path_mse_box(self) -> pd.DataFrame:
        """
        Per-path MSE for every path count, one row per (n_paths, seed, path).
        ``outlier_DI`` and ``outlier_SI`` flag values above the upper Tukey fence
        within their path count, so the box can be drawn with and without them.
        """
        rows: Dict[Tuple[int, int], Dict[str, np.ndarray]] = {}
        for record in self.records:
            values = np.asarray(record.path_mse or (record.mse,), dtype=float)
            rows.setdefault((record.n_paths, record.seed), {})[Method(record.method).value] = values

        frames = []
        for (n_paths, seed), by_method in sorted(rows.items()):
            if set(by_method) != {m.value for m in Method}:
                raise InvalidInputError(
                    f"run n={n_paths} seed={seed} lacks a DI or SI record", stage="report"
                )
            di, si = by_method["DI"], by_method["SI"]
            frames.append(pd.DataFrame({
                "n_paths": n_paths,
                "seed": seed,
                "path": np.arange(di.size),
                "mse_DI": di,
                "mse_SI": si,
            }))
        columns = ["n_paths", "seed", "path", "mse_DI", "mse_SI", "outlier_DI", "outlier_SI"]
        if not frames:
            return pd.DataFrame(columns=columns)
        box = pd.concat(frames, ignore_index=True)
        for method in Method:
            column = f"mse_{method.value}"
            box[f"outlier_{method.value}"] = box.groupby("n_paths")[column].transform(_above_upper_fence)
        return box[columns]


@dataclass(frozen=True)
class VolatilityFigure:
    seed: int
    variance: pd.DataFrame
    autocorrelation: pd.DataFrame
    degenerate: Dict[str, bool]


class ExperimentService:
    """Runs the single-path and multi-path studies and the per-command fits."""

    def __init__(self, cache: PathCache, config: ExperimentConfig) -> None:
        self.cache = cache
        self.config = config

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------
    def simulate(self, seed: Optional[int] = None, n_paths: Optional[int] = None) -> PathSet:
        cfg = self.config
        sim = cfg.sim_for(cfg.sim.seed if seed is None else seed, n_paths or cfg.sim.n_paths)
        logger.info("Simulating %d paths (seed=%d)", sim.n_paths, sim.seed)
        return self.cache.get_or_simulate(cfg.true_params, sim)

    def features_for(self, paths: PathSet) -> FeatureMatrix:
        cfg = self.config
        mode = cfg.feature_mode
        if paths.n_paths == 1:
            single_row = SinglePathMode(cfg.single_path_mode) is SinglePathMode.SINGLE_ROW
            mode = FeatureMode.PER_PATH if single_row else FeatureMode.PER_TIMESTEP
        return build_features(
            paths, cfg.column_values(), mode, cfg.target_mode, cfg.variance_feature
        )

    def fit_direct(self, paths: PathSet) -> OptimResult:
        cfg = self.config
        return fit_direct(paths, cfg.x0, cfg.bounds, dt=cfg.sim.dt, settings=cfg.optim)

    def fit_sliced(self, paths: PathSet) -> Tuple[OptimResult, SirProjection]:
        cfg = self.config
        return fit_sliced(
            self.features_for(paths),
            cfg.sir,
            cfg.x0,
            cfg.bounds,
            dt=cfg.sim.dt,
            delta=cfg.delta,
            settings=cfg.optim,
            projection_mode=cfg.projection_mode,
        )

    def _record(
        self, study: str, seed: int, paths: PathSet, method: Method, result: OptimResult
    ) -> RunRecord:
        if not np.isfinite(result.nll):
            raise NonFiniteResultError(
                f"{method.value} fit for seed {seed} (n={paths.n_paths}) ended with a non-finite "
                f"likelihood ({result.termination_reason.value})",
                stage=f"fit-{method.value}",
            )
        if not result.converged:
            logger.warning(
                "%s fit for seed %d (n=%d) did not converge: %s",
                method.value, seed, paths.n_paths, result.termination_reason.value,
            )
        per_path = mse_per_path(paths, result.params)
        return RunRecord(
            study=study,
            seed=seed,
            n_paths=paths.n_paths,
            method=method,
            params=result.params,
            nll=result.nll,
            mse=float(np.mean(per_path)),
            path_mse=tuple(float(value) for value in per_path),
            wall_time_seconds=result.wall_time_seconds,
            converged=result.converged,
            clamped_terms=result.clamped_terms,
            termination_reason=result.termination_reason.value,
        )

    def _fit_both(self, study: str, seed: int, n_paths: int) -> List[RunRecord]:
        paths = self.simulate(seed=seed, n_paths=n_paths)
        direct = self.fit_direct(paths)
        sliced, _ = self.fit_sliced(paths)
        records = [
            self._record(study, seed, paths, Method.DI, direct),
            self._record(study, seed, paths, Method.SI, sliced),
        ]
        logger.info(
            "%s seed=%d n=%d: DI mse=%.4g (%.2fs), SI mse=%.4g (%.2fs)",
            study, seed, n_paths,
            records[0].mse, records[0].wall_time_seconds,
            records[1].mse, records[1].wall_time_seconds,
        )
        return records

    def _fan_out(self, study: str, jobs: Sequence[Tuple[int, int]]) -> ExperimentReport:
        workers = max(1, min(self.config.workers, len(jobs)))
        with ThreadPoolExecutor(max_workers=workers) as executor:
            batches = list(executor.map(lambda job: self._fit_both(study, *job), jobs))
        records = [record for batch in batches for record in batch]
        records.sort(key=lambda r: (r.n_paths, r.seed, Method(r.method).value))
        return ExperimentReport(study=study, records=records)

    # ------------------------------------------------------------------
    # Studies
    # ------------------------------------------------------------------
    def run_single_path_study(self) -> ExperimentReport:
        seeds = self.config.seeds
        logger.info("Single-path study over %d seeds", len(seeds))
        return self._fan_out("single", [(seed, 1) for seed in seeds])

    def run_multi_path_study(self, n_list: Optional[Sequence[int]] = None) -> ExperimentReport:
        n_list = list(n_list or self.config.n_list)
        if not n_list or any(n < 1 for n in n_list):
            raise InvalidInputError("n_list needs positive path counts", stage="study-multi")
        seed = self.config.sim.seed
        logger.info("Multi-path study for n in %s (seed=%d)", n_list, seed)
        return self._fan_out("multi", [(seed, n) for n in n_list])

    def volatility_figure(self, report: ExperimentReport) -> VolatilityFigure:
        """
        Variance path of one study path (picked by a draw seeded with ``sim.seed``)
        next to its re-simulations under the DI and SI fits, plus their ACFs.
        """
        frame = report.to_frame()
        if frame.empty:
            raise InvalidInputError("report has no runs", stage="figure")
        seeds = sorted(set(frame["seed"]))
        rng = np.random.default_rng(self.config.sim.seed)
        seed = int(seeds[rng.integers(len(seeds))])
        n_paths = int(frame.loc[frame["seed"] == seed, "n_paths"].iloc[0])
        paths = self.simulate(seed=seed, n_paths=n_paths)
        path_index = int(rng.integers(n_paths))

        by_method = {r.method: r for r in report.records if r.seed == seed and r.n_paths == n_paths}
        series = {"true": paths.V[path_index]}
        for method in Method:
            series[method.value] = resimulate(paths, by_method[method].params).V[path_index]

        max_lag = self.config.acf_max_lag
        acfs = {name: acf(values, max_lag) for name, values in series.items()}
        variance = pd.DataFrame({
            "t": np.arange(paths.n_steps + 1),
            "v_true": series["true"],
            "v_DI": series["DI"],
            "v_SI": series["SI"],
        })
        autocorrelation = pd.DataFrame({
            "lag": np.arange(max_lag + 1),
            "acf_true": acfs["true"].values,
            "acf_DI": acfs["DI"].values,
            "acf_SI": acfs["SI"].values,
        })
        return VolatilityFigure(
            seed=seed,
            variance=variance,
            autocorrelation=autocorrelation,
            degenerate={name: result.degenerate for name, result in acfs.items()},
        )
