# backend/app/services/report_service.py

from __future__ import annotations

import dataclasses
import logging
import os
import tempfile
from io import StringIO
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import pandas as pd

from ..config.settings import Settings
from ..core.heston import PARAM_NAMES, PathSet
from ..core.optimizer import OptimResult
from ..core.sir import SirProjection, projection_from_arrays
from ..errors import DimensionMismatchError, InvalidInputError
from .experiment_service import AcfResult, ExperimentReport, VolatilityFigure

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
CSV_FLOAT_PRECISION = "round_trip"
PATH_COLUMNS = ["path", "t", "S", "V", "Q"]


class ReportService:
    """Writes study artifacts as CSV into one output directory."""

    def __init__(self, output_dir: Path) -> None:
        self.output_dir = Path(output_dir)

    # ------------------------------------------------------------------
    # Low-level writers
    # ------------------------------------------------------------------
    def _target(self, name: str) -> Path:
        return self.output_dir / name

    def write_text(self, name: str, text: str) -> Path:
        """Write to a temp file next to the target, then rename over it."""
        target = self._target(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        handle, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as tmp:
                tmp.write(text)
            os.replace(tmp_name, target)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except FileNotFoundError:
                pass
            raise
        logger.info("Wrote %s", target)
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        buffer = StringIO()
        frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self.write_text(name, buffer.getvalue())

    # ------------------------------------------------------------------
    # Paths
    # ------------------------------------------------------------------
    def write_paths(self, paths: PathSet, name: str = "paths.csv") -> Path:
        """One row per (path, t) for t = 0..T; ``Q`` on row t is ``S_t / S_{t-1}``, blank at t = 0."""
        n_paths, n_points = paths.S.shape
        Q = np.full((n_paths, n_points), np.nan)
        Q[:, 1:] = paths.Q
        frame = pd.DataFrame({
            "path": np.repeat(np.arange(n_paths), n_points),
            "t": np.tile(np.arange(n_points), n_paths),
            "S": paths.S.ravel(),
            "V": paths.V.ravel(),
            "Q": Q.ravel(),
        })
        return self.write_frame(name, frame)

    @staticmethod
    def read_paths(path: Path, dt: float) -> PathSet:
        """Load a paths CSV. The result carries no noise draws."""
        try:
            frame = pd.read_csv(path, float_precision=CSV_FLOAT_PRECISION)
        except FileNotFoundError as exc:
            raise InvalidInputError(f"paths file not found: {path}", stage="read_paths") from exc
        if list(frame.columns) != PATH_COLUMNS:
            raise InvalidInputError(
                f"expected header {','.join(PATH_COLUMNS)}, got {','.join(frame.columns)}",
                stage="read_paths",
            )
        frame = frame.sort_values(["path", "t"])
        S = frame.pivot(index="path", columns="t", values="S").to_numpy(dtype=float)
        V = frame.pivot(index="path", columns="t", values="V").to_numpy(dtype=float)
        if S.shape[1] < 2 or np.isnan(S).any() or np.isnan(V).any():
            raise InvalidInputError("paths file is incomplete", stage="read_paths")
        return PathSet(S=S, Q=S[:, 1:] / S[:, :-1], V=V, dt=dt)

    # ------------------------------------------------------------------
    # Projection bundle
    # ------------------------------------------------------------------
    def write_projection(self, proj: SirProjection, subdir: str = "projection") -> Path:
        labels = list(proj.column_labels) or [f"x{j + 1}" for j in range(proj.d)]
        directions = [f"w{k + 1}" for k in range(proj.n_directions)]
        self.write_frame(f"{subdir}/W.csv", pd.DataFrame(proj.W, columns=directions).assign(column=labels)[["column", *directions]])
        self.write_frame(
            f"{subdir}/eigenvalues.csv",
            pd.DataFrame({"k": np.arange(1, proj.eigenvalues.size + 1), "eigenvalue": proj.eigenvalues}),
        )
        n_slices = proj.slice_counts.size
        edges = proj.slice_edges if proj.slice_edges.size == n_slices + 1 else np.full(n_slices + 1, np.nan)
        self.write_frame(
            f"{subdir}/slices.csv",
            pd.DataFrame({
                "m": np.arange(1, n_slices + 1),
                "n_m": proj.slice_counts,
                "lower_edge": edges[:-1],
                "upper_edge": edges[1:],
            }),
        )
        self.write_frame(f"{subdir}/whitener.csv", pd.DataFrame(proj.whitener, columns=labels))
        self.write_frame(f"{subdir}/sample_mean.csv", pd.DataFrame({"column": labels, "mean": proj.sample_mean}))
        return self._target(subdir)

    @staticmethod
    def read_projection(directory: Path) -> SirProjection:
        directory = Path(directory)
        try:
            W = pd.read_csv(directory / "W.csv", float_precision=CSV_FLOAT_PRECISION)
            eigenvalues = pd.read_csv(directory / "eigenvalues.csv", float_precision=CSV_FLOAT_PRECISION)["eigenvalue"].to_numpy()
            slices = pd.read_csv(directory / "slices.csv", float_precision=CSV_FLOAT_PRECISION)
            whitener = pd.read_csv(directory / "whitener.csv", float_precision=CSV_FLOAT_PRECISION).to_numpy(dtype=float)
            mean = pd.read_csv(directory / "sample_mean.csv", float_precision=CSV_FLOAT_PRECISION)["mean"].to_numpy()
        except FileNotFoundError as exc:
            raise InvalidInputError(f"incomplete projection bundle: {exc.filename}", stage="read_projection") from exc

        if whitener.shape != (len(W), len(W)):
            raise DimensionMismatchError("whitener does not match W", stage="read_projection")
        edges = np.append(slices["lower_edge"].to_numpy(), slices["upper_edge"].to_numpy()[-1:])
        proj = projection_from_arrays(
            W=W.drop(columns="column").to_numpy(dtype=float),
            eigenvalues=eigenvalues,
            slice_counts=slices["n_m"].to_numpy(),
            whitener=whitener,
            sample_mean=mean,
            slice_edges=edges,
        )
        return dataclasses.replace(proj, column_labels=tuple(str(label) for label in W["column"]))

    # ------------------------------------------------------------------
    # Fits and studies
    # ------------------------------------------------------------------
    def write_fit(
        self, method: str, result: OptimResult, mse: Optional[float] = None, name: str = "fit.csv"
    ) -> Path:
        row = {
            "method": method,
            **dict(zip(PARAM_NAMES, result.x)),
            "nll": result.nll,
            "mse": np.nan if mse is None else mse,
            "time_s": result.wall_time_seconds,
            "converged": result.converged,
            "termination": result.termination_reason.value,
            "n_iterations": result.n_iterations,
            "n_evaluations": result.n_evaluations,
            "clamped": result.clamped_terms,
        }
        return self.write_frame(name, pd.DataFrame([row]))

    def write_report(self, report: ExperimentReport, name: Optional[str] = None) -> Path:
        return self.write_frame(name or f"report_{report.study}.csv", report.to_frame())

    def write_single_path_tables(self, report: ExperimentReport) -> Dict[str, Path]:
        summary = pd.DataFrame([
            {"method": method, "outliers": report.outlier_counts()[method], "max_median_ratio": ratio}
            for method, ratio in report.max_median_ratio().items()
        ])
        return {
            "report": self.write_report(report),
            "cumulative_mse": self.write_frame("cumulative_mse.csv", report.cumulative_mse()),
            "mse_box": self.write_frame("mse_box.csv", report.mse_box()),
            "robustness": self.write_frame("robustness.csv", summary),
        }

    def write_multi_path_tables(self, report: ExperimentReport) -> Dict[str, Path]:
        return {
            "report": self.write_report(report),
            "cost_by_paths": self.write_frame("cost_by_paths.csv", report.cost_by_paths()),
            "mse_box": self.write_frame("mse_box_multi.csv", report.path_mse_box()),
        }

    def write_figure(self, figure: VolatilityFigure) -> Dict[str, Path]:
        return {
            "vol": self.write_frame("figure4_vol.csv", figure.variance),
            "acf": self.write_frame("figure4_acf.csv", figure.autocorrelation),
        }

    def write_acf(self, result: AcfResult, name: str = "acf.csv") -> Path:
        frame = pd.DataFrame({"lag": np.arange(result.values.size), "acf": result.values})
        return self.write_frame(name, frame.assign(degenerate=result.degenerate))

    def write_manifest(
        self, settings: Settings, *, version: str, command: str, seeds: Iterable[int]
    ) -> Path:
        """Resolved settings as a loadable config file, with run metadata in comments."""
        header = (
            f"# version = {version}\n"
            f"# command = {command}\n"
            f"# seeds = {', '.join(str(seed) for seed in seeds)}\n"
        )
        return self.write_text("manifest.txt", header + settings.to_flat_text())
