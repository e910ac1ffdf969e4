# backend/app/cli/main.py
"""
Command-line entry point::

    python -m app.cli.main <command> [--config FILE] [--output-dir DIR] [--section.key VALUE ...]

Exit codes: 0 success, 1 domain error (one ``error: stage=... message=...``
line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .. import __version__
from ..config.settings import Settings, load_settings
from ..errors import NonFiniteResultError, SlicedInferenceError, UsageError
from ..services.experiment_service import acf, mse_paths
from ..services.report_service import ReportService
from .dependencies import get_experiment_service, get_report_service

load_dotenv()

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit-direct", "fit-sliced", "study-single", "study-multi", "acf")


@dataclass
class CliInvocation:
    command: str
    config_path: Optional[Path] = None
    overrides: Dict[str, str] = field(default_factory=dict)
    output_dir: Optional[Path] = None
    paths_file: Optional[Path] = None
    path_index: int = 0


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--output-dir", type=Path, help="directory for CSV artifacts")

    parser = _Parser(prog="sliced-inference", description="Direct and sliced inference for the Heston model")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("simulate", parents=[common], help="simulate paths and write paths.csv")
    for name in ("fit-direct", "fit-sliced"):
        fit = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} estimator on one path set")
        fit.add_argument("--paths", type=Path, help="fit a previously written paths.csv instead of simulating")
    sub.add_parser("study-single", parents=[common], help="single-path study over all seeds")
    multi = sub.add_parser("study-multi", parents=[common], help="multi-path study over path counts")
    multi.add_argument("--n", help="comma-separated path counts (same as --study.n_list)")
    series = sub.add_parser("acf", parents=[common], help="sample ACF of a variance path")
    series.add_argument("--paths", type=Path, help="read the variance path from this paths.csv")
    series.add_argument("--path-index", type=int, default=0)
    return parser


def _parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {token!r}")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            i += 1
            value = tokens[i]
        overrides[key] = value
        i += 1
    return overrides


def parse_invocation(argv: Sequence[str]) -> CliInvocation:
    args, rest = build_parser().parse_known_args(list(argv))
    overrides = _parse_overrides(rest)
    if getattr(args, "n", None):
        overrides["study.n_list"] = args.n
    return CliInvocation(
        command=args.command,
        config_path=args.config,
        overrides=overrides,
        output_dir=args.output_dir,
        paths_file=getattr(args, "paths", None),
        path_index=getattr(args, "path_index", 0),
    )


def _load_paths(invocation: CliInvocation, settings: Settings, service):
    if invocation.paths_file is not None:
        return ReportService.read_paths(invocation.paths_file, settings.sim.dt)
    return service.simulate()


def _run(invocation: CliInvocation, settings: Settings, reports: ReportService) -> List[int]:
    """Execute one command; returns the seeds it used."""
    service = get_experiment_service(settings)
    command = invocation.command

    if command == "simulate":
        reports.write_paths(service.simulate())
        return [settings.sim.seed]

    if command in ("fit-direct", "fit-sliced"):
        paths = _load_paths(invocation, settings, service)
        projection = None
        if command == "fit-direct":
            result, method = service.fit_direct(paths), "DI"
        else:
            (result, projection), method = service.fit_sliced(paths), "SI"
        if not math.isfinite(result.nll):
            raise NonFiniteResultError(
                f"{method} fit ended with a non-finite likelihood ({result.termination_reason.value})",
                stage=command,
            )
        if projection is not None:
            reports.write_projection(projection)
        mse = mse_paths(paths, result.params) if paths.noise is not None else None
        reports.write_fit(method, result, mse, name=f"{command.replace('-', '_')}.csv")
        return [settings.sim.seed]

    if command == "study-single":
        report = service.run_single_path_study()
        reports.write_single_path_tables(report)
        reports.write_figure(service.volatility_figure(report))
        return list(settings.study.seeds)

    if command == "study-multi":
        report = service.run_multi_path_study(settings.study.n_list)
        reports.write_multi_path_tables(report)
        return [settings.sim.seed]

    if command == "acf":
        paths = _load_paths(invocation, settings, service)
        if not 0 <= invocation.path_index < paths.n_paths:
            raise UsageError(f"--path-index must lie in [0, {paths.n_paths - 1}]")
        reports.write_acf(acf(paths.V[invocation.path_index], settings.study.acf_max_lag))
        return [settings.sim.seed]

    raise UsageError(f"unknown command {command!r}")


def dispatch(invocation: CliInvocation) -> int:
    try:
        settings = load_settings(invocation.config_path, invocation.overrides)
        reports = get_report_service(invocation.output_dir)
        seeds = _run(invocation, settings, reports)
        reports.write_manifest(settings, version=__version__, command=invocation.command, seeds=seeds)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SlicedInferenceError as exc:
        logger.warning("%s failed at %s: %s", invocation.command, exc.stage, exc)
        print(f"error: stage={exc.stage} message={_one_line(exc)}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        logger.exception("%s failed", invocation.command)
        print(f"error: stage={invocation.command} message={_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        invocation = parse_invocation(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    return dispatch(invocation)


if __name__ == "__main__":
    sys.exit(main())
