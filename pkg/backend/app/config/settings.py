# backend/app/config/settings.py
"""
Settings schema and the flat ``key = value`` config format.

Every tunable lives in exactly one place: the pydantic section models below.
Config files, CLI overrides and run manifests are all flat dotted-key views of
the same schema.
"""

from __future__ import annotations

import difflib
import logging
import os
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, get_origin

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ..core.enums import (
    ColumnSource,
    FeatureMode,
    ProjectionMode,
    SinglePathMode,
    SlicingMode,
    TargetMode,
    VarianceFeature,
)
from ..errors import UsageError

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_INITIAL_GUESS = [0.02, 5.2, 0.04, 0.1, -0.6]
# Fifteen seeds drawn once from 1..1000 and frozen for reproducibility.
DEFAULT_SEEDS = [17, 64, 129, 202, 251, 318, 377, 431, 502, 566, 623, 709, 788, 856, 940]
DEFAULT_N_LIST = [50, 100, 250]


def _parse_fraction(value: Any) -> Any:
    if isinstance(value, str) and "/" in value:
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"invalid fraction {value!r}") from exc
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelSettings(_Section):
    """True parameters used to simulate data."""

    mu: float = 0.03
    kappa: float = Field(default=5.0, gt=0)
    theta: float = Field(default=0.05, gt=0)
    sigma: float = Field(default=0.2, gt=0)
    rho: float = Field(default=-0.5, gt=-1, lt=1)


class SimSettings(_Section):
    s0: float = Field(default=10.0, gt=0)
    v0: float = Field(default=0.01, ge=0)
    n_steps: int = Field(default=250, ge=1)
    dt: float = Field(default=1 / 250, gt=0)
    n_paths: int = Field(default=1, ge=1)
    seed: int = Field(default=42, ge=0, lt=2**64)

    @field_validator("dt", mode="before")
    @classmethod
    def parse_dt(cls, value: Any) -> Any:
        return _parse_fraction(value)


class SirSettings(_Section):
    n_slices: int = Field(default=10, ge=1)
    n_directions: int = Field(default=6, ge=1)
    ridge: float = Field(default=1e-8, ge=0)
    slicing_mode: SlicingMode = SlicingMode.EQUAL_WIDTH


class BoundsSettings(_Section):
    """Box for (mu, kappa, theta, sigma, rho). ``inf`` is allowed and capped later."""

    mu: List[float] = Field(default_factory=lambda: [-0.05, 0.05])
    kappa: List[float] = Field(default_factory=lambda: [5.0, float("inf")])
    theta: List[float] = Field(default_factory=lambda: [0.01, 0.05])
    sigma: List[float] = Field(default_factory=lambda: [0.00001, 0.3])
    rho: List[float] = Field(default_factory=lambda: [-0.9, 0.7])
    # rho's interval is open on both ends in the study design.
    rho_open: bool = True

    @field_validator("mu", "kappa", "theta", "sigma", "rho")
    @classmethod
    def check_pair(cls, value: List[float]) -> List[float]:
        if len(value) != 2:
            raise ValueError("expected 'lower, upper'")
        if not value[0] < value[1]:
            raise ValueError("lower bound must be below upper bound")
        return value


class OptimSettings(_Section):
    max_iters: int = Field(default=500, ge=1)
    grad_tol: float = Field(default=1e-6, gt=0)
    step_tol: float = Field(default=1e-10, gt=0)
    f_tol: float = Field(default=1e-14, ge=0)
    memory: int = Field(default=10, ge=1)
    fd_step_rel: float = Field(default=1e-6, gt=0)
    kappa_cap: float = Field(default=1e3, gt=0)
    interior_eps: float = Field(default=1e-8, gt=0, lt=0.5)
    max_line_search: int = Field(default=20, ge=1)


class StudySettings(_Section):
    x0: List[float] = Field(default_factory=lambda: list(DEFAULT_INITIAL_GUESS))
    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    n_list: List[int] = Field(default_factory=lambda: list(DEFAULT_N_LIST))
    feature_mode: FeatureMode = FeatureMode.PER_PATH
    single_path_mode: SinglePathMode = SinglePathMode.PER_TIMESTEP
    target_mode: TargetMode = TargetMode.MEAN_Q
    variance_feature: VarianceFeature = VarianceFeature.MEAN_V
    column_source: ColumnSource = ColumnSource.INITIAL_GUESS
    projection_mode: ProjectionMode = ProjectionMode.WHITENED
    delta: float = Field(default=1e-6, gt=0)
    workers: int = Field(default_factory=lambda: int(os.getenv("SLICED_WORKERS", "1")), ge=1)
    acf_max_lag: int = Field(default=20, ge=1)

    @field_validator("x0")
    @classmethod
    def check_x0(cls, value: List[float]) -> List[float]:
        if len(value) != 5:
            raise ValueError("x0 needs five entries (mu, kappa, theta, sigma, rho)")
        return value

    @field_validator("seeds", "n_list")
    @classmethod
    def check_non_empty(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("must not be empty")
        if any(item < 0 for item in value):
            raise ValueError("entries must be non-negative")
        return value


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelSettings = Field(default_factory=ModelSettings)
    sim: SimSettings = Field(default_factory=SimSettings)
    sir: SirSettings = Field(default_factory=SirSettings)
    bounds: BoundsSettings = Field(default_factory=BoundsSettings)
    optim: OptimSettings = Field(default_factory=OptimSettings)
    study: StudySettings = Field(default_factory=StudySettings)

    def flatten(self) -> Dict[str, str]:
        """Fully resolved dotted-key view, in schema order."""
        flat: Dict[str, str] = {}
        for section_name in type(self).model_fields:
            section = getattr(self, section_name)
            for field_name in type(section).model_fields:
                flat[f"{section_name}.{field_name}"] = _format_value(
                    getattr(section, field_name)
                )
        return flat

    def to_flat_text(self) -> str:
        return "".join(f"{key} = {value}\n" for key, value in self.flatten().items())

    def with_overrides(self, overrides: Mapping[str, str]) -> "Settings":
        flat = self.flatten()
        flat.update(overrides)
        return settings_from_flat(flat)


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format_value(item) for item in value)
    return str(value)


def _section_models() -> Dict[str, type]:
    return {
        name: field.annotation for name, field in Settings.model_fields.items()
    }


def all_keys() -> List[str]:
    return [
        f"{section}.{field}"
        for section, model in _section_models().items()
        for field in model.model_fields
    ]


def parse_flat_config(text: str, *, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    flat: Dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw_line.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: missing key")
        flat[key] = value
    return flat


def _nest(flat: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    sections = _section_models()
    nested: Dict[str, Dict[str, Any]] = {}
    for key, value in flat.items():
        section, _, field = key.partition(".")
        model = sections.get(section)
        if model is None or field not in model.model_fields:
            raise UsageError(
                f"unknown config key {key!r}",
                suggestions=difflib.get_close_matches(key, all_keys(), n=1, cutoff=0.0),
            )
        annotation = model.model_fields[field].annotation
        if isinstance(value, str) and get_origin(annotation) in (list, List):
            value = [item.strip() for item in value.split(",") if item.strip()]
        nested.setdefault(section, {})[field] = value
    return nested


def settings_from_flat(flat: Mapping[str, Any]) -> Settings:
    try:
        return Settings.model_validate(_nest(flat))
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"][:2])
        raise UsageError(f"invalid value for {where}: {first['msg']}") from exc


def load_settings(
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> Settings:
    """
    Resolve settings: schema defaults, then the config file, then ``overrides``.
    """
    if config_path is None and os.getenv("SLICED_CONFIG"):
        config_path = Path(os.environ["SLICED_CONFIG"])

    flat: Dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        flat.update(parse_flat_config(path.read_text(encoding="utf-8"), source=str(path)))
        logger.info("Loaded %d config keys from %s", len(flat), path)

    flat.update(overrides or {})
    return settings_from_flat(flat)
