# backend/app/core/enums.py
"""String-valued enums shared by the settings schema, the core and the studies."""

from enum import Enum


class SlicingMode(str, Enum):
    EQUAL_WIDTH = "equal-width"
    EQUAL_COUNT = "equal-count"


class FeatureMode(str, Enum):
    PER_PATH = "per-path"
    PER_TIMESTEP = "per-timestep"


class SinglePathMode(str, Enum):
    # per-timestep: one row per step of the single path.
    # single-row: the single per-path row, SIR run on one observation.
    PER_TIMESTEP = "per-timestep"
    SINGLE_ROW = "single-row"


class TargetMode(str, Enum):
    MEAN_Q = "mean-Q"
    TERMINAL_Q = "terminal-Q"


class VarianceFeature(str, Enum):
    MEAN_V = "mean-v"
    TERMINAL_V = "terminal-v"


class ColumnSource(str, Enum):
    INITIAL_GUESS = "initial-guess"
    TRUE_PARAMS = "true-params"


class ProjectionMode(str, Enum):
    WHITENED = "whitened"
    RAW = "raw"


class Method(str, Enum):
    DI = "DI"
    SI = "SI"
