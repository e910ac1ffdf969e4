# backend/app/cli/dependencies.py

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from ..cache.cache_manager import PathCache
from ..config.settings import Settings
from ..services.experiment_service import ExperimentConfig, ExperimentService
from ..services.report_service import ReportService

load_dotenv()

# One cache per process so the figure step reuses the study's paths.
path_cache = PathCache(max_size=int(os.getenv("SLICED_CACHE_SIZE", "64")))


def default_output_dir() -> Path:
    return Path(os.getenv("SLICED_OUTPUT_DIR", "output"))


def get_experiment_service(settings: Settings) -> ExperimentService:
    """
    Dependency injection for ExperimentService.
    """
    return ExperimentService(path_cache, ExperimentConfig.from_settings(settings))


def get_report_service(output_dir: Optional[Path] = None) -> ReportService:
    """
    Dependency injection for ReportService.
    """
    return ReportService(output_dir or default_output_dir())
