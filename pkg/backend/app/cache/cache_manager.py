# backend/app/cache/cache_manager.py
import logging
import threading
import time
from typing import Dict, Optional, Tuple

from ..core.heston import HestonParams, PathSet, SimConfig, simulate_paths

logger = logging.getLogger(__name__)

CacheKey = Tuple[HestonParams, SimConfig]


class PathCache:
    """
    Simulated path sets keyed by (parameters, simulation config).

    Simulation is deterministic in its key, so an entry never goes stale; the
    oldest entry is dropped once ``max_size`` is reached.
    """

    def __init__(self, max_size: int = 64):
        self.max_size = max_size
        self.cache: Dict[CacheKey, Dict[str, object]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, params: HestonParams, config: SimConfig) -> Optional[PathSet]:
        with self._lock:
            item = self.cache.get((params, config))
            if item is None:
                self.misses += 1
                return None
            self.hits += 1
            return item["value"]

    def set(self, params: HestonParams, config: SimConfig, paths: PathSet) -> None:
        with self._lock:
            if self.max_size < 1:
                return
            if len(self.cache) >= self.max_size and (params, config) not in self.cache:
                oldest = min(self.cache.items(), key=lambda x: x[1]["timestamp"])
                del self.cache[oldest[0]]
            self.cache[(params, config)] = {"value": paths, "timestamp": time.monotonic()}

    def get_or_simulate(self, params: HestonParams, config: SimConfig) -> PathSet:
        paths = self.get(params, config)
        if paths is None:
            paths = simulate_paths(params, config)
            self.set(params, config, paths)
            logger.debug("Cached %d paths for seed %d", config.n_paths, config.seed)
        return paths

    def clear(self) -> None:
        with self._lock:
            self.cache.clear()
