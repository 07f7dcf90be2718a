"""Engines answering version, range, point and evolution queries."""
from typing import Optional

from ..storage import KvBackend
from .base import Engine, InconsistentDelta, StoreError, UnknownVersion
from .baselines import DeltaBaseline, SingleAddress, SubChunkBaseline
from .chunked import ChunkedStore, CompactionStats, DeltaStore, IndexSet
from .config import ConfigError, EngineConfig

ENGINE_CLASSES = {"chunked": ChunkedStore, "delta": DeltaBaseline,
                  "subchunk": SubChunkBaseline, "single": SingleAddress}


def open_engine(cfg: EngineConfig, backend: Optional[KvBackend] = None) -> Engine:
    """Open (or create) the engine named by ``cfg.engine`` over ``backend``,
    building the backend from the config when none is given."""
    return ENGINE_CLASSES[cfg.engine](backend if backend is not None else cfg.make_backend(), cfg)


__all__ = ["ChunkedStore", "CompactionStats", "ConfigError", "DeltaBaseline", "DeltaStore", "Engine",
           "EngineConfig", "InconsistentDelta", "IndexSet", "SingleAddress", "StoreError",
           "SubChunkBaseline", "UnknownVersion", "open_engine", "ENGINE_CLASSES"]
