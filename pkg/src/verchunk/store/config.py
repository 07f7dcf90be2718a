"""Engine configuration read from ``key=value`` text files."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Optional

from ..storage import FileBackend, KvBackend, LatencySimBackend, MemoryBackend

ENGINES = ("chunked", "delta", "subchunk", "single")
BACKENDS = ("memory", "file", "latency")


class ConfigError(ValueError):
    pass


@dataclass
class EngineConfig:
    engine: str = "chunked"
    algorithm: str = "bottomUp"
    capacity: int = 10_000
    slack: float = 0.25
    k: int = 1
    beta: Optional[int] = None
    shingles: int = 4
    exact_multichild: bool = False
    batch_size: int = 50
    backend: str = "memory"
    path: str = ""
    parallelism: int = 16
    per_request_latency: float = 0.0005
    per_byte_latency: float = 2e-9
    realtime: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.k < 1 or self.batch_size < 1 or self.parallelism < 1 or self.capacity < 1:
            raise ConfigError("k, batch_size, parallelism and capacity must be positive")
        if self.backend == "file" and not self.path:
            raise ConfigError("file backend needs a path")

    @classmethod
    def parse(cls, text: str, **overrides) -> "EngineConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value")
            name, raw = (s.strip() for s in line.split("=", 1))
            if name not in types:
                raise ConfigError(f"line {n}: unknown setting {name!r}")
            values[name] = _coerce(types[name], raw, n)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, filename: str, /, **overrides) -> "EngineConfig":
        with open(filename) as f:
            return cls.parse(f.read(), **overrides)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "EngineConfig":
        return dataclasses.replace(self, **kw)

    def make_backend(self) -> KvBackend:
        if self.backend == "memory":
            return MemoryBackend()
        if self.backend == "file":
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            return FileBackend(self.path)
        inner = FileBackend(self.path) if self.path else MemoryBackend()
        return LatencySimBackend(inner, self.per_request_latency, self.per_byte_latency, self.realtime)


def _coerce(typ: str, raw: str, line: int):
    try:
        if typ == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "Optional[int]":
            return int(raw) if raw else None
        return raw
    except ValueError:
        raise ConfigError(f"line {line}: cannot read {raw!r} as {typ}") from None
