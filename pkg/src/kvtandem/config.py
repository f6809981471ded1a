"""Engine configuration, loadable from plain-text key=value files."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class EngineConfig:
    nodirect: bool = False          # all writes versioned, bypass disabled
    iterator_workers: int = 4       # value-fetch parallelism per iterator
    row_cache_bytes: int = 0        # 0 disables the row cache
    sync_wal: bool = True
    memtable_bytes: int = 1 << 20
    background: bool = False        # True: flush/compaction worker threads
    inline_maintenance: bool = False  # deterministic auto flush/compact
    compaction_workers: int = 2
    prefetch_workers: int = 4
    segment_bytes: int = 4 << 20
    kvs_buffer_bytes: int = 64 << 10
    gc_dead_fraction: float = 0.5

    def validate(self) -> "EngineConfig":
        if not 1 <= self.iterator_workers <= 64:
            raise ConfigError(f"iterator_workers {self.iterator_workers} outside 1..=64")
        if self.row_cache_bytes < 0:
            raise ConfigError("row_cache_bytes must be >= 0")
        if self.memtable_bytes < 1024:
            raise ConfigError("memtable_bytes too small")
        return self


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> EngineConfig:
    by_name = {f.name: f.type for f in fields(EngineConfig)}
    kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown option {key!r}")
        kind = by_name[key]
        if kind == "bool":
            if value.lower() not in _BOOLS:
                raise ConfigError(f"line {lineno}: bad boolean {value!r}")
            kwargs[key] = _BOOLS[value.lower()]
        elif kind == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    return EngineConfig(**kwargs).validate()


def load_config(path: str) -> EngineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def config_from_env(default: EngineConfig | None = None) -> EngineConfig:
    """TANDEM_CONFIG names the engine config file, if set."""
    path = os.environ.get("TANDEM_CONFIG")
    if path:
        return load_config(path)
    return (default or EngineConfig()).validate()
