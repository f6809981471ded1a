"""kvtandem: an ordered key-value storage engine that pairs an unordered
log-structured value store with an LSM key index and serves single-version
point reads directly from the value store."""

from .config import EngineConfig, config_from_env, load_config
from .engine import Db, EngineCounters, SnapshotHandle
from .errors import KvTandemError
from .kvs import KvsStats, MemoryMedia, Store, StoreConfig
from .recovery import RecoveryReport, recover

__all__ = [
    "Db",
    "EngineConfig",
    "EngineCounters",
    "KvTandemError",
    "KvsStats",
    "MemoryMedia",
    "RecoveryReport",
    "SnapshotHandle",
    "Store",
    "StoreConfig",
    "config_from_env",
    "load_config",
    "recover",
]

__version__ = "0.1.0"
