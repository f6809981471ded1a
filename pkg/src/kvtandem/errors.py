"""Exception types shared across the engine."""


class KvTandemError(Exception):
    """Base class for all engine errors."""


class StoreClosedError(KvTandemError):
    """Operation attempted on a closed value store or database."""


class SizeLimitError(KvTandemError):
    """Key or value exceeds the configured size caps."""


class IoFailureError(KvTandemError):
    """Underlying storage failed to persist data."""


class NameExistsError(KvTandemError):
    """kvfs file name already in use."""


class NotFoundError(KvTandemError):
    """Named object (file, checkpoint) does not exist."""


class FileDeletedError(KvTandemError):
    """Write attempted on a deleted kvfs file."""


class OutOfRangeError(KvTandemError):
    """Read beyond the end of a kvfs file."""


class UnsortedInputError(KvTandemError):
    """SST builder received entries out of (key asc, sn desc) order."""


class StaleSnapshotError(KvTandemError):
    """Snapshot handle is not active (already released or pre-crash)."""


class DoubleReleaseError(KvTandemError):
    """Snapshot or checkpoint released twice."""


class UnrecoverableDbError(KvTandemError):
    """Manifest is unreadable; the database cannot be opened."""


class ConfigError(KvTandemError):
    """Invalid engine or benchmark configuration."""
