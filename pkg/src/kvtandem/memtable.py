"""In-memory sorted write buffer.

Holds values only until flush; each key maps to its versions newest-first.
Writers are serialized by the engine's commit lock, readers rely on
CPython dict atomicity.
"""

from __future__ import annotations

from typing import Iterator, Optional

from .sst import KIND_TOMBSTONE


class Memtable:
    __slots__ = ("entries", "bytes", "max_sn", "wal_name")

    def __init__(self, wal_name: Optional[str] = None) -> None:
        # key -> list of (sn, kind, value|None), sn strictly decreasing
        self.entries: dict[bytes, list[tuple[int, int, Optional[bytes]]]] = {}
        self.bytes = 0
        self.max_sn = 0
        self.wal_name = wal_name

    def insert(self, key: bytes, sn: int, kind: int, value: Optional[bytes]) -> None:
        if sn <= self.max_sn:
            raise ValueError(f"sn {sn} not increasing (max {self.max_sn})")
        versions = self.entries.get(key)
        if versions is None:
            self.entries[key] = [(sn, kind, value)]
            self.bytes += len(key) + 32
        else:
            versions.insert(0, (sn, kind, value))
        self.bytes += (len(value) if value is not None else 0) + 24
        self.max_sn = sn

    def get(self, key: bytes) -> Optional[tuple[int, int, Optional[bytes]]]:
        versions = self.entries.get(key)
        return versions[0] if versions else None

    def get_before(self, key: bytes, sn: int) -> Optional[tuple[int, int, Optional[bytes]]]:
        """Newest version with version.sn < sn (strict)."""
        versions = self.entries.get(key)
        if not versions:
            return None
        for v in versions:
            if v[0] < sn:
                return v
        return None

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def sorted_items(self) -> Iterator[tuple[bytes, list[tuple[int, int, Optional[bytes]]]]]:
        for key in sorted(self.entries):
            yield key, self.entries[key]

    def iter_range(self, from_key: Optional[bytes], to_key: Optional[bytes]):
        """(key, versions) for keys in [from_key, to_key], ascending."""
        for key in sorted(self.entries):
            if from_key is not None and key < from_key:
                continue
            if to_key is not None and key > to_key:
                break
            yield key, self.entries[key]


TOMBSTONE_KIND = KIND_TOMBSTONE
