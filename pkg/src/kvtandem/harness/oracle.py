"""Brute-force multiversion ordered map: ground truth for equivalence tests.

Every key maps to its full version history (sn ascending, None marking a
deletion).  The same clock convention as the engine: the clock holds the
next sn to issue, a snapshot is the clock value at creation, and a read at
snapshot S sees the newest version with sn < S.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass
from typing import Iterator, Optional


@dataclass(frozen=True)
class OracleSnapshot:
    id: int
    sn: int


class OracleDb:
    def __init__(self) -> None:
        self.versions: dict[bytes, list[tuple[int, Optional[bytes]]]] = {}
        self.clock = 1
        self.snapshots: dict[int, int] = {}
        self._next_id = 1

    def put(self, key: bytes, value: bytes) -> int:
        sn = self.clock
        self.clock += 1
        self.versions.setdefault(key, []).append((sn, value))
        return sn

    def delete(self, key: bytes) -> int:
        sn = self.clock
        self.clock += 1
        self.versions.setdefault(key, []).append((sn, None))
        return sn

    def snapshot_create(self) -> OracleSnapshot:
        snap = OracleSnapshot(id=self._next_id, sn=self.clock)
        self._next_id += 1
        self.snapshots[snap.id] = snap.sn
        return snap

    def snapshot_release(self, snap: OracleSnapshot) -> None:
        del self.snapshots[snap.id]

    def release_all_snapshots(self) -> None:
        self.snapshots.clear()

    def get(self, key: bytes) -> Optional[bytes]:
        history = self.versions.get(key)
        return history[-1][1] if history else None

    def get_at(self, key: bytes, snap: OracleSnapshot) -> Optional[bytes]:
        return self._get_before(key, snap.sn)

    def _get_before(self, key: bytes, sn: int) -> Optional[bytes]:
        history = self.versions.get(key)
        if not history:
            return None
        i = bisect_left(history, (sn, None)) - 1  # newest with version sn < sn
        if i < 0:
            return None
        return history[i][1]

    def iterate_at(self, from_key: Optional[bytes], to_key: Optional[bytes],
                   snap: OracleSnapshot) -> list[tuple[bytes, bytes]]:
        return self._range(from_key, to_key, snap.sn)

    def iterate(self, from_key: Optional[bytes] = None,
                to_key: Optional[bytes] = None) -> list[tuple[bytes, bytes]]:
        return self._range(from_key, to_key, self.clock)

    def _range(self, from_key, to_key, bound: int) -> list[tuple[bytes, bytes]]:
        out = []
        for key in sorted(self.versions):
            if from_key is not None and key < from_key:
                continue
            if to_key is not None and key > to_key:
                break
            value = self._get_before(key, bound)
            if value is not None:
                out.append((key, value))
        return out

    def live_state(self) -> dict[bytes, bytes]:
        out = {}
        for key, history in self.versions.items():
            if history[-1][1] is not None:
                out[key] = history[-1][1]
        return out

    def live_count(self) -> int:
        return sum(1 for h in self.versions.values() if h[-1][1] is not None)
