"""Leveled structure of sealed SST files and compaction-job selection.

L0 files may overlap and are searched newest to oldest; every deeper level
is a run of files with pairwise-disjoint key ranges.  Level capacity grows
by a factor of 10 from an 8 MiB L1.  LevelSet values are immutable: commits
swap in a rebuilt instance so readers can keep using the one they grabbed.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterator, Optional

L0_COMPACTION_TRIGGER = 4
BASE_LEVEL_BYTES = 8 << 20
LEVEL_FACTOR = 10
MAX_LEVELS = 8


@dataclass(frozen=True)
class SstMeta:
    id: int
    level: int
    min_key: bytes
    max_key: bytes
    entry_count: int
    file_len: int

    @property
    def name(self) -> str:
        return sst_name(self.id)

    def overlaps(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        if lo is not None and self.max_key < lo:
            return False
        if hi is not None and self.min_key > hi:
            return False
        return True


def sst_name(sst_id: int) -> str:
    return f"sst/{sst_id:010d}"


@dataclass(frozen=True)
class CompactionJob:
    inputs: tuple[SstMeta, ...]
    target_level: int
    is_bottommost: bool

    @property
    def min_key(self) -> bytes:
        return min(f.min_key for f in self.inputs)

    @property
    def max_key(self) -> bytes:
        return max(f.max_key for f in self.inputs)


class LevelSet:
    def __init__(self, levels: Optional[list[list[SstMeta]]] = None) -> None:
        levels = levels or []
        while len(levels) < MAX_LEVELS:
            levels.append([])
        # L0 newest (highest id) first; deeper levels sorted by min_key
        l0 = sorted(levels[0], key=lambda f: -f.id)
        deeper = [sorted(lv, key=lambda f: f.min_key) for lv in levels[1:]]
        self.levels: tuple[tuple[SstMeta, ...], ...] = tuple(
            [tuple(l0)] + [tuple(lv) for lv in deeper])
        self._level_mins: list[list[bytes]] = [
            [f.min_key for f in lv] for lv in self.levels]

    def all_files(self) -> list[SstMeta]:
        return [f for lv in self.levels for f in lv]

    def file_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def level_bytes(self, level: int) -> int:
        return sum(f.file_len for f in self.levels[level])

    def lowest_nonempty(self) -> int:
        low = -1
        for i, lv in enumerate(self.levels):
            if lv:
                low = i
        return low

    def with_edit(self, add: list[SstMeta] = (), drop_ids: set[int] = frozenset()) -> "LevelSet":
        levels: list[list[SstMeta]] = [
            [f for f in lv if f.id not in drop_ids] for lv in self.levels]
        for f in add:
            levels[f.level].append(f)
        return LevelSet(levels)

    # ----------------------------------------------------------- key lookup

    def files_for_key(self, key: bytes) -> Iterator[SstMeta]:
        """Files to consult for a point lookup, in LSM search order:
        all covering L0 files newest first, then one file per deeper level."""
        for f in self.levels[0]:
            if f.min_key <= key <= f.max_key:
                yield f
        for i in range(1, len(self.levels)):
            f = self._lookup(i, key)
            if f is not None:
                yield f

    def files_below(self, level: int, key: bytes) -> Iterator[SstMeta]:
        """Files covering key strictly deeper than ``level``."""
        for i in range(max(level + 1, 1), len(self.levels)):
            f = self._lookup(i, key)
            if f is not None:
                yield f

    def _lookup(self, level: int, key: bytes) -> Optional[SstMeta]:
        files = self.levels[level]
        if not files:
            return None
        i = bisect_right(self._level_mins[level], key) - 1
        if i >= 0 and files[i].max_key >= key:
            return files[i]
        return None

    def overlapping(self, level: int, lo: bytes, hi: bytes) -> list[SstMeta]:
        return [f for f in self.levels[level] if f.overlaps(lo, hi)]

    # ------------------------------------------------------------ compaction

    def pick_compaction(self) -> Optional[CompactionJob]:
        """A job when L0 hits its file-count trigger or a deeper level
        exceeds capacity; inputs are the chosen files plus every
        intersecting file at the target level."""
        if len(self.levels[0]) >= L0_COMPACTION_TRIGGER:
            chosen = list(self.levels[0])
            return self._job(chosen, from_level=0, target=1)
        for level in range(1, len(self.levels) - 1):
            cap = BASE_LEVEL_BYTES * (LEVEL_FACTOR ** (level - 1))
            if self.level_bytes(level) > cap and self.levels[level]:
                chosen = [min(self.levels[level], key=lambda f: f.id)]
                return self._job(chosen, from_level=level, target=level + 1)
        return None

    def _job(self, chosen: list[SstMeta], from_level: int, target: int) -> CompactionJob:
        lo = min(f.min_key for f in chosen)
        hi = max(f.max_key for f in chosen)
        if from_level == 0:
            # take every transitively overlapping L0 file to keep sn order
            changed = True
            while changed:
                changed = False
                for f in self.levels[0]:
                    if f not in chosen and f.overlaps(lo, hi):
                        chosen.append(f)
                        lo, hi = min(lo, f.min_key), max(hi, f.max_key)
                        changed = True
        inputs = list(chosen) + self.overlapping(target, lo, hi)
        lo = min(f.min_key for f in inputs)
        hi = max(f.max_key for f in inputs)
        return CompactionJob(
            inputs=tuple(inputs),
            target_level=target,
            is_bottommost=self._is_bottommost(target, lo, hi),
        )

    def _is_bottommost(self, target: int, lo: bytes, hi: bytes) -> bool:
        for i in range(target + 1, len(self.levels)):
            if any(f.overlaps(lo, hi) for f in self.levels[i]):
                return False
        return True

    def full_compaction(self) -> Optional[CompactionJob]:
        """Merge every live file into the lowest non-empty level (>=1)."""
        files = self.all_files()
        if not files:
            return None
        target = max(1, self.lowest_nonempty())
        return CompactionJob(inputs=tuple(files), target_level=target, is_bottommost=True)
