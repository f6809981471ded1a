"""The storage engine core.

Values live in the unordered store under two namespaces:

    direct:     0x44('D') || user_key            value = sn_be64 || payload
    versioned:  0x56('V') || user_key || sn_be64 value = payload

The LSM (memtable + WAL + leveled SSTs) indexes keys and version metadata
only.  A point get first consults the per-file Bloom filters, which cover
versioned/tombstone keys exclusively: when every filter says no, the LSM
search is skipped outright and the value is fetched with a single store
read.  Snapshots force new versions into versioned mode; compactions
rename versioned values back to direct once no snapshot or deeper
versioned entry needs them.

Deterministic mode (default) runs flush/compaction only when
flush_now/compact_now/compact_all are called, which the fault-injection
harness requires; background=True starts worker threads instead.
"""

from __future__ import annotations

import heapq
import itertools
import json
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional

from .bloom import hash_pair
from .config import EngineConfig
from .errors import (DoubleReleaseError, SizeLimitError, StaleSnapshotError,
                     StoreClosedError)
from .kvfs import Kvfs, KvfsFile
from .kvs import MAX_KEY_LEN, MAX_VALUE_LEN, Store
from .levels import CompactionJob, LevelSet, SstMeta, sst_name
from .manifest import (AddSst, ClockHwm, DropSst, KvfsCreate, KvfsDelete,
                       KvfsSeal, Manifest, WalTruncate)
from .memtable import Memtable
from .sst import (KIND_DIRECT, KIND_TOMBSTONE, KIND_VERSIONED, SstBuilder,
                  SstReader)
from . import wal as walfmt
from .util import u64

DIRECT_TAG = b"D"
VERSIONED_TAG = b"V"

MAX_USER_KEY = 1000                 # leaves room for tag + sn suffix
MAX_USER_VALUE = MAX_VALUE_LEN - 8  # direct values embed the 8-byte sn

MEM_PUT = 0

SST_SPLIT_BYTES = 8 << 20


def direct_key(key: bytes) -> bytes:
    return DIRECT_TAG + key


def versioned_key(key: bytes, sn: int) -> bytes:
    return VERSIONED_TAG + key + u64.pack(sn)


def wal_name(seq: int) -> str:
    return f"wal/{seq:010d}"


@dataclass
class EngineCounters:
    puts: int = 0
    deletes: int = 0
    gets: int = 0
    kvs_value_reads: int = 0
    sst_block_reads: int = 0
    bloom_checks: int = 0
    bloom_false_positives: int = 0
    renames: int = 0
    direct_writes: int = 0
    versioned_writes: int = 0
    fallback_reads: int = 0
    row_cache_hits: int = 0

    @property
    def kvs_value_writes(self) -> int:
        return self.direct_writes + self.versioned_writes + self.renames

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["kvs_value_writes"] = self.kvs_value_writes
        return d

    def as_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


@dataclass(frozen=True)
class SnapshotHandle:
    id: int
    sn: int


class _RowCache:
    """LRU map user key -> (sn, value); holds only the newest committed
    version and is updated in place by writers."""

    def __init__(self, capacity_bytes: int) -> None:
        self.capacity = capacity_bytes
        self.bytes = 0
        self._map: OrderedDict[bytes, tuple[int, bytes]] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: bytes) -> Optional[tuple[int, bytes]]:
        with self._lock:
            item = self._map.get(key)
            if item is not None:
                self._map.move_to_end(key)
            return item

    def fill(self, key: bytes, sn: int, value: bytes) -> None:
        with self._lock:
            old = self._map.get(key)
            if old is not None:
                if old[0] >= sn:
                    return
                self.bytes -= len(old[1])
            else:
                self.bytes += len(key) + 64
            self._map[key] = (sn, value)
            self._map.move_to_end(key)
            self.bytes += len(value)
            while self.bytes > self.capacity and self._map:
                k, (_, v) = self._map.popitem(last=False)
                self.bytes -= len(k) + 64 + len(v)

    def update_in_place(self, key: bytes, sn: int, value: bytes) -> None:
        with self._lock:
            old = self._map.get(key)
            if old is None:
                return
            self.bytes += len(value) - len(old[1])
            self._map[key] = (sn, value)

    def invalidate(self, key: bytes) -> None:
        with self._lock:
            old = self._map.pop(key, None)
            if old is not None:
                self.bytes -= len(key) + 64 + len(old[1])


class _View(NamedTuple):
    memtables: tuple[Memtable, ...]  # newest first
    levels: LevelSet


class Db:
    """One open database.  Public API is thread-safe; a single commit lock
    serializes sn assignment, WAL append and memtable insert."""

    def __init__(self, store: Store, kvfs: Kvfs, manifest: Manifest,
                 levels: LevelSet, readers: dict[int, SstReader],
                 config: EngineConfig, clock: int, wal_seq: int,
                 wal_truncate_sn: int, next_sst_id: int) -> None:
        self.store = store
        self.kvfs = kvfs
        self.manifest = manifest
        self.config = config
        self.counters = EngineCounters()
        self._readers = readers
        self._clock = clock
        self._closed = False
        self._commit = threading.RLock()
        self._manifest_lock = threading.RLock()
        self._flush_lock = threading.Lock()
        self._compact_lock = threading.Lock()
        self._rotate_lock = threading.Lock()
        self._wal_seq = wal_seq
        self._wal_truncate_sn = wal_truncate_sn
        self._next_sst_id = next_sst_id
        self._immutables: list[Memtable] = []
        self._active: Optional[Memtable] = None
        self._wal_file: Optional[KvfsFile] = None
        self._snap_sns: list[int] = []
        self._snap_handles: dict[int, int] = {}
        self._next_handle = 1
        self._persisted_snaps: dict[int, int] = {}   # checkpoint sn -> handle id
        self._pins: dict[str, set[str]] = {}         # checkpoint dir -> sst names
        self._direct_seen: set[bytes] = set()
        self._renames_suspended = 0
        self._view = _View((), levels)
        self.row_cache = (_RowCache(config.row_cache_bytes)
                          if config.row_cache_bytes > 0 else None)
        self.on_commit = None      # harness hook: fn(kind: str) after commits
        self.last_recovery = None
        self._bg_stop = threading.Event()
        self._bg_wake = threading.Condition()
        self._workers: list[threading.Thread] = []
        self._wire_kvfs_hooks()

    # ----------------------------------------------------------- lifecycle

    @classmethod
    def open(cls, path: Optional[str] = None, *, store: Optional[Store] = None,
             config: Optional[EngineConfig] = None) -> "Db":
        from .recovery import recover
        db, _report = recover(path, store=store, config=config)
        return db

    def _wire_kvfs_hooks(self) -> None:
        self.kvfs.on_create = lambda name, extent, kind: self._log(
            [KvfsCreate(name, extent, kind)])
        self.kvfs.on_delete = lambda name: self._log([KvfsDelete(name)])
        self.kvfs.on_seal = lambda name, length: self._log([KvfsSeal(name, length)])

    def _log(self, edits: list) -> None:
        with self._manifest_lock:
            self.manifest.log(edits, sync=True)

    def _finish_open(self) -> None:
        """Install the first memtable + WAL (workers start after recovery)."""
        with self._rotate_lock, self._manifest_lock:
            self._wal_seq += 1
            f = self.kvfs.create(wal_name(self._wal_seq), "wal")
            with self._commit:
                self._wal_file = f
                self._active = Memtable(wal_name=f.name)
                self._refresh_view()

    def close(self, flush: bool = True) -> None:
        if self._closed:
            return
        if self.config.background:
            self._bg_stop.set()
            with self._bg_wake:
                self._bg_wake.notify_all()
            for t in self._workers:
                t.join()
        if flush:
            self.flush_now()
        self._closed = True
        self.kvfs.close()
        self.store.close()

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosedError("db is closed")

    def _refresh_view(self) -> None:
        mts = tuple([self._active] + list(reversed(self._immutables)))
        self._view = _View(mts, self._view.levels)

    def _swap_levels(self, levels: LevelSet) -> None:
        self._view = _View(self._view.memtables, levels)

    @property
    def levels(self) -> LevelSet:
        return self._view.levels

    @property
    def clock(self) -> int:
        return self._clock

    def reader(self, sst_id: int) -> SstReader:
        return self._readers[sst_id]

    # ------------------------------------------------------------- writes

    def _validate_user_kv(self, key: bytes, value: Optional[bytes]) -> None:
        if not 1 <= len(key) <= MAX_USER_KEY:
            raise SizeLimitError(f"user key length {len(key)} outside 1..{MAX_USER_KEY}")
        if value is not None and len(value) > MAX_USER_VALUE:
            raise SizeLimitError(f"value length {len(value)} exceeds {MAX_USER_VALUE}")

    def put(self, key: bytes, value: bytes) -> None:
        self._check_open()
        self._validate_user_kv(key, value)
        with self._commit:
            sn = self._clock
            self._clock += 1
            rec = walfmt.encode_record(walfmt.OP_PUT, sn, key, value)
            self.kvfs.append(self._wal_file, rec)
            if self.config.sync_wal:
                self.kvfs.sync(self._wal_file)
            self._active.insert(key, sn, MEM_PUT, value)
            if self.row_cache is not None:
                self.row_cache.update_in_place(key, sn, value)
            self.counters.puts += 1
            need_rotate = self._active.bytes >= self.config.memtable_bytes
        if need_rotate:
            self._after_write_maintenance()

    def delete(self, key: bytes) -> None:
        self._check_open()
        self._validate_user_kv(key, None)
        with self._commit:
            sn = self._clock
            self._clock += 1
            rec = walfmt.encode_record(walfmt.OP_DELETE, sn, key)
            self.kvfs.append(self._wal_file, rec)
            if self.config.sync_wal:
                self.kvfs.sync(self._wal_file)
            self._active.insert(key, sn, KIND_TOMBSTONE, None)
            if self.row_cache is not None:
                self.row_cache.invalidate(key)
            self.counters.deletes += 1
            need_rotate = self._active.bytes >= self.config.memtable_bytes
        if need_rotate:
            self._after_write_maintenance()

    def _after_write_maintenance(self) -> None:
        self._rotate_memtable()
        if self.config.background:
            with self._bg_wake:
                self._bg_wake.notify_all()
        elif self.config.inline_maintenance:
            self._flush_pending()
            while self.compact_now():
                pass

    def _rotate_memtable(self) -> None:
        with self._rotate_lock:
            with self._commit:
                if self._active.bytes < self.config.memtable_bytes or self._active.is_empty():
                    return
            with self._manifest_lock:
                self._wal_seq += 1
                f = self.kvfs.create(wal_name(self._wal_seq), "wal")
            with self._commit:
                self._immutables.append(self._active)
                self._active = Memtable(wal_name=f.name)
                self._wal_file = f
                self._refresh_view()

    # -------------------------------------------------------------- reads

    def get(self, key: bytes) -> Optional[bytes]:
        self._check_open()
        c = self.counters
        c.gets += 1
        if self.row_cache is not None:
            hit = self.row_cache.get(key)
            if hit is not None:
                c.row_cache_hits += 1
                return hit[1]
        view = self._view
        found = self._point_read(key, None, view, c)
        if found is not None and found[1] is not None and self.row_cache is not None:
            self.row_cache.fill(key, found[0], found[1])
        return None if found is None else found[1]

    def get_at(self, key: bytes, snapshot: SnapshotHandle) -> Optional[bytes]:
        self._check_open()
        with self._commit:
            if self._snap_handles.get(snapshot.id) != snapshot.sn:
                raise StaleSnapshotError("snapshot handle is not active")
        c = self.counters
        c.gets += 1
        if self.row_cache is not None:
            hit = self.row_cache.get(key)
            if hit is not None and hit[0] < snapshot.sn:
                # the cached newest version predates the snapshot, so it is
                # also the newest version the snapshot can see
                c.row_cache_hits += 1
                return hit[1]
        found = self._point_read(key, snapshot.sn, self._view, c)
        return None if found is None else found[1]

    def _point_read(self, key: bytes, bound: Optional[int], view: _View,
                    c: Optional[EngineCounters]) -> Optional[tuple[int, Optional[bytes]]]:
        """Shared lookup: newest version (bound None) or newest with
        sn < bound.  Returns (sn, value) with value None meaning deleted,
        or None when the key is absent."""
        for mt in view.memtables:
            e = mt.get(key) if bound is None else mt.get_before(key, bound)
            if e is not None:
                sn, kind, value = e
                if kind == KIND_TOMBSTONE:
                    return (sn, None)
                return (sn, value)
        tombstone_sn: Optional[int] = None
        h1, h2 = hash_pair(key)  # probes computed once, reused per file
        store = self.store
        for f in view.levels.files_for_key(key):
            reader = self._readers[f.id]
            if c is not None:
                c.bloom_checks += 1
            if not reader.in_bloom_hashed(h1, h2):
                continue
            if bound is None:
                entry = reader.search_latest(key, c)
            else:
                entry = reader.search_latest_before(key, bound, c)
            if entry is None:
                if c is not None and bound is None:
                    c.bloom_false_positives += 1
                continue
            _, sn, kind = entry
            if kind == KIND_DIRECT:
                if c is not None and bound is None:
                    c.bloom_false_positives += 1
                break  # a direct version exists; revert to the direct path
            if kind == KIND_TOMBSTONE:
                tombstone_sn = sn
                break  # remember the deletion verdict for the direct path
            if c is not None:
                c.kvs_value_reads += 1
            v = store.get(versioned_key(key, sn))
            if v is None:
                # versioned record concurrently removed by a rename
                if c is not None:
                    c.fallback_reads += 1
                break
            return (sn, v)
        if c is not None:
            c.kvs_value_reads += 1
        raw = store.get(direct_key(key))
        if raw is None:
            return (tombstone_sn, None) if tombstone_sn is not None else None
        dsn = u64.unpack_from(raw, 0)[0]
        if bound is not None and dsn >= bound:
            return None  # direct is the oldest version; nothing precedes bound
        if tombstone_sn is not None and dsn < tombstone_sn:
            return (tombstone_sn, None)  # deleted: suppress the older direct value
        return (dsn, raw[8:])

    # ----------------------------------------------------------- snapshots

    def snapshot_create(self) -> SnapshotHandle:
        self._check_open()
        with self._commit:
            sn = self._clock
            handle = SnapshotHandle(id=self._next_handle, sn=sn)
            self._next_handle += 1
            self._snap_handles[handle.id] = sn
            self._insort_snap(sn)
            return handle

    def _insort_snap(self, sn: int) -> None:
        import bisect
        bisect.insort(self._snap_sns, sn)

    def _remove_snap(self, sn: int) -> None:
        import bisect
        i = bisect.bisect_left(self._snap_sns, sn)
        del self._snap_sns[i]

    def snapshot_release(self, handle: SnapshotHandle) -> None:
        self._check_open()
        with self._commit:
            if self._snap_handles.get(handle.id) != handle.sn:
                raise DoubleReleaseError("snapshot already released")
            del self._snap_handles[handle.id]
            self._remove_snap(handle.sn)

    def active_snapshot_sns(self) -> list[int]:
        with self._commit:
            return list(self._snap_sns)

    def _snapshot_in(self, lo_exclusive: int, hi_inclusive: int) -> bool:
        import bisect
        lo = bisect.bisect_right(self._snap_sns, lo_exclusive)
        hi = bisect.bisect_right(self._snap_sns, hi_inclusive)
        return hi > lo

    # ----------------------------------------------------------- iterators

    def iterate_at(self, from_key: Optional[bytes], to_key: Optional[bytes],
                   snapshot: SnapshotHandle,
                   workers: Optional[int] = None) -> Iterator[tuple[bytes, bytes]]:
        self._check_open()
        with self._commit:
            if self._snap_handles.get(snapshot.id) != snapshot.sn:
                raise StaleSnapshotError("snapshot handle is not active")
        if from_key is not None and to_key is not None and from_key > to_key:
            raise ValueError("from_key > to_key")
        return self._iterate(from_key, to_key, snapshot.sn, self._view, workers)

    def iterate(self, from_key: Optional[bytes] = None,
                to_key: Optional[bytes] = None,
                workers: Optional[int] = None) -> Iterator[tuple[bytes, bytes]]:
        snap = self.snapshot_create()
        try:
            yield from self.iterate_at(from_key, to_key, snap, workers)
        finally:
            self.snapshot_release(snap)

    def _iterate(self, from_key, to_key, bound: int, view: _View,
                 workers: Optional[int]) -> Iterator[tuple[bytes, bytes]]:
        selections = self._select_range(from_key, to_key, bound, view)
        n_workers = workers if workers is not None else self.config.iterator_workers
        store = self.store
        c = self.counters

        def resolve(sel):
            key, sn, kind, inline = sel
            if inline is not None:
                return key, inline, 0, 0
            if kind == KIND_DIRECT:
                raw = store.get(direct_key(key))
                if raw is None:
                    return key, None, 1, 0
                return key, raw[8:], 1, 0
            v = store.get(versioned_key(key, sn))
            if v is not None:
                return key, v, 1, 0
            raw = store.get(direct_key(key))  # renamed under us
            return key, (raw[8:] if raw is not None else None), 2, 1

        if n_workers > 1 and len(selections) > 1:
            pool = ThreadPoolExecutor(max_workers=min(n_workers, 64))
            try:
                results = list(pool.map(resolve, selections, chunksize=8))
            finally:
                pool.shutdown(wait=True)
        else:
            results = [resolve(s) for s in selections]
        for key, value, reads, fallbacks in results:
            c.kvs_value_reads += reads
            c.fallback_reads += fallbacks
            if value is not None:
                yield key, value

    def _select_range(self, from_key, to_key, bound: int,
                      view: _View) -> list[tuple[bytes, int, int, Optional[bytes]]]:
        """Merge-sort all sources and pick, per key, the newest version
        before ``bound``; tombstoned keys are dropped."""
        sources: list[Iterable] = []
        for mt in view.memtables:
            sources.append(
                (key, sn, kind, value if kind != KIND_TOMBSTONE else None, True)
                for key, versions in mt.iter_range(from_key, to_key)
                for (sn, kind, value) in versions)
        for f in view.levels.all_files():
            reader = self._readers[f.id]
            if to_key is not None and f.min_key > to_key:
                continue
            if from_key is not None and f.max_key < from_key:
                continue
            sources.append(
                (key, sn, kind, None, False)
                for (key, sn, kind) in reader.iter_from(from_key)
                if to_key is None or key <= to_key)
        merged = heapq.merge(*sources, key=lambda t: (t[0], -t[1]))
        out: list[tuple[bytes, int, int, Optional[bytes]]] = []
        for key, group in itertools.groupby(merged, key=lambda t: t[0]):
            for _, sn, kind, inline, is_mem in group:
                if sn >= bound:
                    continue
                if kind == KIND_TOMBSTONE:
                    break
                out.append((key, sn, kind, inline if is_mem else None))
                break
        return out

    # ------------------------------------------------------ mode selection

    def is_direct_mode_safe(self, key: bytes, sn: int, lvl: int,
                            hashed: Optional[tuple[int, int]] = None,
                            levels: Optional[LevelSet] = None) -> bool:
        """True when writing (key, sn) in direct mode cannot violate the
        direct-is-older invariant: no active snapshot at or before sn, and
        no possibly-versioned entry in the LSM search below ``lvl``.
        Conservative (Bloom positives force versioned mode); never unsafe."""
        if self._snap_sns and self._snap_sns[0] <= sn:
            return False
        lv = levels if levels is not None else self._view.levels
        h1, h2 = hashed if hashed is not None else hash_pair(key)
        files = lv.files_for_key(key) if lvl == 0 else lv.files_below(lvl, key)
        for f in files:
            if self._readers[f.id].in_bloom_hashed(h1, h2):
                return False
        return True

    # -------------------------------------------------------------- flush

    def flush_now(self) -> int:
        """Rotate a non-empty active memtable and flush every immutable,
        oldest first.  Returns the number of memtables flushed."""
        self._check_open()
        with self._flush_lock:
            with self._rotate_lock:
                with self._commit:
                    rotate = not self._active.is_empty()
                if rotate:
                    with self._manifest_lock:
                        self._wal_seq += 1
                        f = self.kvfs.create(wal_name(self._wal_seq), "wal")
                    with self._commit:
                        self._immutables.append(self._active)
                        self._active = Memtable(wal_name=f.name)
                        self._wal_file = f
                        self._refresh_view()
            return self._flush_pending_locked()

    def _flush_pending(self) -> int:
        with self._flush_lock:
            return self._flush_pending_locked()

    def _flush_pending_locked(self) -> int:
        n = 0
        while True:
            with self._commit:
                if not self._immutables:
                    return n
                mt = self._immutables[0]
            self._flush_one(mt)
            n += 1

    def _flush_one(self, mt: Memtable) -> None:
        sst_id = self._next_sst_id
        self._next_sst_id += 1
        with self._manifest_lock:
            builder = SstBuilder(self.kvfs, sst_name(sst_id), level=0)
        for key, versions in mt.sorted_items():
            kept = self._retained(versions)
            for sn, kind, value in kept:
                self._flush_entry(builder, key, sn, kind, value)
        reader = builder.finish()  # seals + syncs the file
        meta = SstMeta(id=sst_id, level=0, min_key=reader.min_key,
                       max_key=reader.max_key, entry_count=builder.entry_count,
                       file_len=builder.file.length)
        with self._manifest_lock:
            self.manifest.log([
                AddSst(meta.id, 0, meta.min_key, meta.max_key,
                       meta.entry_count, meta.file_len),
                ClockHwm(mt.max_sn),
                WalTruncate(mt.max_sn),
            ], sync=True)
        self._readers[sst_id] = reader
        with self._commit:
            self._swap_levels(self._view.levels.with_edit(add=[meta]))
            self._immutables.remove(mt)
            self._wal_truncate_sn = max(self._wal_truncate_sn, mt.max_sn)
            self._refresh_view()
        if mt.wal_name and self.kvfs.exists(mt.wal_name):
            with self._manifest_lock:
                self.kvfs.delete(mt.wal_name)
        if self.on_commit is not None:
            self.on_commit("flush")

    def _retained(self, versions) -> list:
        """Newest version always; an older one only while it is the newest
        version some active snapshot can see."""
        kept = [versions[0]]
        for i in range(1, len(versions)):
            if self._snapshot_in(versions[i][0], versions[i - 1][0]):
                kept.append(versions[i])
        return kept

    def _flush_entry(self, builder: SstBuilder, key: bytes, sn: int,
                     kind: int, value: Optional[bytes]) -> None:
        if kind == KIND_TOMBSTONE:
            builder.add(key, sn, KIND_TOMBSTONE)  # no store record
            return
        hashed = hash_pair(key)
        if not self.config.nodirect and self.is_direct_mode_safe(key, sn, 0, hashed):
            hint = key in self._direct_seen
            self.store.put(direct_key(key), u64.pack(sn) + value, overwrite_hint=hint)
            self._direct_seen.add(key)
            self.counters.direct_writes += 1
            builder.add(key, sn, KIND_DIRECT)
        else:
            self.store.put(versioned_key(key, sn), value, overwrite_hint=False)
            self.counters.versioned_writes += 1
            builder.add(key, sn, KIND_VERSIONED)

    # ---------------------------------------------------------- compaction

    def compact_now(self) -> bool:
        """Run one picked compaction job; False when nothing is eligible."""
        self._check_open()
        with self._compact_lock:
            job = self._view.levels.pick_compaction()
            if job is None:
                return False
            self._run_compaction(job)
            return True

    def compact_until_quiescent(self) -> int:
        n = 0
        while self.compact_now():
            n += 1
        return n

    def compact_all(self) -> bool:
        """Manual full compaction: merge every live file into the lowest
        non-empty level."""
        self._check_open()
        with self._compact_lock:
            job = self._view.levels.full_compaction()
            if job is None:
                return False
            self._run_compaction(job)
            return True

    def _run_compaction(self, job: CompactionJob) -> None:
        target = job.target_level
        streams = [self._readers[f.id].iter_entries() for f in job.inputs]
        merged = heapq.merge(*streams, key=lambda e: (e[0], -e[1]))

        builders: list[SstBuilder] = []
        metas: list[SstMeta] = []

        def current_builder() -> SstBuilder:
            if builders and builders[-1].file.length < SST_SPLIT_BYTES:
                return builders[-1]
            sst_id = self._next_sst_id
            self._next_sst_id += 1
            with self._manifest_lock:
                builders.append(SstBuilder(self.kvfs, sst_name(sst_id), level=target))
            return builders[-1]

        for key, group in itertools.groupby(merged, key=lambda e: e[0]):
            entries = [(sn, kind) for (_, sn, kind) in group]
            self._compact_key_group(key, entries, job, current_builder)

        for b in builders:
            if b.entry_count == 0:
                with self._manifest_lock:
                    b.abandon()
                continue
            reader = b.finish()
            sst_id = int(b.name.rsplit("/", 1)[1])
            metas.append(SstMeta(id=sst_id, level=target, min_key=reader.min_key,
                                 max_key=reader.max_key, entry_count=b.entry_count,
                                 file_len=b.file.length))
            self._readers[sst_id] = reader

        drop_ids = {f.id for f in job.inputs}
        with self._manifest_lock:
            self.manifest.log(
                [AddSst(m.id, m.level, m.min_key, m.max_key, m.entry_count, m.file_len)
                 for m in metas] + [DropSst(i) for i in drop_ids], sync=True)
        with self._commit:
            self._swap_levels(self._view.levels.with_edit(add=metas, drop_ids=drop_ids))
        # input kvfs files go only after the commit; checkpoints may pin them
        pinned = set().union(*self._pins.values()) if self._pins else set()
        for f in job.inputs:
            if f.name not in pinned and self.kvfs.exists(f.name):
                with self._manifest_lock:
                    self.kvfs.delete(f.name)
                self._readers.pop(f.id, None)
        if self.on_commit is not None:
            self.on_commit("compaction")

    def _compact_key_group(self, key: bytes, entries: list[tuple[int, int]],
                           job: CompactionJob, current_builder) -> None:
        kept = [True] + [
            self._snapshot_in(entries[i][0], entries[i - 1][0])
            for i in range(1, len(entries))
        ]
        # a tombstone at the bottom falls away once nothing older survives
        if (job.is_bottommost and entries[0][1] == KIND_TOMBSTONE
                and not any(kept[1:])):
            kept[0] = False

        hashed = hash_pair(key)
        actions: list[Optional[str]] = []
        will_emit_direct = False
        for (sn, kind), keep in zip(entries, kept):
            if not keep:
                actions.append(None)
                continue
            if kind == KIND_DIRECT:
                actions.append("direct")
                will_emit_direct = True
            elif kind == KIND_TOMBSTONE:
                actions.append("tombstone")
            elif (not self.config.nodirect and self._renames_suspended == 0
                  and self.is_direct_mode_safe(key, sn, job.target_level, hashed)):
                actions.append("rename")
                will_emit_direct = True
            else:
                actions.append("versioned")

        builder = None
        if any(a is not None for a in actions):
            builder = current_builder()
        for (sn, kind), action in zip(entries, actions):
            if action is None:
                self._compaction_delete(key, sn, kind, job.is_bottommost,
                                        will_emit_direct)
            elif action == "direct":
                builder.add(key, sn, KIND_DIRECT)
            elif action == "tombstone":
                builder.add(key, sn, KIND_TOMBSTONE)
            elif action == "versioned":
                builder.add(key, sn, KIND_VERSIONED)
            else:  # rename: versioned value moves to direct mode
                v = self.store.get(versioned_key(key, sn))
                if v is None:
                    # a pre-crash run of this rename already moved the value
                    builder.add(key, sn, KIND_DIRECT)
                    continue
                hint = key in self._direct_seen
                self.store.put(direct_key(key), u64.pack(sn) + v, overwrite_hint=hint)
                self._direct_seen.add(key)
                self.store.delete(versioned_key(key, sn))
                self.counters.renames += 1
                builder.add(key, sn, KIND_DIRECT)

    def _compaction_delete(self, key: bytes, sn: int, kind: int,
                           is_bottommost: bool, will_emit_direct: bool) -> None:
        """Remove an obsolete version's store record.  When this key also
        emits a direct entry in this compaction, the D record holds the
        newer value (blind overwrite or rename), so it must survive."""
        if kind == KIND_VERSIONED:
            self.store.delete(versioned_key(key, sn))
            if is_bottommost and not will_emit_direct:
                self.store.delete(direct_key(key))  # orphan guard
        elif kind == KIND_DIRECT:
            if not will_emit_direct:
                self.store.delete(direct_key(key))
        # tombstones never created a store record

    # ------------------------------------------------------- maintenance

    def kvs_gc(self) -> int:
        self._check_open()
        return self.store.gc()

    def suspend_renames(self):
        db = self

        class _Guard:
            def __enter__(self):
                with db._commit:
                    db._renames_suspended += 1

            def __exit__(self, *exc):
                with db._commit:
                    db._renames_suspended -= 1

        return _Guard()

    # ------------------------------------------------------- background

    def _start_workers(self) -> None:
        t = threading.Thread(target=self._bg_loop, name="kvt-maintenance", daemon=True)
        self._workers.append(t)
        t.start()

    def _bg_loop(self) -> None:
        while not self._bg_stop.is_set():
            did = False
            try:
                if self._immutables:
                    self._flush_pending()
                    did = True
                if self._view.levels.pick_compaction() is not None:
                    did = self.compact_now() or did
            except StoreClosedError:
                return
            if not did:
                with self._bg_wake:
                    self._bg_wake.wait(timeout=0.05)

    # ------------------------------------------------------------ helpers

    def counters_json(self) -> str:
        return self.counters.as_json()

    def register_persisted_snapshot(self, sn: int) -> SnapshotHandle:
        """Checkpoints re-install their snapshot on every open."""
        with self._commit:
            handle = SnapshotHandle(id=self._next_handle, sn=sn)
            self._next_handle += 1
            self._snap_handles[handle.id] = sn
            self._insort_snap(sn)
            self._persisted_snaps[sn] = handle.id
            return handle

    def release_persisted_snapshot(self, sn: int) -> None:
        with self._commit:
            handle_id = self._persisted_snaps.pop(sn)
            del self._snap_handles[handle_id]
            self._remove_snap(sn)

    def pin_files(self, tag: str, names: Iterable[str]) -> None:
        with self._commit:
            self._pins[tag] = set(names)

    def unpin_files(self, tag: str) -> list[str]:
        """Drop a pin set; returns the names now deletable (not in the live
        level set and pinned by nobody else)."""
        with self._commit:
            released = self._pins.pop(tag, set())
            still_pinned = set().union(*self._pins.values()) if self._pins else set()
            live = {f.name for f in self._view.levels.all_files()}
            return sorted(released - still_pinned - live)
