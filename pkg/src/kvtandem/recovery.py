"""Crash recovery: reopen a possibly-crashed database.

Order of operations:

1. replay the manifest: level set, kvfs directory, clock high-water mark,
   persisted checkpoint set, WAL truncation point;
2. promote the logical clock past everything ever issued;
3. UNDO: a partial flush may have written value records the replayed WAL
   will re-create under fresh sns.  Each replayable put record's original
   sn names exactly the versioned record such a flush would have written,
   so it is deleted (void if absent).  A direct record whose embedded sn
   matches a replayable put is likewise provably the orphan of an
   uncommitted flush (a committed flush would have truncated the record)
   and is deleted -- without this, a tombstone landing in the same
   post-recovery flush as the redone put leaves the stale direct value to
   resurrect once the tombstone drops at the bottom level;
4. sweep unreferenced kvfs files (uncommitted SST builds, replaced
   compaction inputs whose delete never ran) and orphaned block records;
5. REDO: re-insert the replayed records into a fresh memtable in their
   original order under fresh sns, and consolidate them into a new WAL so
   a second crash before the next flush still has their current sns on
   record; only then drop the old WAL files;
6. re-install persisted checkpoint snapshots.

Compactions are never replayed; they resume lazily from the next pick.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .config import EngineConfig
from .engine import MEM_PUT, Db, direct_key, versioned_key, wal_name
from .errors import UnrecoverableDbError
from .kvfs import MANIFEST_EXTENT, Kvfs
from .kvs import Store, StoreConfig
from .levels import LevelSet, SstMeta, sst_name
from .manifest import KvfsCreate, KvfsDelete, KvfsSeal, Manifest
from .memtable import Memtable
from .sst import KIND_TOMBSTONE, SstReader
from . import wal as walfmt
from .util import u32, u64


@dataclass
class RecoveryReport:
    wal_records_replayed: int = 0
    orphans_deleted: int = 0
    clock_before: int = 0
    clock_after: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def as_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _checkpoint_pins(dir_path: str) -> list[str]:
    """File names a checkpoint directory pins; empty when unreadable."""
    try:
        with open(os.path.join(dir_path, "checkpoint.json"), "r", encoding="utf-8") as f:
            meta = json.load(f)
        return [f_["name"] for f_ in meta.get("files", [])]
    except (OSError, ValueError, KeyError):
        return []


def recover(path: str | None = None, *, store: Store | None = None,
            config: EngineConfig | None = None) -> tuple[Db, RecoveryReport]:
    config = (config or EngineConfig()).validate()
    if store is None:
        store = Store(path=path, config=StoreConfig(
            segment_bytes=config.segment_bytes,
            buffer_bytes=config.kvs_buffer_bytes,
            gc_dead_fraction=config.gc_dead_fraction))

    manifest, mstate = Manifest.replay(store)
    kvfs = Kvfs(store, prefetch_workers=config.prefetch_workers)
    # recovery's own directory changes must be durable too
    kvfs.on_create = lambda name, extent, kind: manifest.log([KvfsCreate(name, extent, kind)])
    kvfs.on_delete = lambda name: manifest.log([KvfsDelete(name)])
    kvfs.on_seal = lambda name, length: manifest.log([KvfsSeal(name, length)])

    for name, ent in sorted(mstate.kvfs_dir.items()):
        kvfs.install(name, ent.extent, ent.kind,
                     ent.length if ent.sealed else 0, ent.sealed)

    # LSM level set + pinned readers
    by_level: dict[int, list[SstMeta]] = {}
    readers: dict[int, SstReader] = {}
    for sst_id, add in sorted(mstate.ssts.items()):
        name = sst_name(sst_id)
        if not kvfs.exists(name):
            raise UnrecoverableDbError(f"manifest references missing file {name}")
        meta = SstMeta(id=sst_id, level=add.level, min_key=add.min_key,
                       max_key=add.max_key, entry_count=add.entry_count,
                       file_len=add.file_len)
        by_level.setdefault(add.level, []).append(meta)
        readers[sst_id] = SstReader(kvfs, kvfs.lookup(name))
    max_level = max(by_level) if by_level else 0
    levels = LevelSet([by_level.get(i, []) for i in range(max_level + 1)])

    # WAL replay (lengths of unsealed logs are discovered by block scan)
    wal_files = []
    for name in kvfs.list("wal/"):
        f = kvfs.lookup(name)
        f.block.discover_length()
        wal_files.append(f)
    records: list[tuple[int, int, bytes, bytes]] = []
    for f in wal_files:
        if f.length:
            data = kvfs.read_at(f, 0, f.length)
            records.extend(walfmt.replay(data, from_sn=mstate.wal_truncate_sn))

    max_record_sn = max((r[1] for r in records), default=0)
    max_ckpt_sn = max(mstate.checkpoints, default=0)
    clock_before = max(mstate.clock_hwm, mstate.wal_truncate_sn,
                       max_record_sn, max_ckpt_sn)
    clock = clock_before + 1

    # UNDO: remove value records orphaned by an uncommitted flush
    orphans = 0
    for op, sn, key, _value in records:
        if op != walfmt.OP_PUT:
            continue  # tombstones never created a store record
        if store.delete(versioned_key(key, sn)):
            orphans += 1
        raw = store.get(direct_key(key))
        if raw is not None and u64.unpack_from(raw, 0)[0] == sn:
            store.delete(direct_key(key))
            orphans += 1

    # open-time sweep: drop SST files nobody references
    pinned: set[str] = set()
    for _sn, dir_path in mstate.checkpoints.items():
        pinned.update(_checkpoint_pins(dir_path))
    live_names = {sst_name(i) for i in mstate.ssts}
    for f in list(kvfs.files()):
        if f.kind == "sst" and f.name not in live_names and f.name not in pinned:
            kvfs.delete(f.name)
    # drop block records of extents no file owns (lost create edits cannot
    # happen -- creates sync before block writes -- but replaced files can
    # linger when a crash lands between commit and file delete)
    live_extents = {f.extent for f in kvfs.files()} | {MANIFEST_EXTENT}
    doomed: list[bytes] = []

    def sweep(k: bytes, _v: bytes) -> None:
        if k[:1] == b"F" and u32.unpack_from(k, 1)[0] not in live_extents:
            doomed.append(k)

    store.scan_unordered(sweep)
    for k in doomed:
        store.delete(k)

    wal_seq = 0
    for f in wal_files:
        wal_seq = max(wal_seq, int(f.name.rsplit("/", 1)[1]))
    next_sst_id = max(mstate.ssts, default=0) + 1

    db = Db(store=store, kvfs=kvfs, manifest=manifest, levels=levels,
            readers=readers, config=config, clock=clock, wal_seq=wal_seq,
            wal_truncate_sn=mstate.wal_truncate_sn, next_sst_id=next_sst_id)
    db._finish_open()

    # REDO: original order, fresh sns, consolidated into the new WAL
    if records:
        mt: Memtable = db._active
        for op, _old_sn, key, value in records:
            sn = db._clock
            db._clock += 1
            if op == walfmt.OP_PUT:
                db.kvfs.append(db._wal_file, walfmt.encode_record(op, sn, key, value))
                mt.insert(key, sn, MEM_PUT, value)
            else:
                db.kvfs.append(db._wal_file, walfmt.encode_record(op, sn, key))
                mt.insert(key, sn, KIND_TOMBSTONE, None)
        db.kvfs.sync(db._wal_file)
    for f in wal_files:
        if kvfs.exists(f.name):
            kvfs.delete(f.name)

    # checkpoints re-install their snapshots on every open
    for sn, dir_path in sorted(mstate.checkpoints.items()):
        db.register_persisted_snapshot(sn)
        names = _checkpoint_pins(dir_path)
        if names:
            db.pin_files(dir_path, names)

    report = RecoveryReport(
        wal_records_replayed=len(records),
        orphans_deleted=orphans,
        clock_before=clock_before,
        clock_after=db._clock,
    )
    db.last_recovery = report
    if config.background:
        db._start_workers()
    return db, report
