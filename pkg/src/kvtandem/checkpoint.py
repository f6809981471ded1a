"""Read-only checkpoints and streaming backup.

A checkpoint is a persisted snapshot plus a copy-on-write clone of the
LSM file list: the listed SST files are pinned (never copied) and keep
sharing the live value store.  The checkpoint directory holds a manifest
copy and the file-reference list; the snapshot sn is logged to the primary
manifest so reopening the database re-installs it.

Backup streams three things into a fresh store: the checkpoint's LSM files
(file-by-file through the kvfs), the value records (whole-store unordered
scan filtered to the D/V namespaces), and finally a trim pass that deletes
every value record newer than the checkpoint.  Renames stay suspended on
the primary while the scan runs: a rename racing the scan could delete the
versioned record after the scan passed it and write the direct one into a
segment the scan never visits, losing the version entirely.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from typing import Callable, Optional

from .config import EngineConfig
from .engine import Db, SnapshotHandle, _View, direct_key, versioned_key
from .errors import NameExistsError, NotFoundError
from .kvfs import Kvfs
from .kvs import Store, StoreConfig
from .levels import LevelSet, SstMeta
from .manifest import AddSst, ClockHwm, Manifest, CheckpointAdd, CheckpointDrop
from .sst import SstReader
from . import wal as walfmt
from .util import u64

META_NAME = "checkpoint.json"
MANIFEST_COPY = "MANIFEST"
FILES_NAME = "FILES"


@dataclass(frozen=True)
class Checkpoint:
    sn: int
    dir: str


def checkpoint_create(db: Db, dir_path: str) -> Checkpoint:
    """Flush, persist a snapshot, and clone the LSM file list into
    ``dir_path``.  While the checkpoint lives, every new write is
    versioned, so the view at sn stays intact."""
    if os.path.exists(dir_path):
        raise NameExistsError(dir_path)
    db.flush_now()
    with db._commit:
        sn = db._clock
        levels = db._view.levels
        files = levels.all_files()
    db._log([CheckpointAdd(sn, dir_path)])
    handle = db.register_persisted_snapshot(sn)
    assert handle.sn == sn

    os.makedirs(dir_path)
    meta = {
        "sn": sn,
        "files": [
            {"id": f.id, "level": f.level, "name": f.name,
             "min_key": f.min_key.hex(), "max_key": f.max_key.hex(),
             "entry_count": f.entry_count, "file_len": f.file_len}
            for f in files
        ],
    }
    with open(os.path.join(dir_path, META_NAME), "w", encoding="utf-8") as out:
        json.dump(meta, out, indent=1)
    with open(os.path.join(dir_path, FILES_NAME), "w", encoding="utf-8") as out:
        out.write("".join(f.name + "\n" for f in files))
    # replayable manifest copy describing the cloned tree
    edits = [AddSst(f.id, f.level, f.min_key, f.max_key, f.entry_count, f.file_len)
             for f in files]
    from .manifest import encode_edit, frame
    from .util import u16
    payload = u16.pack(len(edits) + 1) + b"".join(
        [encode_edit(e) for e in edits] + [encode_edit(ClockHwm(sn))])
    with open(os.path.join(dir_path, MANIFEST_COPY), "wb") as out:
        out.write(frame(payload))

    db.pin_files(dir_path, [f.name for f in files])
    return Checkpoint(sn=sn, dir=dir_path)


def checkpoint_delete(db: Db, ckpt: Checkpoint) -> None:
    """De-persist the snapshot; files only the checkpoint still referenced
    are reclaimed.  Later compactions rename the versioned entries the
    snapshot was holding back to direct mode."""
    with db._commit:
        if ckpt.sn not in db._persisted_snaps:
            raise NotFoundError(f"no live checkpoint at sn {ckpt.sn}")
    db._log([CheckpointDrop(ckpt.sn)])
    db.release_persisted_snapshot(ckpt.sn)
    for name in db.unpin_files(ckpt.dir):
        if db.kvfs.exists(name):
            with db._manifest_lock:
                db.kvfs.delete(name)
            db._readers.pop(int(name.rsplit("/", 1)[1]), None)
    shutil.rmtree(ckpt.dir, ignore_errors=True)


def _load_meta(dir_path: str) -> dict:
    with open(os.path.join(dir_path, META_NAME), "r", encoding="utf-8") as f:
        return json.load(f)


class CheckpointView:
    """Read-only view of the primary at the checkpoint's sn, reading the
    cloned file list against the shared value store."""

    def __init__(self, db: Db, ckpt: Checkpoint) -> None:
        meta = _load_meta(ckpt.dir)
        self.sn = meta["sn"]
        self.db = db
        metas = [SstMeta(id=f["id"], level=f["level"],
                         min_key=bytes.fromhex(f["min_key"]),
                         max_key=bytes.fromhex(f["max_key"]),
                         entry_count=f["entry_count"], file_len=f["file_len"])
                 for f in meta["files"]]
        by_level: dict[int, list[SstMeta]] = {}
        for m in metas:
            by_level.setdefault(m.level, []).append(m)
        top = max(by_level) if by_level else 0
        levels = LevelSet([by_level.get(i, []) for i in range(top + 1)])
        for m in metas:  # the files are pinned, but readers may be gone
            if m.id not in db._readers:
                db._readers[m.id] = SstReader(db.kvfs, db.kvfs.lookup(m.name))
        self._view = _View((), levels)

    def get(self, key: bytes) -> Optional[bytes]:
        found = self.db._point_read(key, self.sn, self._view, None)
        return None if found is None else found[1]

    def iterate(self, from_key: Optional[bytes] = None,
                to_key: Optional[bytes] = None, workers: Optional[int] = None):
        return self.db._iterate(from_key, to_key, self.sn, self._view, workers)


def backup(db: Db, ckpt: Checkpoint, target_path: Optional[str] = None, *,
           target_store: Optional[Store] = None,
           config: Optional[EngineConfig] = None,
           interleave: Optional[Callable[[str], None]] = None,
           scan_hook_every: int = 256) -> Db:
    """Build an independent database equal to the checkpoint's view.

    ``interleave`` (tests only) is called with a phase label between backup
    phases and periodically during the value scan, so concurrent primary
    writes can be driven deterministically."""
    config = (config or EngineConfig()).validate()
    if target_store is None:
        if target_path is None:
            raise ValueError("target_path or target_store required")
        if os.path.exists(target_path):
            raise NameExistsError(target_path)
        os.makedirs(target_path)
        target_store = Store(path=target_path, config=StoreConfig(
            segment_bytes=config.segment_bytes,
            buffer_bytes=config.kvs_buffer_bytes,
            gc_dead_fraction=config.gc_dead_fraction))

    meta = _load_meta(ckpt.dir)
    sn = meta["sn"]
    tmanifest = Manifest(target_store)
    tkvfs = Kvfs(target_store, prefetch_workers=config.prefetch_workers)
    from .manifest import KvfsCreate, KvfsSeal
    tkvfs.on_create = lambda name, extent, kind: tmanifest.log([KvfsCreate(name, extent, kind)])
    tkvfs.on_seal = lambda name, length: tmanifest.log([KvfsSeal(name, length)])

    # 1. LSM files, copied file-by-file through the kvfs
    for f in meta["files"]:
        src = db.kvfs.lookup(f["name"])
        dst = tkvfs.create(f["name"], "sst")
        off = 0
        while off < src.length:
            chunk = db.kvfs.read_at(src, off, min(1 << 20, src.length - off))
            tkvfs.append(dst, chunk)
            off += len(chunk)
        tkvfs.seal(dst)
    tmanifest.log(
        [AddSst(f["id"], f["level"], bytes.fromhex(f["min_key"]),
                bytes.fromhex(f["max_key"]), f["entry_count"], f["file_len"])
         for f in meta["files"]] + [ClockHwm(sn)], sync=True)
    if interleave:
        interleave("after-files")

    # 2. value records via unordered scan; renames must not race the scan
    seen = 0

    def copy(k: bytes, v: bytes) -> None:
        nonlocal seen
        if k[:1] in (b"D", b"V"):
            target_store.put(k, v)
        seen += 1
        if interleave and seen % scan_hook_every == 0:
            interleave("scan")

    with db.suspend_renames():
        db.store.scan_unordered(copy)
    if interleave:
        interleave("after-values")

    # 3. trim: first the WAL-derived deletes, then a namespace sweep for
    # records that were flushed (and WAL-truncated) during the copy window
    for name in db.kvfs.list("wal/"):
        wf = db.kvfs.lookup(name)
        if not wf.length:
            continue
        data = db.kvfs.read_at(wf, 0, wf.length)
        for op, rec_sn, key, _value in walfmt.iter_records(data):
            if rec_sn < sn or op != walfmt.OP_PUT:
                continue
            target_store.delete(versioned_key(key, rec_sn))
            raw = target_store.get(direct_key(key))
            if raw is not None and u64.unpack_from(raw, 0)[0] >= sn:
                target_store.delete(direct_key(key))
    doomed: list[bytes] = []

    def sweep(k: bytes, v: bytes) -> None:
        if k[:1] == b"V":
            if u64.unpack_from(k, len(k) - 8)[0] >= sn:
                doomed.append(k)
        elif k[:1] == b"D":
            if u64.unpack_from(v, 0)[0] >= sn:
                doomed.append(k)

    target_store.scan_unordered(sweep)
    for k in doomed:
        target_store.delete(k)

    target_store.sync()
    from .recovery import recover
    out_db, _ = recover(store=target_store, config=config)
    return out_db
