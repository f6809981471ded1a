"""Key-value filesystem: LSM files stored as blocks inside the value store.

Every file is one extent -- a run of fixed-size blocks keyed

    0x46('F') || extent_id_be32 || block_index_be32

SST files use 4 KiB blocks, WAL and manifest files 32 KiB.  Extent ids are
recycled through a free pool; writes to recycled block keys carry an
overwrite hint so the store's hint-miss counter stays clean.  The partial
tail block is rewritten in place on subsequent appends.

Directory metadata (name -> extent, kind, sealed length) and the free pool
are owned by the manifest log; the Kvfs object only mirrors them in memory
and notifies the engine through the on_create/on_delete/on_seal hooks.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import FileDeletedError, NameExistsError, NotFoundError, OutOfRangeError
from .kvs import Store
from .util import u32

BLOCK_TAG = b"F"
SST_BLOCK = 4096
LOG_BLOCK = 32768
MANIFEST_EXTENT = 0xFFFFFFFF  # reserved; never issued by the pool
MAX_FRESH_EXTENT = 0xFFFFFFFE

KIND_BLOCK_SIZE = {"sst": SST_BLOCK, "wal": LOG_BLOCK, "manifest": LOG_BLOCK}


def block_key(extent: int, index: int) -> bytes:
    return BLOCK_TAG + u32.pack(extent) + u32.pack(index)


class BlockFile:
    """Append-only block IO for one extent.  No directory involvement, so the
    manifest file itself can be a BlockFile under the reserved extent."""

    def __init__(self, store: Store, extent: int, block_size: int,
                 length: int = 0) -> None:
        self.store = store
        self.extent = extent
        self.block_size = block_size
        self.length = length
        self._put_hwm = -(-length // block_size)  # blocks this incarnation wrote
        self._tail = bytearray()
        if length % block_size:
            # reopened with a partial tail: pull it back for in-place rewrites
            tail_idx = length // block_size
            data = store.get(block_key(extent, tail_idx))
            self._tail = bytearray(data if data is not None else b"")

    def _put_block(self, index: int, data: bytes) -> None:
        # hint=true exactly when this block key is being rewritten (partial
        # tails); a recycled extent's old blocks were deleted with its file,
        # so fresh indexes are genuinely new keys
        hint = index < self._put_hwm
        self.store.put(block_key(self.extent, index), data, overwrite_hint=hint)
        if index + 1 > self._put_hwm:
            self._put_hwm = index + 1

    def append(self, data: bytes) -> int:
        self._tail += data
        self.length += len(data)
        base = self.length - len(self._tail)
        while len(self._tail) >= self.block_size:
            idx = base // self.block_size
            self._put_block(idx, bytes(self._tail[: self.block_size]))
            del self._tail[: self.block_size]
            base += self.block_size
        return self.length

    def flush_tail(self) -> None:
        if self._tail:
            idx = (self.length - len(self._tail)) // self.block_size
            self._put_block(idx, bytes(self._tail))

    def sync(self) -> None:
        self.flush_tail()
        self.store.sync()

    def read_at(self, off: int, ln: int, pool: Optional[ThreadPoolExecutor] = None) -> bytes:
        if ln <= 0:
            return b""
        end = off + ln
        tail_base = self.length - len(self._tail)
        parts = []
        if off < tail_base:
            bs = self.block_size
            first = off // bs
            last = (min(end, tail_base) - 1) // bs
            indexes = range(first, last + 1)

            def fetch(i: int) -> bytes:
                data = self.store.get(block_key(self.extent, i))
                return data if data is not None else b""

            if pool is not None and last > first:
                blocks = pool.map(fetch, indexes)
            else:
                blocks = map(fetch, indexes)
            joined = b"".join(blocks)
            parts.append(joined[off - first * bs : min(end, tail_base) - first * bs])
        if end > tail_base:
            t0 = max(0, off - tail_base)
            parts.append(bytes(self._tail[t0 : end - tail_base]))
        return b"".join(parts)

    def block_count(self) -> int:
        return max(self._put_hwm, -(-self.length // self.block_size))

    def truncate(self, new_length: int) -> None:
        """Cut back to ``new_length`` bytes (used to drop a torn log tail).
        Stale whole blocks beyond the new end are deleted; a stale partial
        tail block is superseded on the next flush_tail."""
        old_blocks = self.block_count()
        self.length = new_length
        full, tail_len = divmod(new_length, self.block_size)
        self._tail = bytearray()
        if tail_len:
            data = self.store.get(block_key(self.extent, full))
            self._tail = bytearray((data or b"")[:tail_len])
        keep = full + (1 if tail_len else 0)
        for i in range(keep, old_blocks):
            self.store.delete(block_key(self.extent, i))
        self._put_hwm = keep

    def discover_length(self) -> int:
        """Recover the byte length of an unsealed file by forward block scan
        (directory lengths are only authoritative for sealed files)."""
        length = 0
        idx = 0
        while True:
            data = self.store.get(block_key(self.extent, idx))
            if data is None:
                break
            length += len(data)
            idx += 1
            if len(data) < self.block_size:
                break
        self.length = length
        self._put_hwm = idx
        self._tail = bytearray()
        tail = length % self.block_size
        if tail:
            data = self.store.get(block_key(self.extent, length // self.block_size))
            self._tail = bytearray(data)
        return length


@dataclass
class KvfsFile:
    name: str
    extent: int
    kind: str
    block: BlockFile
    sealed: bool = False
    deleted: bool = False

    @property
    def length(self) -> int:
        return self.block.length


class FreePool:
    """Recyclable extent ids, smallest id first for determinism."""

    def __init__(self) -> None:
        self.free: set[int] = set()
        self.next_fresh = 0

    def allocate(self) -> int:
        if self.free:
            ext = min(self.free)
            self.free.discard(ext)
            return ext
        ext = self.next_fresh
        if ext > MAX_FRESH_EXTENT:
            raise RuntimeError("extent ids exhausted")
        self.next_fresh += 1
        return ext

    def release(self, extent: int) -> None:
        self.free.add(extent)

    def note_created(self, extent: int) -> None:
        """Replay helper: account for an id observed in a create edit."""
        self.free.discard(extent)
        if extent >= self.next_fresh:
            self.next_fresh = extent + 1


class Kvfs:
    """Directory of block files.  create/delete/list serialize on one lock;
    one writer per file, any number of readers."""

    def __init__(self, store: Store, prefetch_workers: int = 4) -> None:
        self.store = store
        self.pool = FreePool()
        self._dir: dict[str, KvfsFile] = {}
        self._lock = threading.RLock()
        self._prefetch_workers = prefetch_workers
        self._executor: Optional[ThreadPoolExecutor] = None
        # engine hooks: persist directory changes through the manifest
        self.on_create: Callable[[str, int, str], None] = lambda *a: None
        self.on_delete: Callable[[str], None] = lambda *a: None
        self.on_seal: Callable[[str, int], None] = lambda *a: None

    def _pool_for(self, workers: Optional[int]) -> Optional[ThreadPoolExecutor]:
        n = self._prefetch_workers if workers is None else workers
        if n <= 1:
            return None
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=max(2, self._prefetch_workers))
        return self._executor

    # ------------------------------------------------------------- directory

    def create(self, name: str, kind: str) -> KvfsFile:
        with self._lock:
            if name in self._dir:
                raise NameExistsError(name)
            extent = self.pool.allocate()
            self.on_create(name, extent, kind)
            block = BlockFile(self.store, extent, KIND_BLOCK_SIZE[kind])
            f = KvfsFile(name=name, extent=extent, kind=kind, block=block)
            self._dir[name] = f
            return f

    def install(self, name: str, extent: int, kind: str, length: int,
                sealed: bool) -> KvfsFile:
        """Replay path: register a file without logging edits."""
        with self._lock:
            block = BlockFile(self.store, extent, KIND_BLOCK_SIZE[kind], length=length)
            f = KvfsFile(name=name, extent=extent, kind=kind, block=block, sealed=sealed)
            self._dir[name] = f
            self.pool.note_created(extent)
            return f

    def forget(self, name: str) -> None:
        """Replay path: apply a delete edit (no block IO, no logging)."""
        with self._lock:
            f = self._dir.pop(name, None)
            if f is not None:
                self.pool.release(f.extent)

    def lookup(self, name: str) -> KvfsFile:
        with self._lock:
            f = self._dir.get(name)
            if f is None:
                raise NotFoundError(name)
            return f

    def exists(self, name: str) -> bool:
        with self._lock:
            return name in self._dir

    def list(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(n for n in self._dir if n.startswith(prefix))

    def files(self) -> list[KvfsFile]:
        with self._lock:
            return list(self._dir.values())

    def delete(self, name: str) -> None:
        with self._lock:
            f = self._dir.get(name)
            if f is None:
                raise NotFoundError(name)
            self.on_delete(name)
            for idx in range(f.block.block_count()):
                self.store.delete(block_key(f.extent, idx))
            del self._dir[name]
            f.deleted = True
            self.pool.release(f.extent)

    # -------------------------------------------------------------- file IO

    def append(self, f: KvfsFile, data: bytes) -> int:
        if f.deleted:
            raise FileDeletedError(f.name)
        return f.block.append(data)

    def read_at(self, f: KvfsFile, off: int, ln: int,
                workers: Optional[int] = None) -> bytes:
        if off < 0 or off + ln > f.length:
            raise OutOfRangeError(f"[{off}, {off + ln}) outside file of {f.length} bytes")
        return f.block.read_at(off, ln, self._pool_for(workers))

    def sync(self, f: KvfsFile) -> None:
        f.block.sync()

    def seal(self, f: KvfsFile) -> None:
        f.block.sync()
        f.sealed = True
        self.on_seal(f.name, f.length)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
