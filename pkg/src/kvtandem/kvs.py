"""Unordered log-structured key-value store.

Values live in append-only segments indexed by a full in-memory hash map.
The store offers point put/get/delete, a whole-store unordered scan,
explicit garbage collection of dead segment space, and crash durability
via kvs_sync.  Overwrite hints let callers assert whether a put replaces
an existing key; mispredictions are only counted.

Segment file format (bit-exact):

    header:  "KVT1" || segment_id_be64
    record:  [key_len_be32][val_len_be32 | 0xFFFFFFFF for delete]
             [key][value][crc32c_be32 over header+key+value]

The index is rebuilt by a forward scan of all segments on open.  Two
storage media exist: real files in a directory, and an in-memory journal
whose per-record durability promotion drives deterministic fault
injection ("crash" = keep only the durable prefix).
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .errors import IoFailureError, SizeLimitError, StoreClosedError
from .util import crc32c, u32, u64

SEGMENT_MAGIC = b"KVT1"
SEGMENT_HEADER_LEN = 12
DELETE_MARK = 0xFFFFFFFF

MAX_KEY_LEN = 1024
MAX_VALUE_LEN = 1 << 20


@dataclass
class StoreConfig:
    segment_bytes: int = 4 << 20
    buffer_bytes: int = 64 << 10
    gc_dead_fraction: float = 0.5


@dataclass
class KvsStats:
    puts: int = 0
    gets: int = 0
    deletes: int = 0
    gc_bytes_moved: int = 0
    overwrite_hint_misses: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def encode_record(key: bytes, value: Optional[bytes]) -> bytes:
    body = u32.pack(len(key)) + u32.pack(DELETE_MARK if value is None else len(value))
    body += key
    if value is not None:
        body += value
    return body + u32.pack(crc32c(body))


def decode_record(buf, off: int):
    """Parse one record at ``off``; returns (key, value|None, record_len) or
    None if the bytes are truncated or fail the checksum (torn tail)."""
    if off + 8 > len(buf):
        return None
    key_len = u32.unpack_from(buf, off)[0]
    val_mark = u32.unpack_from(buf, off + 4)[0]
    val_len = 0 if val_mark == DELETE_MARK else val_mark
    if key_len == 0 or key_len > MAX_KEY_LEN or val_len > MAX_VALUE_LEN:
        return None
    body_len = 8 + key_len + val_len
    if off + body_len + 4 > len(buf):
        return None
    body = bytes(buf[off : off + body_len])
    if u32.unpack_from(buf, off + body_len)[0] != crc32c(body):
        return None
    key = body[8 : 8 + key_len]
    value = None if val_mark == DELETE_MARK else body[8 + key_len :]
    return key, value, body_len + 4


class _MemSegment:
    __slots__ = ("buf", "durable", "pending")

    def __init__(self) -> None:
        self.buf = bytearray()
        self.durable = 0          # durable byte watermark
        self.pending: list[tuple[int, bool]] = []  # (end offset, is_record)


class MemoryMedia:
    """In-memory segment journal with per-record durability promotion.

    ``durability_hook`` (if set) is invoked with a monotonically increasing
    ordinal each time one record becomes crash-survivable; raising from the
    hook models a crash at exactly that point.
    """

    def __init__(self) -> None:
        self.segments: dict[int, _MemSegment] = {}
        self.durability_hook: Optional[Callable[[int], None]] = None
        self.events = 0

    def create(self, seg_id: int) -> None:
        self.segments[seg_id] = _MemSegment()

    def append(self, seg_id: int, data: bytes, is_record: bool) -> None:
        seg = self.segments[seg_id]
        seg.buf += data
        seg.pending.append((len(seg.buf), is_record))

    def read(self, seg_id: int, off: int, ln: int) -> bytes:
        return bytes(self.segments[seg_id].buf[off : off + ln])

    def size(self, seg_id: int) -> int:
        return len(self.segments[seg_id].buf)

    def sync(self, seg_id: int) -> None:
        seg = self.segments[seg_id]
        while seg.pending:
            end, is_record = seg.pending[0]
            if is_record:
                # the hook fires before promotion: an injected crash at
                # event N leaves exactly N-1 records durable
                self.events += 1
                if self.durability_hook is not None:
                    self.durability_hook(self.events)
            seg.pending.pop(0)
            seg.durable = end

    def delete(self, seg_id: int) -> None:
        self.events += 1
        if self.durability_hook is not None:
            self.durability_hook(self.events)
        del self.segments[seg_id]

    def durable_segments(self) -> list[tuple[int, bytes]]:
        return [(sid, bytes(s.buf[: s.durable])) for sid, s in sorted(self.segments.items())]

    def after_crash(self) -> "MemoryMedia":
        """A fresh media holding only what survived: the durable prefixes."""
        fresh = MemoryMedia()
        for sid, s in self.segments.items():
            if s.durable == 0:
                continue
            seg = _MemSegment()
            seg.buf = bytearray(s.buf[: s.durable])
            seg.durable = s.durable
            fresh.segments[sid] = seg
        return fresh


class FileMedia:
    """Segment files under <dir>/segments; sync writes and fsyncs."""

    def __init__(self, path: str) -> None:
        self.dir = os.path.join(path, "segments")
        os.makedirs(self.dir, exist_ok=True)
        self._files: dict[int, object] = {}
        self._mirror: dict[int, bytearray] = {}   # unwritten tail per segment
        self._written: dict[int, int] = {}

    def _path(self, seg_id: int) -> str:
        return os.path.join(self.dir, f"{seg_id:020d}.seg")

    def create(self, seg_id: int) -> None:
        self._files[seg_id] = open(self._path(seg_id), "wb+")
        self._mirror[seg_id] = bytearray()
        self._written[seg_id] = 0

    def append(self, seg_id: int, data: bytes, is_record: bool) -> None:
        self._mirror[seg_id] += data

    def read(self, seg_id: int, off: int, ln: int) -> bytes:
        written = self._written.get(seg_id, 0)
        if off >= written:
            return bytes(self._mirror[seg_id][off - written : off - written + ln])
        f = self._files[seg_id]
        f.seek(off)
        data = f.read(min(ln, written - off))
        if len(data) < ln:
            tail = self._mirror[seg_id][: ln - len(data)]
            data += bytes(tail)
        return data

    def size(self, seg_id: int) -> int:
        return self._written.get(seg_id, 0) + len(self._mirror.get(seg_id, b""))

    def sync(self, seg_id: int) -> None:
        try:
            f = self._files[seg_id]
            buf = self._mirror[seg_id]
            if buf:
                f.seek(0, os.SEEK_END)
                f.write(buf)
                self._written[seg_id] += len(buf)
                self._mirror[seg_id] = bytearray()
            f.flush()
            os.fsync(f.fileno())
        except OSError as exc:
            raise IoFailureError(str(exc)) from exc

    def delete(self, seg_id: int) -> None:
        f = self._files.pop(seg_id, None)
        if f is not None:
            f.close()
        self._mirror.pop(seg_id, None)
        self._written.pop(seg_id, None)
        try:
            os.unlink(self._path(seg_id))
        except FileNotFoundError:
            pass

    def durable_segments(self) -> list[tuple[int, bytes]]:
        out = []
        for name in sorted(os.listdir(self.dir)):
            if not name.endswith(".seg"):
                continue
            with open(os.path.join(self.dir, name), "rb") as f:
                out.append((int(name[:-4]), f.read()))
        return out

    def adopt(self, seg_id: int, size: int) -> None:
        """Re-attach an existing segment file after reopen."""
        self._files[seg_id] = open(self._path(seg_id), "rb+")
        self._mirror[seg_id] = bytearray()
        self._written[seg_id] = size

    def close(self) -> None:
        for f in self._files.values():
            f.close()
        self._files.clear()


@dataclass
class Segment:
    id: int
    payload_bytes: int = 0     # record bytes, excluding the 12-byte header
    live_bytes: int = 0
    dead_bytes: int = 0
    sealed: bool = False

    @property
    def dead_fraction(self) -> float:
        return self.dead_bytes / self.payload_bytes if self.payload_bytes else 0.0


class Store:
    """The key-value store proper.  Thread-safe; all mutation under one lock."""

    def __init__(self, path: Optional[str] = None, media=None,
                 config: Optional[StoreConfig] = None) -> None:
        if media is None:
            media = FileMedia(path) if path is not None else MemoryMedia()
        self.media = media
        self.config = config or StoreConfig()
        self.stats = KvsStats()
        self._lock = threading.RLock()
        self._closed = False
        # key -> (seg_id, value_off, value_len | -1 for none, rec_off, rec_len)
        self._index: dict[bytes, tuple[int, int, int, int, int]] = {}
        self._segments: dict[int, Segment] = {}
        self._dirty: set[int] = set()
        self._active: Optional[Segment] = None
        self._next_seg_id = 1
        self._recover_from_media()
        if self._active is None:
            self._new_segment()

    # ------------------------------------------------------------- lifecycle

    def _recover_from_media(self) -> None:
        for seg_id, data in self.media.durable_segments():
            if len(data) < SEGMENT_HEADER_LEN or data[:4] != SEGMENT_MAGIC:
                continue
            if u64.unpack_from(data, 4)[0] != seg_id:
                continue
            seg = Segment(id=seg_id, sealed=True)
            off = SEGMENT_HEADER_LEN
            while off < len(data):
                rec = decode_record(data, off)
                if rec is None:
                    break  # torn tail
                key, value, rec_len = rec
                self._apply_scan_record(seg, key, value, off, rec_len)
                off += rec_len
            seg.payload_bytes = off - SEGMENT_HEADER_LEN
            self._segments[seg_id] = seg
            if isinstance(self.media, FileMedia):
                self.media.adopt(seg_id, len(data))
            self._next_seg_id = max(self._next_seg_id, seg_id + 1)
        # recompute live/dead from the final index
        for seg in self._segments.values():
            seg.live_bytes = 0
        for key, (sid, _voff, _vlen, _roff, rec_len) in self._index.items():
            self._segments[sid].live_bytes += rec_len
        for seg in self._segments.values():
            seg.dead_bytes = seg.payload_bytes - seg.live_bytes

    def _apply_scan_record(self, seg: Segment, key, value, off, rec_len) -> None:
        if value is None:
            self._index.pop(key, None)
        else:
            val_off = off + 8 + len(key)
            self._index[key] = (seg.id, val_off, len(value), off, rec_len)

    def _new_segment(self) -> Segment:
        seg = Segment(id=self._next_seg_id)
        self._next_seg_id += 1
        self.media.create(seg.id)
        self.media.append(seg.id, SEGMENT_MAGIC + u64.pack(seg.id), is_record=False)
        self._segments[seg.id] = seg
        if self._active is not None:
            self._active.sealed = True
        self._active = seg
        return seg

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self.sync()
            self._closed = True
            if isinstance(self.media, FileMedia):
                self.media.close()

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")

    # ------------------------------------------------------------ operations

    def put(self, key: bytes, value: bytes, overwrite_hint: bool = False) -> None:
        if not 1 <= len(key) <= MAX_KEY_LEN:
            raise SizeLimitError(f"key length {len(key)} outside 1..{MAX_KEY_LEN}")
        if len(value) > MAX_VALUE_LEN:
            raise SizeLimitError(f"value length {len(value)} exceeds {MAX_VALUE_LEN}")
        with self._lock:
            self._check_open()
            self.stats.puts += 1
            if overwrite_hint != (key in self._index):
                self.stats.overwrite_hint_misses += 1
            self._append_put(key, value)

    def _append_put(self, key: bytes, value: bytes) -> None:
        prior = self._index.get(key)
        if prior is not None:
            self._segments[prior[0]].dead_bytes += prior[4]
            self._segments[prior[0]].live_bytes -= prior[4]
        seg = self._active
        rec = encode_record(key, value)
        if seg.payload_bytes + len(rec) > self.config.segment_bytes and seg.payload_bytes:
            seg = self._new_segment()
        off = SEGMENT_HEADER_LEN + seg.payload_bytes
        self.media.append(seg.id, rec, is_record=True)
        self._dirty.add(seg.id)
        seg.payload_bytes += len(rec)
        seg.live_bytes += len(rec)
        self._index[key] = (seg.id, off + 8 + len(key), len(value), off, len(rec))

    def get(self, key: bytes) -> Optional[bytes]:
        with self._lock:
            self._check_open()
            self.stats.gets += 1
            loc = self._index.get(key)
            if loc is None:
                return None
            seg_id, val_off, val_len = loc[0], loc[1], loc[2]
        return self.media.read(seg_id, val_off, val_len)

    def contains(self, key: bytes) -> bool:
        with self._lock:
            return key in self._index

    def delete(self, key: bytes) -> bool:
        """Idempotent delete; returns whether the key was live."""
        with self._lock:
            self._check_open()
            self.stats.deletes += 1
            prior = self._index.pop(key, None)
            if prior is None:
                return False  # void delete
            self._segments[prior[0]].dead_bytes += prior[4]
            self._segments[prior[0]].live_bytes -= prior[4]
            self._append_tombstone(key)
            return True

    def _append_tombstone(self, key: bytes) -> None:
        seg = self._active
        rec = encode_record(key, None)
        if seg.payload_bytes + len(rec) > self.config.segment_bytes and seg.payload_bytes:
            seg = self._new_segment()
        self.media.append(seg.id, rec, is_record=True)
        self._dirty.add(seg.id)
        seg.payload_bytes += len(rec)
        seg.dead_bytes += len(rec)  # a delete record is never live

    def sync(self) -> None:
        with self._lock:
            self._check_open()
            for seg_id in sorted(self._dirty):
                if seg_id in self._segments:
                    self.media.sync(seg_id)
            self._dirty.clear()

    def scan_unordered(self, sink: Callable[[bytes, bytes], None]) -> int:
        """Emit every live (key, value) exactly once, in segment order."""
        with self._lock:
            self._check_open()
            seg_ids = sorted(self._segments)
        count = 0
        for seg_id in seg_ids:
            for key, value, off in self._iter_segment(seg_id):
                if value is None:
                    continue
                loc = self._index.get(key)
                if loc is not None and loc[0] == seg_id and loc[3] == off:
                    sink(key, value)
                    count += 1
        return count

    def _iter_segment(self, seg_id: int) -> Iterator[tuple[bytes, Optional[bytes], int]]:
        if seg_id not in self._segments:
            return
        size = self.media.size(seg_id)
        data = self.media.read(seg_id, 0, size)
        off = SEGMENT_HEADER_LEN
        while off < len(data):
            rec = decode_record(data, off)
            if rec is None:
                break
            key, value, rec_len = rec
            yield key, value, off
            off += rec_len

    def gc(self) -> int:
        """Rewrite or drop every segment whose dead fraction crossed the
        threshold; returns bytes reclaimed.  The live record set is unchanged."""
        with self._lock:
            self._check_open()
            if self._active.dead_bytes and self._active.payload_bytes:
                self._new_segment()  # seal the dirty active segment too
            victims = [
                s for s in self._segments.values()
                if s.sealed and s.payload_bytes
                and s.dead_fraction >= self.config.gc_dead_fraction
            ]
            reclaimed = 0
            for victim in victims:
                moved = 0
                for key, value, off in list(self._iter_segment(victim.id)):
                    loc = self._index.get(key)
                    if value is None:
                        # a dropped delete-record may resurrect an older dead
                        # put during reopen's forward scan: carry it forward
                        if loc is None:
                            self._append_tombstone(key)
                        continue
                    if loc is not None and loc[0] == victim.id and loc[3] == off:
                        self._append_put(key, value)
                        moved += len(value)
                self.stats.gc_bytes_moved += moved
                reclaimed += victim.dead_bytes
                # make the moved copies durable before dropping the victim
                for seg_id in sorted(self._dirty):
                    if seg_id != victim.id and seg_id in self._segments:
                        self.media.sync(seg_id)
                self._dirty.discard(victim.id)
                del self._segments[victim.id]
                self.media.delete(victim.id)
            return reclaimed

    # -------------------------------------------------------------- helpers

    def live_count(self) -> int:
        return len(self._index)

    def live_keys(self) -> list[bytes]:
        with self._lock:
            return list(self._index.keys())

    def segment_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._segments)
