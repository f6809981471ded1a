"""Manifest: the metadata log making LSM and kvfs state crash-recoverable.

The manifest itself is a block file under the reserved extent (it cannot
live in the kvfs directory it describes).  Each log record is one framed,
checksummed batch of edits applied all-or-nothing, so e.g. [add-sst,
clock-hwm, wal-truncate] commit atomically: a torn tail drops the whole
batch.  Replaying the log reconstructs the level set, the logical-clock
high-water mark, the persisted checkpoint set and the kvfs directory.

Edit tags: 0x01 add-sst, 0x02 drop-sst, 0x03 wal-truncate, 0x04 clock-hwm,
0x05 checkpoint-add, 0x06 checkpoint-drop, 0x10 kvfs-create,
0x11 kvfs-delete, 0x12 kvfs-seal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import UnrecoverableDbError
from .kvfs import LOG_BLOCK, MANIFEST_EXTENT, BlockFile
from .kvs import Store
from .util import crc32c, u16, u32, u64

TAG_ADD_SST = 0x01
TAG_DROP_SST = 0x02
TAG_WAL_TRUNCATE = 0x03
TAG_CLOCK_HWM = 0x04
TAG_CHECKPOINT_ADD = 0x05
TAG_CHECKPOINT_DROP = 0x06
TAG_KVFS_CREATE = 0x10
TAG_KVFS_DELETE = 0x11
TAG_KVFS_SEAL = 0x12

KIND_CODE = {"sst": 0, "wal": 1, "manifest": 2}
CODE_KIND = {v: k for k, v in KIND_CODE.items()}


@dataclass(frozen=True)
class AddSst:
    id: int
    level: int
    min_key: bytes
    max_key: bytes
    entry_count: int
    file_len: int


@dataclass(frozen=True)
class DropSst:
    id: int


@dataclass(frozen=True)
class WalTruncate:
    sn: int


@dataclass(frozen=True)
class ClockHwm:
    sn: int


@dataclass(frozen=True)
class CheckpointAdd:
    sn: int
    dir: str


@dataclass(frozen=True)
class CheckpointDrop:
    sn: int


@dataclass(frozen=True)
class KvfsCreate:
    name: str
    extent: int
    kind: str


@dataclass(frozen=True)
class KvfsDelete:
    name: str


@dataclass(frozen=True)
class KvfsSeal:
    name: str
    length: int


Edit = Union[AddSst, DropSst, WalTruncate, ClockHwm, CheckpointAdd,
             CheckpointDrop, KvfsCreate, KvfsDelete, KvfsSeal]


def _pstr(s: str) -> bytes:
    b = s.encode()
    return u16.pack(len(b)) + b


def _pbytes(b: bytes) -> bytes:
    return u16.pack(len(b)) + b


def encode_edit(e: Edit) -> bytes:
    if isinstance(e, AddSst):
        return (bytes([TAG_ADD_SST]) + u64.pack(e.id) + u32.pack(e.level)
                + _pbytes(e.min_key) + _pbytes(e.max_key)
                + u64.pack(e.entry_count) + u64.pack(e.file_len))
    if isinstance(e, DropSst):
        return bytes([TAG_DROP_SST]) + u64.pack(e.id)
    if isinstance(e, WalTruncate):
        return bytes([TAG_WAL_TRUNCATE]) + u64.pack(e.sn)
    if isinstance(e, ClockHwm):
        return bytes([TAG_CLOCK_HWM]) + u64.pack(e.sn)
    if isinstance(e, CheckpointAdd):
        return bytes([TAG_CHECKPOINT_ADD]) + u64.pack(e.sn) + _pstr(e.dir)
    if isinstance(e, CheckpointDrop):
        return bytes([TAG_CHECKPOINT_DROP]) + u64.pack(e.sn)
    if isinstance(e, KvfsCreate):
        return (bytes([TAG_KVFS_CREATE]) + _pstr(e.name) + u32.pack(e.extent)
                + bytes([KIND_CODE[e.kind]]))
    if isinstance(e, KvfsDelete):
        return bytes([TAG_KVFS_DELETE]) + _pstr(e.name)
    if isinstance(e, KvfsSeal):
        return bytes([TAG_KVFS_SEAL]) + _pstr(e.name) + u64.pack(e.length)
    raise TypeError(type(e))


def _take_bytes(data: bytes, off: int) -> tuple[bytes, int]:
    ln = u16.unpack_from(data, off)[0]
    return data[off + 2 : off + 2 + ln], off + 2 + ln


def decode_edits(payload: bytes) -> list[Edit]:
    count = u16.unpack_from(payload, 0)[0]
    off = 2
    out: list[Edit] = []
    for _ in range(count):
        tag = payload[off]
        off += 1
        if tag == TAG_ADD_SST:
            sst_id = u64.unpack_from(payload, off)[0]
            level = u32.unpack_from(payload, off + 8)[0]
            off += 12
            min_key, off = _take_bytes(payload, off)
            max_key, off = _take_bytes(payload, off)
            count_, flen = struct.unpack_from(">QQ", payload, off)
            off += 16
            out.append(AddSst(sst_id, level, min_key, max_key, count_, flen))
        elif tag == TAG_DROP_SST:
            out.append(DropSst(u64.unpack_from(payload, off)[0]))
            off += 8
        elif tag == TAG_WAL_TRUNCATE:
            out.append(WalTruncate(u64.unpack_from(payload, off)[0]))
            off += 8
        elif tag == TAG_CLOCK_HWM:
            out.append(ClockHwm(u64.unpack_from(payload, off)[0]))
            off += 8
        elif tag == TAG_CHECKPOINT_ADD:
            sn = u64.unpack_from(payload, off)[0]
            d, off2 = _take_bytes(payload, off + 8)
            off = off2
            out.append(CheckpointAdd(sn, d.decode()))
        elif tag == TAG_CHECKPOINT_DROP:
            out.append(CheckpointDrop(u64.unpack_from(payload, off)[0]))
            off += 8
        elif tag == TAG_KVFS_CREATE:
            name, off = _take_bytes(payload, off)
            extent = u32.unpack_from(payload, off)[0]
            kind = CODE_KIND[payload[off + 4]]
            off += 5
            out.append(KvfsCreate(name.decode(), extent, kind))
        elif tag == TAG_KVFS_DELETE:
            name, off = _take_bytes(payload, off)
            out.append(KvfsDelete(name.decode()))
        elif tag == TAG_KVFS_SEAL:
            name, off = _take_bytes(payload, off)
            out.append(KvfsSeal(name.decode(), u64.unpack_from(payload, off)[0]))
            off += 8
        else:
            raise ValueError(f"unknown manifest tag {tag:#x}")
    return out


def frame(payload: bytes) -> bytes:
    return u32.pack(len(payload)) + u32.pack(crc32c(payload)) + payload


def iter_frames(data: bytes) -> Iterator[bytes]:
    """Framed payloads until the stream ends or tears (same discipline as
    the WAL: a torn tail is silently dropped)."""
    off = 0
    n = len(data)
    while off + 8 <= n:
        ln = u32.unpack_from(data, off)[0]
        crc = u32.unpack_from(data, off + 4)[0]
        if ln == 0 or off + 8 + ln > n:
            return
        payload = data[off + 8 : off + 8 + ln]
        if crc32c(payload) != crc:
            return
        yield payload
        off += 8 + ln


@dataclass
class KvfsDirEntry:
    extent: int
    kind: str
    length: int = 0
    sealed: bool = False


@dataclass
class ManifestState:
    """Replayed view of the metadata log."""
    ssts: dict[int, AddSst] = field(default_factory=dict)
    wal_truncate_sn: int = 0
    clock_hwm: int = 0
    checkpoints: dict[int, str] = field(default_factory=dict)
    kvfs_dir: dict[str, KvfsDirEntry] = field(default_factory=dict)
    records: int = 0

    def apply(self, e: Edit) -> None:
        if isinstance(e, AddSst):
            self.ssts[e.id] = e
        elif isinstance(e, DropSst):
            self.ssts.pop(e.id, None)
        elif isinstance(e, WalTruncate):
            self.wal_truncate_sn = max(self.wal_truncate_sn, e.sn)
        elif isinstance(e, ClockHwm):
            self.clock_hwm = max(self.clock_hwm, e.sn)
        elif isinstance(e, CheckpointAdd):
            self.checkpoints[e.sn] = e.dir
        elif isinstance(e, CheckpointDrop):
            self.checkpoints.pop(e.sn, None)
        elif isinstance(e, KvfsCreate):
            self.kvfs_dir[e.name] = KvfsDirEntry(e.extent, e.kind)
        elif isinstance(e, KvfsDelete):
            self.kvfs_dir.pop(e.name, None)
        elif isinstance(e, KvfsSeal):
            ent = self.kvfs_dir.get(e.name)
            if ent is not None:
                ent.length = e.length
                ent.sealed = True


class Manifest:
    """Single-writer append log; every batch is synced before its effects
    are relied upon."""

    def __init__(self, store: Store, block: Optional[BlockFile] = None) -> None:
        self.store = store
        self.block = block or BlockFile(store, MANIFEST_EXTENT, LOG_BLOCK)

    def log(self, edits: list[Edit], sync: bool = True) -> None:
        payload = u16.pack(len(edits)) + b"".join(encode_edit(e) for e in edits)
        self.block.append(frame(payload))
        if sync:
            self.block.sync()

    @classmethod
    def replay(cls, store: Store) -> tuple["Manifest", ManifestState]:
        block = BlockFile(store, MANIFEST_EXTENT, LOG_BLOCK)
        length = block.discover_length()
        state = ManifestState()
        if length:
            data = block.read_at(0, length)
            consumed = 0
            for payload in iter_frames(data):
                try:
                    edits = decode_edits(payload)
                except Exception as exc:
                    raise UnrecoverableDbError(f"manifest record undecodable: {exc}") from exc
                for e in edits:
                    state.apply(e)
                state.records += 1
                consumed += 8 + len(payload)
            if state.records == 0 and length >= 8:
                raise UnrecoverableDbError("manifest present but no readable record")
            if consumed < length:
                block.truncate(consumed)  # drop the torn tail before appending
        return cls(store, block), state
