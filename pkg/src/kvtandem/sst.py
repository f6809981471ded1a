"""Sorted string table: immutable sorted runs of (key, sn, kind) entries.

An SST file indexes keys and version metadata only -- values live in the
value store.  The per-file Bloom filter covers exactly the keys whose kind
is versioned or tombstone, never direct: a negative filter answer proves a
key has no versioned record and lets point reads skip the file.

Layout (byte stream inside a kvfs file, 4 KiB target data blocks, a key's
entry run never straddles a block so a hit costs one block read):

    data block:  [klen u16][kind u8][sn u64][key]... then
                 [entry_off u32]*n [n u32]
    index:       [n u32] { [block_off u64][block_len u32][first_klen u16][first_key] }*n
                 [last_klen u16][last_key]
    bloom:       BloomFilter.encode()
    footer:      "SST1" [index_off u64][index_len u64][bloom_off u64][bloom_len u64]
                 [entry_count u64]

Entries are sorted by (key asc, sn desc); within a key the newest version
comes first, so search_latest returns the first match.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from typing import Iterator, Optional

from .bloom import BloomFilter, hash_pair
from .errors import UnsortedInputError
from .kvfs import Kvfs, KvfsFile
from .util import u16, u32, u64

KIND_DIRECT = 0
KIND_VERSIONED = 1
KIND_TOMBSTONE = 2

TARGET_BLOCK = 4096
FOOTER = struct.Struct(">4sQQQQQ")
MAGIC = b"SST1"

_ENTRY_HDR = struct.Struct(">HBQ")


def _encode_entry(key: bytes, sn: int, kind: int) -> bytes:
    return _ENTRY_HDR.pack(len(key), kind, sn) + key


class SstBuilder:
    """Streams sorted entries into a new kvfs file; finish() seals it."""

    def __init__(self, kvfs: Kvfs, name: str, level: int = 0) -> None:
        self.kvfs = kvfs
        self.name = name
        self.level = level
        self.file: KvfsFile = kvfs.create(name, "sst")
        self._block = bytearray()
        self._block_offsets: list[int] = []
        self._index: list[tuple[int, int, bytes]] = []  # (off, len, first_key)
        self._pos = 0
        self._bloom_keys: set[bytes] = set()
        self._prev: Optional[tuple[bytes, int]] = None
        self._first_in_block: Optional[bytes] = None
        self.min_key: Optional[bytes] = None
        self.max_key: Optional[bytes] = None
        self.entry_count = 0

    def add(self, key: bytes, sn: int, kind: int) -> None:
        if self._prev is not None:
            pkey, psn = self._prev
            if key < pkey or (key == pkey and sn >= psn):
                raise UnsortedInputError(f"entry ({key!r},{sn}) after ({pkey!r},{psn})")
        new_key = self._prev is None or self._prev[0] != key
        # split only between key groups so a run never straddles blocks
        if new_key and len(self._block) >= TARGET_BLOCK:
            self._flush_block()
        if self._first_in_block is None:
            self._first_in_block = key
        self._block_offsets.append(len(self._block))
        self._block += _encode_entry(key, sn, kind)
        if kind != KIND_DIRECT:
            self._bloom_keys.add(key)
        if self.min_key is None:
            self.min_key = key
        self.max_key = key
        self.entry_count += 1
        self._prev = (key, sn)

    def _flush_block(self) -> None:
        if not self._block_offsets:
            return
        n = len(self._block_offsets)
        trailer = struct.pack(f">{n}I", *self._block_offsets) + u32.pack(n)
        data = bytes(self._block) + trailer
        self.kvfs.append(self.file, data)
        self._index.append((self._pos, len(data), self._first_in_block))
        self._pos += len(data)
        self._block = bytearray()
        self._block_offsets = []
        self._first_in_block = None

    def finish(self) -> "SstReader":
        self._flush_block()
        index_off = self._pos
        parts = [u32.pack(len(self._index))]
        for off, ln, first in self._index:
            parts.append(u64.pack(off) + u32.pack(ln) + u16.pack(len(first)) + first)
        last = self.max_key or b""
        parts.append(u16.pack(len(last)) + last)
        index_blob = b"".join(parts)
        bloom = BloomFilter.with_capacity(len(self._bloom_keys))
        for k in self._bloom_keys:
            bloom.add(k)
        bloom_blob = bloom.encode()
        self.kvfs.append(self.file, index_blob)
        self.kvfs.append(self.file, bloom_blob)
        self.kvfs.append(self.file, FOOTER.pack(
            MAGIC, index_off, len(index_blob),
            index_off + len(index_blob), len(bloom_blob), self.entry_count))
        self.kvfs.seal(self.file)
        return SstReader(self.kvfs, self.file)

    def abandon(self) -> None:
        """Drop a builder whose output ended up empty."""
        self.kvfs.delete(self.name)


def _parse_block(data: bytes):
    n = u32.unpack_from(data, len(data) - 4)[0]
    offsets = struct.unpack_from(f">{n}I", data, len(data) - 4 - 4 * n)
    return offsets, len(data) - 4 - 4 * n


def _entry_at(data: bytes, off: int) -> tuple[bytes, int, int]:
    klen, kind, sn = _ENTRY_HDR.unpack_from(data, off)
    key = data[off + 11 : off + 11 + klen]
    return key, sn, kind


class SstReader:
    """Random and sequential access to a sealed file.  The index and Bloom
    filter are read once at open and pinned, so filter checks cost no IO."""

    def __init__(self, kvfs: Kvfs, file: KvfsFile) -> None:
        self.kvfs = kvfs
        self.file = file
        footer = kvfs.read_at(file, file.length - FOOTER.size, FOOTER.size)
        magic, index_off, index_len, bloom_off, bloom_len, count = FOOTER.unpack(footer)
        if magic != MAGIC:
            raise ValueError(f"{file.name}: bad SST footer")
        self.entry_count = count
        index_blob = kvfs.read_at(file, index_off, index_len)
        self.bloom = BloomFilter.decode(kvfs.read_at(file, bloom_off, bloom_len))
        n = u32.unpack_from(index_blob, 0)[0]
        pos = 4
        self._blocks: list[tuple[int, int]] = []
        self._firsts: list[bytes] = []
        for _ in range(n):
            off, ln, klen = struct.unpack_from(">QIH", index_blob, pos)
            pos += 14
            self._firsts.append(index_blob[pos : pos + klen])
            pos += klen
            self._blocks.append((off, ln))
        klen = u16.unpack_from(index_blob, pos)[0]
        self.max_key = index_blob[pos + 2 : pos + 2 + klen]
        self.min_key = self._firsts[0] if self._firsts else b""

    def in_bloom(self, key: bytes) -> bool:
        return self.bloom.contains(key)

    def in_bloom_hashed(self, h1: int, h2: int) -> bool:
        return self.bloom.contains_hashed(h1, h2)

    def _block_for(self, key: bytes) -> Optional[int]:
        i = bisect_right(self._firsts, key) - 1
        return i if i >= 0 else None

    def _read_block(self, i: int, counters=None) -> bytes:
        off, ln = self._blocks[i]
        if counters is not None:
            counters.sst_block_reads += 1
        return self.kvfs.read_at(self.file, off, ln)

    def _search(self, key: bytes, before_sn: Optional[int], counters) :
        i = self._block_for(key)
        if i is None:
            return None
        data = self._read_block(i, counters)
        offsets, limit = _parse_block(data)
        lo, hi = 0, len(offsets)
        while lo < hi:  # first entry with entry.key >= key
            mid = (lo + hi) // 2
            ekey, _, _ = _entry_at(data, offsets[mid])
            if ekey < key:
                lo = mid + 1
            else:
                hi = mid
        for j in range(lo, len(offsets)):
            ekey, sn, kind = _entry_at(data, offsets[j])
            if ekey != key:
                return None
            if before_sn is None or sn < before_sn:
                return ekey, sn, kind
        return None

    def search_latest(self, key: bytes, counters=None):
        """Newest entry for key, or None.  One block read on a candidate hit."""
        return self._search(key, None, counters)

    def search_latest_before(self, key: bytes, sn: int, counters=None):
        """Newest entry for key with entry.sn < sn, or None."""
        return self._search(key, sn, counters)

    def iter_entries(self, workers: Optional[int] = None) -> Iterator[tuple[bytes, int, int]]:
        for i in range(len(self._blocks)):
            data = self._read_block(i)
            offsets, _ = _parse_block(data)
            for off in offsets:
                yield _entry_at(data, off)

    def iter_from(self, from_key: Optional[bytes]) -> Iterator[tuple[bytes, int, int]]:
        """Entries with key >= from_key, in file order."""
        start = 0
        if from_key is not None:
            i = bisect_right(self._firsts, from_key) - 1
            start = max(i, 0)
        for i in range(start, len(self._blocks)):
            data = self._read_block(i)
            offsets, _ = _parse_block(data)
            for off in offsets:
                entry = _entry_at(data, off)
                if from_key is None or entry[0] >= from_key:
                    yield entry
