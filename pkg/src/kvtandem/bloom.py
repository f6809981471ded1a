"""Bloom filter over the LSM's versioned-or-tombstone keys.

The filter answers "might this key be stored in versioned mode?", so
direct-mode keys are deliberately absent and the common single-version
read skips the SST search entirely.  ~10 bits per member, 7 probes
(false-positive rate ~0.8% at that sizing), zero false negatives.

Probes are double-hashed from two crc32 variants of the key, so a key's
probe sequence can be computed once and tested against every file's
filter during one read.
"""

from __future__ import annotations

import zlib

from .util import u32

BITS_PER_KEY = 10
NUM_PROBES = 7
_SEED2 = 0x9E3779B9


def hash_pair(key: bytes) -> tuple[int, int]:
    h1 = zlib.crc32(key)
    h2 = zlib.crc32(key, _SEED2) | 1  # odd step so probes cycle all bits
    return h1, h2


class BloomFilter:
    __slots__ = ("nbits", "bits")

    def __init__(self, nbits: int, bits: bytearray | None = None) -> None:
        self.nbits = max(nbits, 64)
        self.bits = bits if bits is not None else bytearray((self.nbits + 7) // 8)

    @classmethod
    def with_capacity(cls, n_keys: int) -> "BloomFilter":
        return cls(max(n_keys, 1) * BITS_PER_KEY)

    def add(self, key: bytes) -> None:
        h1, h2 = hash_pair(key)
        nbits = self.nbits
        bits = self.bits
        for _ in range(NUM_PROBES):
            pos = h1 % nbits
            bits[pos >> 3] |= 1 << (pos & 7)
            h1 = (h1 + h2) & 0xFFFFFFFF

    def contains(self, key: bytes) -> bool:
        return self.contains_hashed(*hash_pair(key))

    def contains_hashed(self, h1: int, h2: int) -> bool:
        nbits = self.nbits
        bits = self.bits
        for _ in range(NUM_PROBES):
            pos = h1 % nbits
            if not bits[pos >> 3] & (1 << (pos & 7)):
                return False
            h1 = (h1 + h2) & 0xFFFFFFFF
        return True

    def encode(self) -> bytes:
        return u32.pack(self.nbits) + bytes(self.bits)

    @classmethod
    def decode(cls, data: bytes) -> "BloomFilter":
        nbits = u32.unpack_from(data, 0)[0]
        return cls(nbits, bytearray(data[4:]))
