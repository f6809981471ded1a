"""Write-ahead log record codec.

Record format (bit-exact):

    [len_be32][crc32c_be32][op u8][sn_be64][key_len_be32][key][val_len_be32][val]

len counts the payload (op..val); the checksum covers the payload.  Replay
parses forward and stops silently at the first torn or corrupt record, so
a crash mid-append costs at most the final record.
"""

from __future__ import annotations

import struct
from typing import Iterator, Optional

from .util import crc32c, u32

OP_PUT = 1
OP_DELETE = 2

_HDR = struct.Struct(">II")


def encode_record(op: int, sn: int, key: bytes, value: bytes = b"") -> bytes:
    payload = struct.pack(">BQI", op, sn, len(key)) + key + u32.pack(len(value)) + value
    return _HDR.pack(len(payload), crc32c(payload)) + payload


def iter_records(data: bytes) -> Iterator[tuple[int, int, bytes, bytes]]:
    """Yield (op, sn, key, value) until the stream ends or tears."""
    off = 0
    n = len(data)
    while off + 8 <= n:
        ln, crc = _HDR.unpack_from(data, off)
        if ln < 13 or off + 8 + ln > n:
            return
        payload = data[off + 8 : off + 8 + ln]
        if crc32c(payload) != crc:
            return
        op, sn, klen = struct.unpack_from(">BQI", payload, 0)
        if op not in (OP_PUT, OP_DELETE) or 13 + klen + 4 > ln:
            return
        key = payload[13 : 13 + klen]
        vlen = u32.unpack_from(payload, 13 + klen)[0]
        if 13 + klen + 4 + vlen != ln:
            return
        value = payload[13 + klen + 4 : 13 + klen + 4 + vlen]
        yield op, sn, key, value
        off += 8 + ln


def replay(data: bytes, from_sn: int = 0) -> list[tuple[int, int, bytes, bytes]]:
    """All well-formed records with sn > from_sn, in log order."""
    return [rec for rec in iter_records(data) if rec[1] > from_sn]
