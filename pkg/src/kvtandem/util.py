"""CRC-32C and byte-packing helpers used by every on-storage format.

CRC-32C (Castagnoli, reflected polynomial 0x82F63B78) protects segment
records, WAL records and manifest records.  When numba is importable the
byte loop is JIT-compiled (cached to disk); otherwise a pure-Python
slicing-by-8 implementation is used.  Both produce identical results and
are checked against the published vector crc32c(b"123456789") == 0xE3069283.
"""

from __future__ import annotations

import struct

_POLY = 0x82F63B78


def _make_table(poly: int) -> list[int]:
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_T = [_make_table(_POLY)]
for _ in range(7):
    _prev = _T[-1]
    _T.append([_T[0][_prev[n] & 0xFF] ^ (_prev[n] >> 8) for n in range(256)])
_T0, _T1, _T2, _T3, _T4, _T5, _T6, _T7 = _T


def _crc32c_py(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    n = len(data)
    i = 0
    end8 = n - (n % 8)
    while i < end8:
        crc = (
            _T7[(crc ^ data[i]) & 0xFF]
            ^ _T6[((crc >> 8) ^ data[i + 1]) & 0xFF]
            ^ _T5[((crc >> 16) ^ data[i + 2]) & 0xFF]
            ^ _T4[((crc >> 24) ^ data[i + 3]) & 0xFF]
            ^ _T3[data[i + 4]]
            ^ _T2[data[i + 5]]
            ^ _T1[data[i + 6]]
            ^ _T0[data[i + 7]]
        )
        i += 8
    while i < n:
        crc = _T0[(crc ^ data[i]) & 0xFF] ^ (crc >> 8)
        i += 1
    return crc ^ 0xFFFFFFFF


def _build_numba_crc():
    import numba
    import numpy as np

    table = np.array(_T0, dtype=np.uint32)

    @numba.njit(numba.uint32(numba.types.Bytes(numba.u1, 1, "C"), numba.uint32), cache=True)
    def _crc(data, crc):  # pragma: no cover - exercised via crc32c()
        crc = ~crc & numba.uint32(0xFFFFFFFF)
        for i in range(len(data)):
            crc = table[(crc ^ data[i]) & numba.uint32(0xFF)] ^ (crc >> numba.uint32(8))
        return ~crc & numba.uint32(0xFFFFFFFF)

    def crc(data: bytes, start: int = 0) -> int:
        return int(_crc(bytes(data) if type(data) is not bytes else data, start))

    return crc


try:
    crc32c = _build_numba_crc()
except Exception:  # numba absent or failed to JIT: stay pure-Python
    crc32c = _crc32c_py

assert crc32c(b"123456789") == 0xE3069283

u32 = struct.Struct(">I")
u64 = struct.Struct(">Q")
u16 = struct.Struct(">H")


def be32(v: int) -> bytes:
    return u32.pack(v)


def be64(v: int) -> bytes:
    return u64.pack(v)
