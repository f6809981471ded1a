"""Operation traces: seeded generation and a line-oriented text format.

Ops are plain tuples; snapshots are referenced by small integer slots so a
trace replays identically against the engine and the oracle:

    ("put", key, value)        ("delete", key)         ("get", key)
    ("get_at", key, slot)      ("snap_create", slot)   ("snap_release", slot)
    ("iterate", lo, hi)        ("iterate_at", lo, hi, slot)
    ("flush",)  ("compact",)  ("compact_all",)  ("gc",)  ("crash",)
"""

from __future__ import annotations

import random
from typing import Optional

DEFAULT_MIX = {
    "put": 0.40,
    "delete": 0.10,
    "get": 0.35,
    "get_at": 0.05,
    "iterate": 0.05,
    "snap": 0.05,
}


def generate_trace(seed: int, n_ops: int, *, key_space: int = 64,
                   value_bytes: tuple[int, int] = (4, 24),
                   mix: Optional[dict] = None, p_flush: float = 0.003,
                   p_compact: float = 0.0015,
                   max_snapshots: int = 4) -> list[tuple]:
    rng = random.Random(seed)
    mix = mix or DEFAULT_MIX
    kinds = list(mix)
    weights = [mix[k] for k in kinds]
    keys = [b"k%06d" % i for i in range(key_space)]
    ops: list[tuple] = []
    live: list[int] = []
    next_slot = 0

    def rand_key() -> bytes:
        return keys[rng.randrange(key_space)]

    def rand_range() -> tuple[bytes, bytes]:
        i = rng.randrange(key_space)
        j = min(key_space - 1, i + rng.randrange(1, 32))
        return keys[i], keys[j]

    for _ in range(n_ops):
        if rng.random() < p_flush:
            ops.append(("flush",))
        if rng.random() < p_compact:
            ops.append(("compact",))
        kind = rng.choices(kinds, weights)[0]
        if kind == "put":
            value = rng.randbytes(rng.randint(*value_bytes))
            ops.append(("put", rand_key(), value))
        elif kind == "delete":
            ops.append(("delete", rand_key()))
        elif kind == "get":
            ops.append(("get", rand_key()))
        elif kind == "get_at":
            if live:
                ops.append(("get_at", rand_key(), rng.choice(live)))
            else:
                ops.append(("get", rand_key()))
        elif kind == "iterate":
            lo, hi = rand_range()
            if live and rng.random() < 0.5:
                ops.append(("iterate_at", lo, hi, rng.choice(live)))
            else:
                ops.append(("iterate", lo, hi))
        else:  # snapshot churn
            if live and (len(live) >= max_snapshots or rng.random() < 0.5):
                slot = live.pop(rng.randrange(len(live)))
                ops.append(("snap_release", slot))
            else:
                ops.append(("snap_create", next_slot))
                live.append(next_slot)
                next_slot += 1
    for slot in live:
        ops.append(("snap_release", slot))
    return ops


def _fmt(b: Optional[bytes]) -> str:
    return "-" if b is None else b.hex()


def _parse(s: str) -> Optional[bytes]:
    return None if s == "-" else bytes.fromhex(s)


def write_trace(ops: list[tuple], path: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        for op in ops:
            kind = op[0]
            if kind == "put":
                f.write(f"put {op[1].hex()} {op[2].hex()}\n")
            elif kind in ("delete", "get"):
                f.write(f"{kind} {op[1].hex()}\n")
            elif kind == "get_at":
                f.write(f"get_at {op[1].hex()} {op[2]}\n")
            elif kind == "iterate":
                f.write(f"iterate {_fmt(op[1])} {_fmt(op[2])}\n")
            elif kind == "iterate_at":
                f.write(f"iterate_at {_fmt(op[1])} {_fmt(op[2])} {op[3]}\n")
            elif kind in ("snap_create", "snap_release"):
                f.write(f"{kind} {op[1]}\n")
            else:
                f.write(kind + "\n")


def read_trace(path: str) -> list[tuple]:
    ops: list[tuple] = []
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            kind = parts[0]
            if kind == "put":
                ops.append(("put", bytes.fromhex(parts[1]), bytes.fromhex(parts[2])))
            elif kind in ("delete", "get"):
                ops.append((kind, bytes.fromhex(parts[1])))
            elif kind == "get_at":
                ops.append(("get_at", bytes.fromhex(parts[1]), int(parts[2])))
            elif kind == "iterate":
                ops.append(("iterate", _parse(parts[1]), _parse(parts[2])))
            elif kind == "iterate_at":
                ops.append(("iterate_at", _parse(parts[1]), _parse(parts[2]), int(parts[3])))
            elif kind in ("snap_create", "snap_release"):
                ops.append((kind, int(parts[1])))
            else:
                ops.append((kind,))
    return ops
