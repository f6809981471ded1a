"""State audits: the direct-is-older invariant and the no-orphan space audit."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..engine import Db
from ..sst import KIND_DIRECT, KIND_TOMBSTONE, KIND_VERSIONED
from ..util import u64


@dataclass
class AuditResult:
    passed: bool
    violations: list[str] = field(default_factory=list)


def _scan_value_records(db: Db):
    """(direct: key -> embedded sn, versioned: key -> set of sns)."""
    direct: dict[bytes, int] = {}
    versioned: dict[bytes, set[int]] = {}

    def sink(k: bytes, v: bytes) -> None:
        tag = k[:1]
        if tag == b"D":
            direct[k[1:]] = u64.unpack_from(v, 0)[0]
        elif tag == b"V":
            versioned.setdefault(k[1:-8], set()).add(u64.unpack_from(k, len(k) - 8)[0])

    db.store.scan_unordered(sink)
    return direct, versioned


def audit_invariant1(db: Db) -> AuditResult:
    """Both halves of direct-is-older.

    Store half: a key present in both namespaces has its direct sn strictly
    below every versioned sn.  LSM half: every direct entry sits at a level
    at least as deep as every versioned entry of the same key."""
    violations: list[str] = []

    direct, versioned = _scan_value_records(db)
    for key, vsns in versioned.items():
        dsn = direct.get(key)
        if dsn is not None and dsn >= min(vsns):
            violations.append(
                f"store: key {key!r} direct sn {dsn} >= versioned sn {min(vsns)}")

    min_direct_level: dict[bytes, int] = {}
    max_versioned_level: dict[bytes, int] = {}
    levels = db.levels
    for level, files in enumerate(levels.levels):
        for f in files:
            for key, _sn, kind in db.reader(f.id).iter_entries():
                if kind == KIND_DIRECT:
                    if level < min_direct_level.get(key, 1 << 30):
                        min_direct_level[key] = level
                elif kind == KIND_VERSIONED:
                    if level > max_versioned_level.get(key, -1):
                        max_versioned_level[key] = level
    for key, dlvl in min_direct_level.items():
        vlvl = max_versioned_level.get(key)
        if vlvl is not None and dlvl < vlvl:
            violations.append(
                f"lsm: key {key!r} direct entry at L{dlvl} above versioned at L{vlvl}")

    return AuditResult(passed=not violations, violations=violations)


def audit_no_orphans(db: Db) -> AuditResult:
    """Every live D/V record is reachable from a live SST entry and vice
    versa.  Expects flushed memtables (quiescent database)."""
    violations: list[str] = []
    if any(not mt.is_empty() for mt in db._view.memtables):
        violations.append("memtables not empty; audit requires a quiescent db")
        return AuditResult(False, violations)

    expect_direct: dict[bytes, int] = {}   # key -> newest direct sn
    expect_versioned: set[tuple[bytes, int]] = set()
    for f in db.levels.all_files():
        for key, sn, kind in db.reader(f.id).iter_entries():
            if kind == KIND_DIRECT:
                if sn > expect_direct.get(key, -1):
                    expect_direct[key] = sn
            elif kind == KIND_VERSIONED:
                expect_versioned.add((key, sn))

    direct, versioned = _scan_value_records(db)
    actual_versioned = {(k, sn) for k, sns in versioned.items() for sn in sns}

    for key, sn in sorted(expect_versioned - actual_versioned):
        # a renamed version may legitimately live in the direct record
        if direct.get(key) != sn:
            violations.append(f"missing versioned record for {key!r}@{sn}")
    for key, sn in sorted(actual_versioned - expect_versioned):
        violations.append(f"orphan versioned record {key!r}@{sn}")
    for key, sn in sorted(expect_direct.items()):
        if key not in direct:
            violations.append(f"missing direct record for {key!r} (expect sn {sn})")
        elif direct[key] != sn:
            violations.append(
                f"direct record for {key!r} holds sn {direct[key]}, entries say {sn}")
    referenced = set(expect_direct) | {k for k, sn in expect_versioned
                                       if direct.get(k) == sn}
    for key in sorted(set(direct) - referenced):
        violations.append(f"orphan direct record {key!r}@{direct[key]}")

    return AuditResult(passed=not violations, violations=violations)


def count_value_records(db: Db) -> tuple[int, int]:
    """(direct record count, versioned record count) in the store."""
    direct, versioned = _scan_value_records(db)
    return len(direct), sum(len(s) for s in versioned.values())


def count_live_entries(db: Db) -> int:
    """Non-tombstone entries across all live SST files."""
    total = 0
    for f in db.levels.all_files():
        for _key, _sn, kind in db.reader(f.id).iter_entries():
            if kind != KIND_TOMBSTONE:
                total += 1
    return total
