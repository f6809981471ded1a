"""Replay a trace against the engine and the oracle, comparing every read."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..config import EngineConfig
from ..engine import Db
from ..kvs import Store, StoreConfig
from .audit import AuditResult, audit_invariant1
from .oracle import OracleDb, OracleSnapshot


@dataclass
class Divergence:
    op_index: int
    op: tuple
    expected: object
    actual: object

    def __str__(self) -> str:
        return (f"op[{self.op_index}] {self.op!r}: engine returned "
                f"{self.actual!r}, oracle says {self.expected!r}")


@dataclass
class Verdict:
    passed: bool
    ops_run: int
    seed: Optional[int] = None
    divergence: Optional[Divergence] = None
    audit_failures: list[str] = field(default_factory=list)


def make_test_db(config: Optional[EngineConfig] = None) -> Db:
    cfg = config or EngineConfig(sync_wal=False, memtable_bytes=128 << 10)
    store = Store(config=StoreConfig(segment_bytes=1 << 20))
    return Db.open(store=store, config=cfg)


class TraceRunner:
    """Applies trace ops to an engine + oracle pair with slot bookkeeping."""

    def __init__(self, db: Db, oracle: Optional[OracleDb] = None) -> None:
        self.db = db
        self.oracle = oracle or OracleDb()
        self.engine_slots: dict[int, object] = {}
        self.oracle_slots: dict[int, OracleSnapshot] = {}

    def kill_slots(self) -> None:
        """Crash semantics: snapshots do not survive restarts."""
        self.engine_slots.clear()
        for snap in self.oracle_slots.values():
            self.oracle.snapshots.pop(snap.id, None)
        self.oracle_slots.clear()

    def apply(self, index: int, op: tuple) -> Optional[Divergence]:
        db, oracle = self.db, self.oracle
        kind = op[0]
        if kind == "put":
            db.put(op[1], op[2])
            oracle.put(op[1], op[2])
        elif kind == "delete":
            db.delete(op[1])
            oracle.delete(op[1])
        elif kind == "get":
            actual = db.get(op[1])
            expected = oracle.get(op[1])
            if actual != expected:
                return Divergence(index, op, expected, actual)
        elif kind == "get_at":
            slot = op[2]
            if slot not in self.engine_slots:
                return None  # snapshot died in a crash; skip consistently
            actual = db.get_at(op[1], self.engine_slots[slot])
            expected = oracle.get_at(op[1], self.oracle_slots[slot])
            if actual != expected:
                return Divergence(index, op, expected, actual)
        elif kind == "iterate":
            actual = list(db.iterate(op[1], op[2]))
            expected = oracle.iterate(op[1], op[2])
            if actual != expected:
                return Divergence(index, op, expected, actual)
        elif kind == "iterate_at":
            slot = op[3]
            if slot not in self.engine_slots:
                return None
            actual = list(db.iterate_at(op[1], op[2], self.engine_slots[slot]))
            expected = oracle.iterate_at(op[1], op[2], self.oracle_slots[slot])
            if actual != expected:
                return Divergence(index, op, expected, actual)
        elif kind == "snap_create":
            self.engine_slots[op[1]] = db.snapshot_create()
            self.oracle_slots[op[1]] = oracle.snapshot_create()
        elif kind == "snap_release":
            if op[1] in self.engine_slots:
                db.snapshot_release(self.engine_slots.pop(op[1]))
                oracle.snapshot_release(self.oracle_slots.pop(op[1]))
        elif kind == "flush":
            db.flush_now()
        elif kind == "compact":
            db.compact_now()
        elif kind == "compact_all":
            db.compact_all()
        elif kind == "gc":
            db.kvs_gc()
        else:
            raise ValueError(f"unknown trace op {kind!r}")
        return None

    def final_state_divergence(self) -> Optional[Divergence]:
        actual = dict(self.db.iterate())
        expected = self.oracle.live_state()
        if actual != expected:
            missing = sorted(set(expected) - set(actual))[:3]
            extra = sorted(set(actual) - set(expected))[:3]
            return Divergence(-1, ("final-state",),
                              f"missing={missing}", f"extra={extra}")
        return None


def run_equivalence(ops: list[tuple], *, seed: Optional[int] = None,
                    config: Optional[EngineConfig] = None,
                    audit_commits: bool = False) -> Verdict:
    """Replay ``ops`` on a fresh in-memory engine against the oracle.
    First mismatch wins; optionally audit direct-is-older after every
    flush/compaction commit."""
    db = make_test_db(config)
    runner = TraceRunner(db)
    audit_failures: list[str] = []
    if audit_commits:
        def check(_kind: str) -> None:
            result = audit_invariant1(db)
            if not result.passed:
                audit_failures.extend(result.violations)
        db.on_commit = check
    for i, op in enumerate(ops):
        d = runner.apply(i, op)
        if d is not None:
            return Verdict(False, i + 1, seed=seed, divergence=d,
                           audit_failures=audit_failures)
    d = runner.final_state_divergence()
    if d is not None:
        return Verdict(False, len(ops), seed=seed, divergence=d,
                       audit_failures=audit_failures)
    return Verdict(not audit_failures, len(ops), seed=seed,
                   audit_failures=audit_failures)
