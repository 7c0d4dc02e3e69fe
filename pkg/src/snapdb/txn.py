"""Transaction manager: MVCC begin/read/write/commit/abort.

Writes stay in a transaction-local write set until commit, so aborts never
touch shared state. The commit path is one engine-wide critical section:
first-committer-wins write-write detection, precision-locking read-set
validation (serializable mode), in-place install of the writes with the
displaced versions pushed onto chains, and a single publication point that
makes the whole commit visible atomically. Begin timestamps are drawn from
the published timestamp, so an in-flight commit is invisible until fully
installed.

Homogeneous engines run OLAP transactions on the versioned store and rely on
a background garbage collector that prunes chain versions older than the
oldest active transaction. Heterogeneous engines route OLAP transactions to
frozen snapshot epochs (see hetero) and drop chains wholesale with their
epoch instead.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import hetero, storage
from .backends import SnapshotBackend, make_backend
from .storage import ChainStore, Column, Table, bulk_append, decode_cell
from .vmem import AddressSpace

OLTP = "oltp"
OLAP = "olap"
SI = "si"
SERIALIZABLE = "serializable"
HOMOGENEOUS = "homogeneous"
HETEROGENEOUS = "heterogeneous"

MODES = {
    "homogeneous-si": (HOMOGENEOUS, SI),
    "homogeneous-serializable": (HOMOGENEOUS, SERIALIZABLE),
    "heterogeneous-serializable": (HETEROGENEOUS, SERIALIZABLE),
}

ACTIVE = "active"
COMMITTED = "committed"
ABORTED = "aborted"

WW_CONFLICT = "ww-conflict"
SERIALIZABILITY = "serializability"


class TransactionAborted(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ReadOnlyViolation(Exception):
    """Write attempted by an OLAP (read-only) transaction."""


class UsageError(Exception):
    """Operation on a transaction in the wrong state."""


@dataclass
class ClockState:
    next_ts: int = 0
    published_ts: int = 0


@dataclass
class CommitRecord:
    commit_ts: int
    # (column key, row, old value, new value)
    writes: list[tuple[tuple[str, str], int, object, object]]


class Probes:
    """Cross-checkable execution counters (batched adds, lock-protected)."""

    FIELDS = (
        "chain_traversals_olap",
        "chain_traversals_oltp",
        "chain_traversals_repair",
        "visibility_checks_scan",
        "epoch_scan_checks",
    )

    def __init__(self):
        self._lock = threading.Lock()
        for f in self.FIELDS:
            setattr(self, f, 0)

    def add(self, name: str, n: int = 1) -> None:
        if n:
            with self._lock:
                setattr(self, name, getattr(self, name) + n)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


class TransactionContext:
    __slots__ = ("txn_id", "kind", "isolation", "begin_ts", "write_set",
                 "read_rows", "predicates", "state", "epoch")

    def __init__(self, txn_id: int, kind: str, isolation: str, begin_ts: int):
        self.txn_id = txn_id
        self.kind = kind
        self.isolation = isolation
        self.begin_ts = begin_ts
        self.write_set: dict[tuple[tuple[str, str], int], object] = {}
        self.read_rows: set[tuple[str, int]] = set()
        self.predicates: list[tuple] = []
        self.state = ACTIVE
        self.epoch = None


@dataclass
class EngineConfig:
    processing: str = HOMOGENEOUS
    isolation: str = SERIALIZABLE
    backend: str = "vm_snapshot"
    snapshot_interval: int = 10_000
    gc_interval: float = 1.0
    page_size: int = 4096

    @classmethod
    def from_mode(cls, mode: str, **kw) -> "EngineConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
        processing, isolation = MODES[mode]
        return cls(processing=processing, isolation=isolation, **kw)


class Engine:
    """One database instance: tables, clock, commit log, snapshot registry."""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()
        self.space = AddressSpace(self.config.page_size)
        self.tables: dict[str, Table] = {}
        self.clock = ClockState()
        self.chains = ChainStore(0)
        self.commit_lock = threading.Lock()
        self.commit_log: list[CommitRecord] = []
        self.probes = Probes()
        self.column_locks: dict[tuple[str, str], hetero.ColumnLock] = {}
        self._active: dict[int, TransactionContext] = {}
        self._active_lock = threading.Lock()
        self._txn_ids = itertools.count(1)
        self._commits_since_prune = 0
        self.backend: Optional[SnapshotBackend] = None
        self.registry: Optional[hetero.EpochRegistry] = None
        if self.config.processing == HETEROGENEOUS:
            self.backend = make_backend(self.config.backend)
            self.registry = hetero.EpochRegistry(self, self.config.snapshot_interval)
        self._gc_thread: Optional[threading.Thread] = None
        self._gc_stop = threading.Event()

    # --- schema -----------------------------------------------------------

    def create_table(self, name: str, schema: Sequence[tuple[str, str]],
                     capacity: int) -> Table:
        table = storage.create_table(self.space, name, schema, capacity, self.backend)
        self.tables[name] = table
        for col_name in table.column_order:
            self.column_locks[(name, col_name)] = hetero.ColumnLock()
        return table

    def load(self, name: str, rows) -> None:
        bulk_append(self.tables[name], rows)

    def table(self, name: str) -> Table:
        return self.tables[name]

    def column(self, table: str, column: str) -> Column:
        return self.tables[table].columns[column]

    # --- transaction lifecycle -------------------------------------------

    def begin(self, kind: str = OLTP, isolation: Optional[str] = None) -> TransactionContext:
        iso = isolation or self.config.isolation
        if kind == OLAP and self.registry is not None:
            # take the begin timestamp and the epoch pin together so a
            # pinnable epoch (epoch_ts <= begin_ts) always exists
            with self.commit_lock:
                self.registry.ensure_epoch_locked(self.clock.published_ts)
                begin_ts = self.clock.published_ts
            ctx = TransactionContext(next(self._txn_ids), kind, iso, begin_ts)
            ctx.epoch = self.registry.pin(begin_ts)
        else:
            ctx = TransactionContext(next(self._txn_ids), kind, iso,
                                     self.clock.published_ts)
        with self._active_lock:
            self._active[ctx.txn_id] = ctx
        return ctx

    def _finish(self, ctx: TransactionContext, state: str) -> None:
        ctx.state = state
        with self._active_lock:
            self._active.pop(ctx.txn_id, None)
        if ctx.epoch is not None:
            self.registry.release(ctx.epoch)
            ctx.epoch = None

    def abort(self, ctx: TransactionContext) -> None:
        """Drop local changes; shared state is untouched by construction."""
        if ctx.state != ACTIVE:
            raise UsageError(f"abort of {ctx.state} transaction")
        self._finish(ctx, ABORTED)

    # --- reads / writes ----------------------------------------------------

    def read(self, ctx: TransactionContext, table: str, column: str, row: int):
        if ctx.state != ACTIVE:
            raise UsageError(f"read in {ctx.state} transaction")
        col = self.tables[table].columns[column]
        if row < 0 or row >= col.row_count:
            raise IndexError(f"row {row} out of range for {table}.{column}")
        key = ((table, column), row)
        if key in ctx.write_set:
            return ctx.write_set[key]
        if ctx.kind == OLAP and ctx.epoch is not None:
            frozen = self.registry.acquire(ctx, table, (column,))[0]
            return frozen_value_at(frozen, row)
        value = self._visible(col, row, ctx.begin_ts, ctx.kind)
        if ctx.kind == OLTP and ctx.isolation == SERIALIZABLE:
            ctx.read_rows.add((table, row))
        return value

    def _visible(self, col: Column, row: int, begin_ts: int, kind: str):
        t1 = int(col.ts[row])
        if t1 <= begin_ts:
            raw = col.segment.read_cell_raw(row)
            if int(col.ts[row]) == t1:
                return decode_cell(col.dtype, raw)
        value, _ = storage.visible_version(col, row, begin_ts, self.chain_store_list())
        self.probes.add("chain_traversals_olap" if kind == OLAP
                        else "chain_traversals_oltp")
        return value

    def record_predicate(self, ctx: TransactionContext, table: str, column: str,
                         predicate: tuple) -> None:
        """Log a filter for validation: ('interval', lo, hi) or ('codes', set)."""
        if ctx.kind == OLTP and ctx.isolation == SERIALIZABLE:
            kind, *payload = predicate
            if kind == "interval":
                ctx.predicates.append(((table, column), "interval",
                                       payload[0], payload[1]))
            elif kind == "codes":
                ctx.predicates.append(((table, column), "codes",
                                       frozenset(payload[0])))
            else:
                raise ValueError(f"unknown predicate kind {kind!r}")

    def write(self, ctx: TransactionContext, table: str, column: str, row: int,
              value) -> None:
        if ctx.state != ACTIVE:
            raise UsageError(f"write in {ctx.state} transaction")
        if ctx.kind != OLTP:
            raise ReadOnlyViolation("OLAP transactions are read-only")
        col = self.tables[table].columns[column]
        if row < 0 or row >= col.row_count:
            raise IndexError(f"row {row} out of range for {table}.{column}")
        ctx.write_set[((table, column), row)] = value

    # --- commit ---------------------------------------------------------------

    def commit(self, ctx: TransactionContext) -> int:
        if ctx.state != ACTIVE:
            raise UsageError(f"commit of {ctx.state} transaction")
        if ctx.kind == OLAP or not ctx.write_set:
            if (ctx.kind == OLTP and ctx.isolation == SERIALIZABLE
                    and (ctx.read_rows or ctx.predicates)):
                # a read-only OLTP transaction still validates its reads
                with self.commit_lock:
                    try:
                        self._validate_reads(ctx)
                    except TransactionAborted:
                        self._finish(ctx, ABORTED)
                        raise
            self._finish(ctx, COMMITTED)
            return ctx.begin_ts
        with self.commit_lock:
            for (col_key, row) in ctx.write_set:
                col = self.tables[col_key[0]].columns[col_key[1]]
                if int(col.ts[row]) > ctx.begin_ts:
                    self._finish(ctx, ABORTED)
                    raise TransactionAborted(
                        WW_CONFLICT, f"row {row} of {col_key} written after begin")
            if ctx.isolation == SERIALIZABLE:
                try:
                    self._validate_reads(ctx)
                except TransactionAborted:
                    self._finish(ctx, ABORTED)
                    raise
            commit_ts = self.clock.next_ts + 1
            self.clock.next_ts = commit_ts
            written_cols = sorted({ck for ck, _ in ctx.write_set})
            for ck in written_cols:
                self.column_locks[ck].acquire_shared()
            try:
                writes = []
                for (col_key, row), value in ctx.write_set.items():
                    col = self.tables[col_key[0]].columns[col_key[1]]
                    old = storage.install_committed_write(
                        col, row, value, commit_ts, self.chains)
                    writes.append((col_key, row, old, value))
            finally:
                for ck in written_cols:
                    self.column_locks[ck].release_shared()
            self.commit_log.append(CommitRecord(commit_ts, writes))
            self.clock.published_ts = commit_ts
            if self.registry is not None and self.registry.tick():
                self._open_epoch_locked()
            self._commits_since_prune += 1
            if self._commits_since_prune >= 256:
                self._prune_commit_log_locked()
        self._finish(ctx, COMMITTED)
        return commit_ts

    def _validate_reads(self, ctx: TransactionContext) -> None:
        """Precision locking: abort if any commit during our lifetime touched a
        row we read or moved a value across one of our predicate ranges."""
        for rec in reversed(self.commit_log):
            if rec.commit_ts <= ctx.begin_ts:
                break
            for col_key, row, old, new in rec.writes:
                if (col_key[0], row) in ctx.read_rows:
                    raise TransactionAborted(
                        SERIALIZABILITY, f"read row {row} of {col_key[0]} overwritten")
                for pred in ctx.predicates:
                    if pred[0] != col_key:
                        continue
                    if pred[1] == "interval":
                        lo, hi = pred[2], pred[3]
                        if lo <= old <= hi or lo <= new <= hi:
                            raise TransactionAborted(
                                SERIALIZABILITY, f"write into predicate range on {col_key}")
                    else:
                        if old in pred[2] or new in pred[2]:
                            raise TransactionAborted(
                                SERIALIZABILITY, f"write into predicate set on {col_key}")

    def _prune_commit_log_locked(self) -> None:
        self._commits_since_prune = 0
        oldest = self.oldest_active_begin()
        i = 0
        while i < len(self.commit_log) and self.commit_log[i].commit_ts <= oldest:
            i += 1
        if i:
            del self.commit_log[:i]

    # --- snapshots (heterogeneous) ------------------------------------------

    def _open_epoch_locked(self) -> None:
        """Hand the current chains to a fresh pending epoch (commit lock held)."""
        handed = self.chains
        self.chains = ChainStore(handed.epoch_id + 1)
        self.registry.open_pending(self.clock.published_ts, handed)

    def trigger_snapshot(self) -> None:
        """Open a pending snapshot epoch now (also used by tests/benches)."""
        if self.registry is None:
            raise UsageError("snapshots are disabled in homogeneous mode")
        with self.commit_lock:
            self._open_epoch_locked()

    def chain_store_list(self) -> list[ChainStore]:
        """Chain stores newest to oldest: current plus epoch-held ones."""
        if self.registry is None:
            return [self.chains]
        return [self.chains] + self.registry.handed_chains_newest_first()

    # --- bookkeeping -----------------------------------------------------------

    def oldest_active_begin(self) -> int:
        with self._active_lock:
            if not self._active:
                return self.clock.published_ts
            return min(c.begin_ts for c in self._active.values())

    def published_ts(self) -> int:
        return self.clock.published_ts

    def checksum(self) -> str:
        """Hash of every column's visible in-place values (order-stable)."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.tables):
            t = self.tables[name]
            for col_name in t.column_order:
                col = t.columns[col_name]
                h.update(col_name.encode())
                h.update(col.as_array().tobytes())
        return h.hexdigest()

    def metrics(self) -> dict:
        out = dict(self.probes.as_dict())
        out["published_ts"] = self.clock.published_ts
        out["commit_log_len"] = len(self.commit_log)
        out["chain_nodes_current"] = self.chains.node_count
        if self.registry is not None:
            out.update(self.registry.metrics())
        return out

    # --- garbage collection (homogeneous) ------------------------------------

    def gc_pass(self, oldest_active_begin_ts: Optional[int] = None,
                batch: int = 256) -> int:
        """Prune chain versions invisible to every active transaction.

        For each chain the newest node with ts <= oldest stays as the visible
        floor; everything strictly older is dropped. Returns nodes pruned.
        """
        if self.config.processing != HOMOGENEOUS:
            raise UsageError("gc_pass applies to homogeneous mode only")
        oldest = (self.oldest_active_begin() if oldest_active_begin_ts is None
                  else oldest_active_begin_ts)
        pruned = 0
        keys = list(self.chains.heads.keys())
        for i in range(0, len(keys), batch):
            with self.commit_lock:
                batch_pruned = 0
                for key in keys[i:i + batch]:
                    node = self.chains.heads.get(key)
                    while node is not None and node.ts > oldest:
                        node = node.next
                    if node is None:
                        continue
                    drop = node.next
                    node.next = None
                    while drop is not None:
                        batch_pruned += 1
                        drop = drop.next
                self.chains.node_count -= batch_pruned
                pruned += batch_pruned
        with self.commit_lock:
            self._prune_commit_log_locked()
        return pruned

    def start_gc(self) -> None:
        if self.config.processing != HOMOGENEOUS or self._gc_thread is not None:
            return
        self._gc_stop.clear()

        def loop():
            while not self._gc_stop.wait(self.config.gc_interval):
                self.gc_pass()

        self._gc_thread = threading.Thread(target=loop, name="snapdb-gc", daemon=True)
        self._gc_thread.start()

    def stop_gc(self) -> None:
        if self._gc_thread is not None:
            self._gc_stop.set()
            self._gc_thread.join()
            self._gc_thread = None


def frozen_value_at(frozen, row: int):
    raw = frozen.space.vm_read(frozen.base + row * storage.CELL, storage.CELL)
    return storage.decode_cell(frozen.dtype, raw)
