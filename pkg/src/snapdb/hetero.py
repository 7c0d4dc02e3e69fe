"""Heterogeneous processing: snapshot epochs for OLAP transactions.

A snapshot is triggered every N commits, but only a timestamp is logged and
the current version chains are handed over; no column is copied. The first
OLAP transaction that needs a column materializes it under an exclusive
column lock using the configured snapshot backend. Columns nobody asks for
are never materialized. Epochs are refcounted by the OLAP transactions
pinned to them; deleting an epoch drops its frozen columns and its chain
store wholesale, which is the entire version garbage collection in this mode.

Commits may land on a column between the trigger and its materialization.
Materialization therefore repairs such rows: any cell whose timestamp is
newer than the epoch timestamp is patched back to the version visible at the
epoch timestamp (found in the handed-over chains). After sealing, every
in-place cell is exactly the epoch-visible version, so OLAP scans never look
at a chain or a timestamp.

Lock order (deadlock freedom): commit lock, then column locks, then the
registry lock. The materializer never takes the commit lock and never holds
the registry lock while acquiring a column lock.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np

from . import storage
from .storage import ChainStore, FrozenColumn


class RetriableBegin(Exception):
    """No epoch old enough for this OLAP begin; caller should retry."""


class EpochUsageError(Exception):
    """Epoch pin/release misuse (e.g. double release)."""


class ColumnLock:
    """Shared (updating committers) / exclusive (materializer) column lock.

    An exclusive request blocks new shared acquisitions and waits for the
    current holders to drain.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._shared = 0
        self._exclusive = False
        self._pending_exclusive = 0

    def acquire_shared(self) -> None:
        with self._cond:
            while self._exclusive or self._pending_exclusive:
                self._cond.wait()
            self._shared += 1

    def release_shared(self) -> None:
        with self._cond:
            self._shared -= 1
            self._cond.notify_all()

    def acquire_exclusive(self) -> None:
        with self._cond:
            self._pending_exclusive += 1
            while self._exclusive or self._shared:
                self._cond.wait()
            self._pending_exclusive -= 1
            self._exclusive = True

    def release_exclusive(self) -> None:
        with self._cond:
            self._exclusive = False
            self._cond.notify_all()


class SnapshotEpoch:
    """One frozen, timestamped, refcounted set of column views plus the
    version chains handed over when the snapshot was triggered."""

    def __init__(self, epoch_id: int, epoch_ts: int, chains: ChainStore):
        self.epoch_id = epoch_id
        self.epoch_ts = epoch_ts
        self.chains = chains
        self.frozen: dict[tuple[str, str], FrozenColumn] = {}
        self.refcount = 0
        self.pending = True      # never pinned, nothing materialized
        self.discarded = False   # skipped trigger; only its chains remain


class EpochRegistry:
    """Owns the epoch list: trigger bookkeeping, pinning, materialization,
    reaping. The engine calls in; no locks are held across calls out."""

    def __init__(self, engine, commits_per_snapshot: int):
        if commits_per_snapshot <= 0:
            raise ValueError("commits_per_snapshot must be positive")
        self.engine = engine
        self.commits_per_snapshot = commits_per_snapshot
        self._lock = threading.Lock()
        self._epochs: list[SnapshotEpoch] = []  # ascending epoch_ts
        self._commit_counter = 0
        self._next_id = 1
        self.snapshots_triggered = 0
        self.snapshots_discarded = 0
        self.columns_materialized = 0

    # --- trigger ------------------------------------------------------------

    def tick(self) -> bool:
        """Count one commit; true when a snapshot trigger point is reached.
        Called inside the commit critical section."""
        self._commit_counter += 1
        return self._commit_counter % self.commits_per_snapshot == 0

    def open_pending(self, epoch_ts: int, handed_chains: ChainStore) -> SnapshotEpoch:
        """Log a snapshot: stamp a pending epoch and take over the chains.
        A previous pending epoch that nobody ever touched stops being
        materializable; its chains stay until reaped."""
        with self._lock:
            if self._epochs and self._epochs[-1].pending and self._epochs[-1].refcount == 0:
                self._epochs[-1].discarded = True
                self.snapshots_discarded += 1
            epoch = SnapshotEpoch(self._next_id, epoch_ts, handed_chains)
            self._next_id += 1
            self._epochs.append(epoch)
            self.snapshots_triggered += 1
            return epoch

    def ensure_epoch_locked(self, published_ts: int) -> None:
        """Create the first epoch on demand (commit lock held by caller)."""
        with self._lock:
            if any(not e.discarded for e in self._epochs):
                return
        self.engine._open_epoch_locked()

    # --- pin / release ----------------------------------------------------------

    def pin(self, begin_ts: int) -> SnapshotEpoch:
        with self._lock:
            for epoch in reversed(self._epochs):
                if not epoch.discarded and epoch.epoch_ts <= begin_ts:
                    epoch.refcount += 1
                    epoch.pending = False
                    return epoch
        raise RetriableBegin(f"no epoch at or before ts {begin_ts}")

    def release(self, epoch: SnapshotEpoch) -> None:
        oldest = self.engine.oldest_active_begin()
        with self._lock:
            if epoch.refcount <= 0:
                raise EpochUsageError("release of an unpinned epoch")
            epoch.refcount -= 1
            self._reap_locked(oldest)

    def reap(self) -> list[int]:
        """Delete every epoch nobody can reach anymore; returns epoch ids."""
        oldest = self.engine.oldest_active_begin()
        with self._lock:
            return self._reap_locked(oldest)

    def _reap_locked(self, oldest_active_begin: int) -> list[int]:
        newest_usable = next(
            (e for e in reversed(self._epochs) if not e.discarded), None)
        deleted = []
        kept = []
        for e in self._epochs:
            removable = (e.refcount == 0 and e is not newest_usable
                         and oldest_active_begin >= e.epoch_ts)
            if not removable:
                kept.append(e)
                continue
            for frozen in e.frozen.values():
                seg_bytes = _segment_bytes(frozen)
                frozen.space.unregister_fault_hooks(frozen.base, seg_bytes)
                frozen.space.vm_unmap(frozen.base, seg_bytes)
            e.frozen.clear()
            deleted.append(e.epoch_id)
        self._epochs = kept
        return deleted

    # --- materialization -----------------------------------------------------

    def acquire(self, ctx, table: str, column_names: Sequence[str]) -> list[FrozenColumn]:
        """Frozen views of the named columns in the transaction's epoch,
        materializing the missing ones lazily."""
        epoch = ctx.epoch
        if epoch is None:
            raise EpochUsageError("transaction holds no epoch")
        out = []
        for name in column_names:
            key = (table, name)
            frozen = epoch.frozen.get(key)
            if frozen is None:
                frozen = self._materialize(epoch, table, name)
            out.append(frozen)
        return out

    def _materialize(self, epoch: SnapshotEpoch, table: str, name: str) -> FrozenColumn:
        key = (table, name)
        lock = self.engine.column_locks[key]
        lock.acquire_exclusive()
        try:
            frozen = epoch.frozen.get(key)
            if frozen is not None:
                return frozen
            column = self.engine.tables[table].columns[name]
            frozen = storage.snapshot_column(column, self.engine.backend)
            self._repair(epoch, frozen)
            frozen.values()  # seal: assemble the scan array once
            with self._lock:
                epoch.frozen[key] = frozen
                self.columns_materialized += 1
            return frozen
        finally:
            lock.release_exclusive()

    def _repair(self, epoch: SnapshotEpoch, frozen: FrozenColumn) -> None:
        """Patch rows committed after the epoch timestamp back to the version
        visible at the epoch timestamp, using the chains."""
        stale = np.nonzero(frozen.ts[: frozen.row_count] > epoch.epoch_ts)[0]
        if stale.shape[0] == 0:
            return
        stores = self.engine.chain_store_list()
        for row in stale:
            key = (frozen.table_name, frozen.column_name, int(row))
            value, ts = storage.chain_visible(key, epoch.epoch_ts, stores)
            frozen.patch_cell(int(row), value, ts)
        self.engine.probes.add("chain_traversals_repair", int(stale.shape[0]))

    # --- introspection ---------------------------------------------------------

    def handed_chains_newest_first(self) -> list[ChainStore]:
        with self._lock:
            return [e.chains for e in reversed(self._epochs)]

    def live_epochs(self) -> list[SnapshotEpoch]:
        with self._lock:
            return list(self._epochs)

    def metrics(self) -> dict:
        with self._lock:
            return {
                "epochs_live": len(self._epochs),
                "columns_materialized": self.columns_materialized,
                "chain_nodes_epochs": sum(e.chains.node_count for e in self._epochs),
                "snapshots_triggered": self.snapshots_triggered,
                "snapshots_discarded": self.snapshots_discarded,
            }


def _segment_bytes(frozen: FrozenColumn) -> int:
    page = frozen.space.page_size
    return (frozen.capacity * storage.CELL + page - 1) // page * page
