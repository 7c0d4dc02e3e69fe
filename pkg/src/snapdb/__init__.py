"""Columnar in-memory MVCC engine with high-frequency virtual snapshots.

OLTP transactions run on the up-to-date store under MVCC; OLAP transactions
are routed to frozen, refcounted snapshot epochs whose columns are duplicated
virtually (shared pages, copy-on-write) by an emulated virtual-memory
subsystem. A benchmark harness exercises latency, throughput, scan cost,
snapshot cost and thread scaling.
"""

from .vmem import AddressSpace, OpCounters
from .backends import SnapshotBackend, SnapshotCost, make_backend
from .storage import Column, Table, create_table, bulk_append, read_visible
from .txn import Engine, EngineConfig, TransactionAborted, OLTP, OLAP, SI, SERIALIZABLE
from .query import QueryPlan, Predicate, run_plan

__all__ = [
    "AddressSpace",
    "OpCounters",
    "SnapshotBackend",
    "SnapshotCost",
    "make_backend",
    "Column",
    "Table",
    "create_table",
    "bulk_append",
    "read_visible",
    "Engine",
    "EngineConfig",
    "TransactionAborted",
    "OLTP",
    "OLAP",
    "SI",
    "SERIALIZABLE",
    "QueryPlan",
    "Predicate",
    "run_plan",
]
