"""Columnar storage: in-place cells in virtual-memory segments, per-row
version chains (newest-to-oldest), per-row commit timestamps, dictionary
encoding for string attributes, and per-1024-row markers of the first/last
versioned row that let scans tight-loop through unversioned stretches.

Every cell is 8 bytes: int64 and float64 directly, day-number dates and
dictionary codes widened. Row i of a column lives at segment base + 8*i.

Install order matters for lock-free readers: the displaced value is pushed
onto the chain first, then the marker is widened, then the timestamp is
published, then the cell is overwritten. read_visible re-reads the timestamp
after the cell (seqlock style) and diverts to the chain on any change, so a
reader never returns a version newer than its begin timestamp.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .backends import SnapshotBackend, SnapshotCost
from .vmem import AddressSpace

INT64 = "int64"
FLOAT64 = "float64"
DATE = "date"
DICT = "dict32"
DTYPES = (INT64, FLOAT64, DATE, DICT)

CELL = 8
MARKER_BLOCK = 1024

_pack_q = struct.Struct("<q").pack
_pack_d = struct.Struct("<d").pack
_unpack_q = struct.Struct("<q").unpack
_unpack_d = struct.Struct("<d").unpack


class CapacityError(Exception):
    """Append would exceed the column segments' fixed capacity."""


class OrderingError(Exception):
    """Install with a commit timestamp not newer than the row's current one."""


class Dictionary:
    """Append-only value list with dense codes for one string column."""

    def __init__(self, values: Iterable[str] = ()):
        self.values: list[str] = []
        self.index: dict[str, int] = {}
        for v in values:
            self.encode(v)

    def encode(self, value: str) -> int:
        code = self.index.get(value)
        if code is None:
            code = len(self.values)
            self.values.append(value)
            self.index[value] = code
        return code

    def decode(self, code: int) -> str:
        return self.values[code]

    def __len__(self) -> int:
        return len(self.values)


class ChainNode:
    """One superseded version: the value and the timestamp that created it."""

    __slots__ = ("value", "ts", "next")

    def __init__(self, value, ts: int, nxt: Optional["ChainNode"]):
        self.value = value
        self.ts = ts
        self.next = nxt


class ChainStore:
    """Append-only per-row version chains for one snapshot window.

    Dropped wholesale when the snapshot epoch holding it is deleted; in
    homogeneous mode a background pass prunes invisible tails instead.
    """

    def __init__(self, epoch_id: int = 0):
        self.epoch_id = epoch_id
        self.heads: dict[tuple, ChainNode] = {}
        self.node_count = 0

    def push(self, key: tuple, value, ts: int) -> None:
        self.heads[key] = ChainNode(value, ts, self.heads.get(key))
        self.node_count += 1

    def head(self, key: tuple) -> Optional[ChainNode]:
        return self.heads.get(key)


class SyncMarkers:
    """Per-1024-row block: positions of the first and last versioned row."""

    def __init__(self, capacity: int):
        nblocks = (capacity + MARKER_BLOCK - 1) // MARKER_BLOCK
        self.first = np.full(nblocks, -1, dtype=np.int64)
        self.last = np.full(nblocks, -1, dtype=np.int64)

    def note(self, row: int) -> None:
        blk = row // MARKER_BLOCK
        if self.first[blk] < 0:
            self.first[blk] = row
            self.last[blk] = row
        else:
            if row < self.first[blk]:
                self.first[blk] = row
            if row > self.last[blk]:
                self.last[blk] = row

    def span(self, blk: int) -> tuple[int, int]:
        """(first, last) versioned row of a block, or (-1, -1)."""
        return int(self.first[blk]), int(self.last[blk])


@dataclass
class ColumnSegment:
    """The vmem-resident cell payload of one column."""

    space: AddressSpace
    base: int
    capacity: int

    @property
    def nbytes(self) -> int:
        return self.capacity * CELL

    def read_cell_raw(self, row: int) -> bytes:
        addr = self.base + row * CELL
        vbase = addr - addr % self.space.page_size
        pte = self.space.ptes.get(vbase)
        if pte is None:
            return self.space.vm_read(addr, CELL)
        off = addr - vbase
        return self.space.store.page(pte.ppage)[off:off + CELL].tobytes()

    def write_cell_raw(self, row: int, data: bytes) -> None:
        self.space.vm_write(self.base + row * CELL, data)

    def raw_bytes(self, rows: int) -> np.ndarray:
        return self.space.read_array(self.base, rows * CELL)


def _np_dtype(dtype: str):
    return np.float64 if dtype == FLOAT64 else np.int64


def encode_cell(dtype: str, value) -> bytes:
    if dtype == FLOAT64:
        return _pack_d(float(value))
    return _pack_q(int(value))


def decode_cell(dtype: str, data: bytes):
    if dtype == FLOAT64:
        return _unpack_d(data)[0]
    return _unpack_q(data)[0]


class Column:
    """Schema-level column: current segment, timestamps, markers, dictionary."""

    def __init__(self, table_name: str, name: str, dtype: str,
                 segment: ColumnSegment, capacity: int):
        if dtype not in DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}")
        self.table_name = table_name
        self.name = name
        self.dtype = dtype
        self.segment = segment
        self.capacity = capacity
        self.row_count = 0
        self.ts = np.zeros(capacity, dtype=np.int64)
        self.markers = SyncMarkers(capacity)
        self.dictionary = Dictionary() if dtype == DICT else None
        self.version = 0
        self._cache: Optional[tuple[int, np.ndarray]] = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.table_name, self.name)

    def value_at(self, row: int):
        return decode_cell(self.dtype, self.segment.read_cell_raw(row))

    def as_array(self) -> np.ndarray:
        """In-place cells as a typed array (copy, cached until next install)."""
        cached = self._cache
        if cached is not None and cached[0] == self.version:
            return cached[1]
        version = self.version
        raw = self.segment.raw_bytes(self.row_count)
        arr = raw.view(_np_dtype(self.dtype))[: self.row_count]
        self._cache = (version, arr)
        return arr


@dataclass
class FrozenColumn:
    """A column view frozen into a snapshot epoch: read-only after sealing."""

    space: AddressSpace
    base: int
    row_count: int
    capacity: int
    table_name: str
    column_name: str
    dtype: str
    ts: np.ndarray
    dictionary: Optional[Dictionary]
    cost: SnapshotCost
    _values: Optional[np.ndarray] = None

    def patch_cell(self, row: int, value, ts: int) -> None:
        """Repair one cell before sealing (copy-on-write on the frozen side)."""
        self.space.vm_write(self.base + row * CELL, encode_cell(self.dtype, value))
        self.ts[row] = ts
        self._values = None

    def values(self) -> np.ndarray:
        if self._values is None:
            raw = self.space.read_array(self.base, self.row_count * CELL)
            self._values = raw.view(_np_dtype(self.dtype))[: self.row_count]
        return self._values


class Table:
    def __init__(self, name: str, capacity: int, space: AddressSpace):
        self.name = name
        self.capacity = capacity
        self.space = space
        self.columns: dict[str, Column] = {}
        self.column_order: list[str] = []

    @property
    def row_count(self) -> int:
        return next(iter(self.columns.values())).row_count if self.columns else 0

    def column(self, name: str) -> Column:
        return self.columns[name]


def create_table(space: AddressSpace, name: str, schema: Sequence[tuple[str, str]],
                 capacity: int, backend: Optional[SnapshotBackend] = None) -> Table:
    """Create a table whose column payloads live in fresh vmem segments."""
    table = Table(name, capacity, space)
    page = space.page_size
    seg_bytes = (capacity * CELL + page - 1) // page * page
    for col_name, dtype in schema:
        if backend is not None:
            base = backend.alloc_area(space, seg_bytes)
        else:
            base = space.vm_alloc(seg_bytes)
        seg = ColumnSegment(space, base, capacity)
        table.columns[col_name] = Column(name, col_name, dtype, seg, capacity)
        table.column_order.append(col_name)
    return table


def bulk_append(table: Table, rows: Sequence[Sequence]) -> None:
    """Append unversioned rows (timestamp 0, no chains)."""
    if not rows:
        return
    start = table.row_count
    if start + len(rows) > table.capacity:
        raise CapacityError(
            f"append of {len(rows)} rows exceeds capacity {table.capacity}")
    for ci, col_name in enumerate(table.column_order):
        col = table.columns[col_name]
        buf = bytearray()
        for r in rows:
            v = r[ci]
            if col.dtype == DICT and isinstance(v, str):
                v = col.dictionary.encode(v)
            buf += encode_cell(col.dtype, v)
        col.segment.space.vm_write(col.segment.base + start * CELL, bytes(buf))
        col.row_count = start + len(rows)
        col.version += 1


def bulk_append_arrays(table: Table, arrays: dict[str, np.ndarray]) -> None:
    """Append column arrays in one shot (dict columns take code arrays)."""
    n = len(next(iter(arrays.values())))
    start = table.row_count
    if start + n > table.capacity:
        raise CapacityError(f"append of {n} rows exceeds capacity {table.capacity}")
    for col_name in table.column_order:
        col = table.columns[col_name]
        arr = np.ascontiguousarray(arrays[col_name], dtype=_np_dtype(col.dtype))
        col.segment.space.vm_write(col.segment.base + start * CELL, arr.tobytes())
        col.row_count = start + n
        col.version += 1


def install_committed_write(column: Column, row: int, new_value, commit_ts: int,
                            chain_store: ChainStore):
    """Materialize one committed write: displaced value goes to the chain,
    the cell is overwritten in place. Caller holds the commit critical
    section. Returns the displaced value.
    """
    old_ts = int(column.ts[row])
    if commit_ts <= old_ts:
        raise OrderingError(
            f"commit ts {commit_ts} not newer than row ts {old_ts}")
    old_raw = column.segment.read_cell_raw(row)
    old_value = decode_cell(column.dtype, old_raw)
    # order: chain, marker, timestamp, cell (see module docstring)
    chain_store.push((column.table_name, column.name, row), old_value, old_ts)
    column.markers.note(row)
    column.ts[row] = commit_ts
    column.segment.write_cell_raw(row, encode_cell(column.dtype, new_value))
    column.version += 1
    return old_value


StoreArg = Union[ChainStore, Sequence[ChainStore]]


def _stores(chain_stores: StoreArg) -> Sequence[ChainStore]:
    if isinstance(chain_stores, ChainStore):
        return (chain_stores,)
    return chain_stores


def chain_visible(key: tuple, begin_ts: int,
                  chain_stores: StoreArg) -> tuple[object, int]:
    """(value, ts) of the newest chained version of (table, column, row)
    with ts <= begin_ts; the stores are searched newest to oldest."""
    for store in _stores(chain_stores):
        node = store.head(key)
        while node is not None:
            if node.ts <= begin_ts:
                return node.value, node.ts
            node = node.next
    raise AssertionError(
        f"no visible version for {key} at ts {begin_ts}; chain store reaped too early")


def visible_version(column: Column, row: int, begin_ts: int,
                    chain_stores: StoreArg) -> tuple[object, int]:
    """(value, ts) of the newest version with ts <= begin_ts."""
    t1 = int(column.ts[row])
    if t1 <= begin_ts:
        raw = column.segment.read_cell_raw(row)
        t2 = int(column.ts[row])
        if t1 == t2:
            return decode_cell(column.dtype, raw), t1
    return chain_visible((column.table_name, column.name, row), begin_ts, chain_stores)


def read_visible(column: Column, row: int, begin_ts: int, chain_stores: StoreArg):
    """Value of the newest version with ts <= begin_ts (chains walked if needed)."""
    return visible_version(column, row, begin_ts, chain_stores)[0]


def snapshot_column(column: Column, backend: SnapshotBackend) -> FrozenColumn:
    """Freeze the column's current segment and switch writes to a fresh view.

    The returned frozen side keeps the original segment; the column continues
    on the newly created view (both share physical pages until written, for
    the virtual strategies). The caller hands over chains and seals the epoch.
    """
    seg = column.segment
    page = seg.space.page_size
    seg_bytes = (seg.nbytes + page - 1) // page * page
    view, cost = backend.create_view(seg.space, seg.base, seg_bytes)
    frozen = FrozenColumn(seg.space, seg.base, column.row_count, column.capacity,
                          column.table_name, column.name, column.dtype,
                          column.ts.copy(), column.dictionary, cost)
    column.segment = ColumnSegment(seg.space, view, seg.capacity)
    column.version += 1
    return frozen


# --- CSV import/export --------------------------------------------------------


def load_csv(space: AddressSpace, name: str, schema: Sequence[tuple[str, str]],
             path: str, capacity: Optional[int] = None,
             backend: Optional[SnapshotBackend] = None) -> Table:
    """Load a table from CSV; the header row must name the schema columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = [c for c, _ in schema]
        if header != names:
            raise ValueError(f"CSV header {header} does not match schema {names}")
        raw_rows = list(reader)
    table = create_table(space, name, schema, capacity or max(len(raw_rows), 1), backend)
    dtypes = dict(schema)
    rows = []
    for raw in raw_rows:
        row = []
        for (col_name, _), cell in zip(schema, raw):
            dt = dtypes[col_name]
            if dt == FLOAT64:
                row.append(float(cell))
            elif dt == DICT:
                row.append(cell)
            else:
                row.append(int(cell))
        rows.append(row)
    bulk_append(table, rows)
    return table


def export_csv(table: Table, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.column_order)
        arrays = {}
        for name in table.column_order:
            col = table.columns[name]
            arrays[name] = col.as_array()
        for i in range(table.row_count):
            row = []
            for name in table.column_order:
                col = table.columns[name]
                v = arrays[name][i]
                if col.dtype == DICT:
                    row.append(col.dictionary.decode(int(v)))
                elif col.dtype == FLOAT64:
                    row.append(repr(float(v)))
                else:
                    row.append(int(v))
            writer.writerow(row)
