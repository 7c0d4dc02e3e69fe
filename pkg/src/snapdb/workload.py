"""Deterministic workload: scaled LINEITEM/ORDERS/PART generation plus the
transaction mix — nine small parameterized OLTP templates and seven OLAP
templates (grouped/filtered aggregation, a priority count, a two-table join,
and one full scan per table).

Row counts follow the TPC-H table ratios (LINEITEM : ORDERS : PART =
30 : 7.5 : 1 at 6M/1.5M/200k rows for scale factor 1). Values are drawn
uniformly over TPC-H-like domains. The same (scale factor, seed) always
produces byte-identical tables, and the same stream seed always produces the
same transaction scripts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from typing import Optional

import numpy as np

from . import kernels
from .query import QueryPlan
from .txn import Engine, OLTP, TransactionAborted

RETURN_FLAGS = ["A", "N", "R"]
LINE_STATUSES = ["O", "F"]
PRIORITIES = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"]
BRANDS = [f"Brand#{i}{j}" for i in range(1, 6) for j in range(1, 6)]

D_1992_01_01 = date(1992, 1, 1).toordinal()
D_1998_08_02 = date(1998, 8, 2).toordinal()
D_1998_12_01 = date(1998, 12, 1).toordinal()

LINEITEM_SCHEMA = [
    ("l_orderkey", "int64"), ("l_partkey", "int64"), ("l_quantity", "float64"),
    ("l_extendedprice", "float64"), ("l_discount", "float64"),
    ("l_returnflag", "dict32"), ("l_linestatus", "dict32"), ("l_shipdate", "date"),
]
ORDERS_SCHEMA = [
    ("o_orderkey", "int64"), ("o_orderdate", "date"),
    ("o_orderpriority", "dict32"), ("o_totalprice", "float64"),
]
PART_SCHEMA = [
    ("p_partkey", "int64"), ("p_brand", "dict32"), ("p_retailprice", "float64"),
]

DICT_DOMAINS = {
    "l_returnflag": RETURN_FLAGS,
    "l_linestatus": LINE_STATUSES,
    "o_orderpriority": PRIORITIES,
    "p_brand": BRANDS,
}


@dataclass
class GenConfig:
    sf: float = 0.01
    seed: int = 0

    @property
    def lineitem_rows(self) -> int:
        return max(int(60_000 * self.sf * 100), 1)

    @property
    def orders_rows(self) -> int:
        return max(int(15_000 * self.sf * 100), 1)

    @property
    def part_rows(self) -> int:
        return max(int(2_000 * self.sf * 100), 1)


@dataclass
class Dataset:
    config: GenConfig
    arrays: dict  # table -> {column -> np.ndarray}

    def rows(self, table: str) -> int:
        return len(next(iter(self.arrays[table].values())))

    def install(self, engine: Engine) -> None:
        from .storage import bulk_append_arrays

        for name, schema in (("lineitem", LINEITEM_SCHEMA),
                             ("orders", ORDERS_SCHEMA), ("part", PART_SCHEMA)):
            arrays = self.arrays[name]
            n = len(next(iter(arrays.values())))
            table = engine.create_table(name, schema, n)
            for col_name, domain in DICT_DOMAINS.items():
                if col_name in table.columns:
                    for v in domain:
                        table.columns[col_name].dictionary.encode(v)
            bulk_append_arrays(table, arrays)


def generate(config: GenConfig) -> Dataset:
    """Generate the three tables; same (sf, seed) gives identical bytes."""
    if config.sf <= 0:
        raise ValueError("scale factor must be positive")
    rng = np.random.default_rng(config.seed)
    nl, no, npart = config.lineitem_rows, config.orders_rows, config.part_rows

    lineitem = {
        "l_orderkey": rng.integers(1, no + 1, nl),
        "l_partkey": rng.integers(1, npart + 1, nl),
        "l_quantity": rng.integers(1, 51, nl).astype(np.float64),
        "l_extendedprice": np.round(rng.uniform(901.0, 104_950.0, nl), 2),
        "l_discount": np.round(rng.integers(0, 11, nl) / 100.0, 2),
        "l_returnflag": rng.integers(0, len(RETURN_FLAGS), nl),
        "l_linestatus": rng.integers(0, len(LINE_STATUSES), nl),
        "l_shipdate": rng.integers(D_1992_01_01, D_1998_12_01 + 1, nl),
    }
    orders = {
        "o_orderkey": np.arange(1, no + 1, dtype=np.int64),
        "o_orderdate": rng.integers(D_1992_01_01, D_1998_08_02 + 1, no),
        "o_orderpriority": rng.integers(0, len(PRIORITIES), no),
        "o_totalprice": np.round(rng.uniform(1_000.0, 500_000.0, no), 2),
    }
    part = {
        "p_partkey": np.arange(1, npart + 1, dtype=np.int64),
        "p_brand": rng.integers(0, len(BRANDS), npart),
        "p_retailprice": np.round(rng.uniform(900.0, 2_100.0, npart), 2),
    }
    return Dataset(config, {"lineitem": lineitem, "orders": orders, "part": part})


def dataset_checksum(ds: Dataset) -> str:
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    for table in sorted(ds.arrays):
        for col in sorted(ds.arrays[table]):
            h.update(col.encode())
            h.update(np.ascontiguousarray(ds.arrays[table][col]).tobytes())
    return h.hexdigest()


# --- OLTP scripts ---------------------------------------------------------------

# op vocabulary interpreted by execute_script:
#   ("read", table, column, row)
#   ("update_pct", table, column, row, factor)
#   ("update_days", table, column, row, delta)
#   ("find_update_pct", table, search_column, code, start_row, target, factor)
#   ("find_update_days", table, search_column, code, start_row, target, delta)


@dataclass
class OltpScript:
    template_id: int
    ops: list = field(default_factory=list)


N_OLTP_TEMPLATES = 9
N_OLAP_TEMPLATES = 7


class TxnMix:
    """Draws concrete transaction scripts/plans for one generated dataset."""

    def __init__(self, dataset: Dataset,
                 oltp_weights: Optional[list] = None,
                 olap_weights: Optional[list] = None):
        self.nl = dataset.rows("lineitem")
        self.no = dataset.rows("orders")
        self.npart = dataset.rows("part")
        self.oltp_weights = self._norm(oltp_weights, N_OLTP_TEMPLATES)
        self.olap_weights = self._norm(olap_weights, N_OLAP_TEMPLATES)

    @staticmethod
    def _norm(weights, n):
        if weights is None:
            weights = [1.0] * n
        if len(weights) != n:
            raise ValueError(f"expected {n} weights, got {len(weights)}")
        w = np.asarray(weights, dtype=np.float64)
        return w / w.sum()

    def _pct(self, rng) -> float:
        x = int(rng.integers(1, 11))
        sign = 1.0 if rng.integers(0, 2) else -1.0
        return 1.0 + sign * x / 100.0

    def _days(self, rng) -> int:
        x = int(rng.integers(1, 11))
        return x if rng.integers(0, 2) else -x

    def next_oltp(self, rng: np.random.Generator) -> OltpScript:
        tid = int(rng.choice(N_OLTP_TEMPLATES, p=self.oltp_weights)) + 1
        ops = []
        if tid == 1:    # point-update of a lineitem price
            ops.append(("update_pct", "lineitem", "l_extendedprice",
                        int(rng.integers(self.nl)), self._pct(rng)))
        elif tid == 2:  # first lineitem with a drawn return flag, bump discount
            ops.append(("find_update_pct", "lineitem", "l_returnflag",
                        int(rng.integers(len(RETURN_FLAGS))),
                        int(rng.integers(self.nl)), "l_discount", self._pct(rng)))
        elif tid == 3:  # first lineitem with a drawn line status, shift ship date
            ops.append(("find_update_days", "lineitem", "l_linestatus",
                        int(rng.integers(len(LINE_STATUSES))),
                        int(rng.integers(self.nl)), "l_shipdate", self._days(rng)))
        elif tid == 4:  # read two rows, update one discount
            r1, r2 = int(rng.integers(self.nl)), int(rng.integers(self.nl))
            ops.append(("read", "lineitem", "l_discount", r1))
            ops.append(("read", "lineitem", "l_discount", r2))
            ops.append(("update_pct", "lineitem", "l_discount",
                        r1 if rng.integers(0, 2) else r2, self._pct(rng)))
        elif tid == 5:  # point-update of an order total
            ops.append(("update_pct", "orders", "o_totalprice",
                        int(rng.integers(self.no)), self._pct(rng)))
        elif tid == 6:  # first order with a drawn priority, bump total
            ops.append(("find_update_pct", "orders", "o_orderpriority",
                        int(rng.integers(len(PRIORITIES))),
                        int(rng.integers(self.no)), "o_totalprice", self._pct(rng)))
        elif tid == 7:  # read-only point read of an order
            row = int(rng.integers(self.no))
            ops.append(("read", "orders", "o_totalprice", row))
            ops.append(("read", "orders", "o_orderdate", row))
        elif tid == 8:  # point-update of a part price
            ops.append(("update_pct", "part", "p_retailprice",
                        int(rng.integers(self.npart)), self._pct(rng)))
        else:           # first part of a drawn brand, bump price
            ops.append(("find_update_pct", "part", "p_brand",
                        int(rng.integers(len(BRANDS))),
                        int(rng.integers(self.npart)), "p_retailprice", self._pct(rng)))
        return OltpScript(tid, ops)

    def next_olap(self, rng: np.random.Generator) -> QueryPlan:
        tid = int(rng.choice(N_OLAP_TEMPLATES, p=self.olap_weights)) + 1
        if tid == 1:
            delta = int(rng.integers(60, 121))
            return QueryPlan("q1_group", "lineitem",
                             {"date_hi": D_1998_12_01 - delta})
        if tid == 2:
            year = int(rng.integers(1993, 1998))
            d = int(rng.integers(2, 10)) / 100.0
            qty = int(rng.integers(24, 26))
            return QueryPlan("q6_revenue", "lineitem", {
                "date_lo": date(year, 1, 1).toordinal(),
                "date_hi": date(year + 1, 1, 1).toordinal(),
                "disc_lo": round(d - 0.01, 2), "disc_hi": round(d + 0.01, 2),
                "qty_lt": float(qty)})
        if tid == 3:
            year = int(rng.integers(1993, 1998))
            month = int(rng.integers(1, 11))
            lo = date(year, month, 1).toordinal()
            m2, y2 = month + 3, year
            if m2 > 12:
                m2, y2 = m2 - 12, year + 1
            return QueryPlan("q4_priority_count", "orders",
                             {"date_lo": lo, "date_hi": date(y2, m2, 1).toordinal()})
        if tid == 4:
            return QueryPlan("q17_small_qty", "lineitem",
                             {"brand": BRANDS[int(rng.integers(len(BRANDS)))],
                              "part_table": "part"})
        table = ("lineitem", "orders", "part")[tid - 5]
        return QueryPlan("full_scan_sum", table)


def execute_script(engine: Engine, script: OltpScript) -> tuple[str, Optional[str]]:
    """Run one OLTP script as a transaction; ('committed'|'aborted', reason)."""
    ctx = engine.begin(OLTP)
    try:
        for op in script.ops:
            kind = op[0]
            if kind == "read":
                engine.read(ctx, op[1], op[2], op[3])
            elif kind == "update_pct":
                _, table, column, row, factor = op
                v = engine.read(ctx, table, column, row)
                engine.write(ctx, table, column, row, v * factor)
            elif kind == "update_days":
                _, table, column, row, delta = op
                v = engine.read(ctx, table, column, row)
                engine.write(ctx, table, column, row, int(v) + delta)
            elif kind in ("find_update_pct", "find_update_days"):
                _, table, search_col, code, start, target, arg = op
                row = _find_first(engine, ctx, table, search_col, code, start)
                if row < 0:
                    continue
                v = engine.read(ctx, table, target, row)
                if kind == "find_update_pct":
                    engine.write(ctx, table, target, row, v * arg)
                else:
                    engine.write(ctx, table, target, row, int(v) + arg)
            else:
                raise ValueError(f"unknown script op {kind!r}")
        engine.commit(ctx)
        return "committed", None
    except TransactionAborted as e:
        return "aborted", e.reason


def _find_first(engine: Engine, ctx, table: str, column: str, code: int,
                start: int) -> int:
    """First row at or after `start` (wrapping) whose dictionary code matches;
    the equality filter is recorded as a code-set predicate."""
    engine.record_predicate(ctx, table, column, ("codes", {code}))
    col = engine.tables[table].columns[column]
    return int(kernels.first_match(col.as_array(), start, np.int64(code)))
