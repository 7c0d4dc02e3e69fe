"""OLAP plan execution: tight-loop scans on snapshot epochs, versioned scans
with first/last-versioned-row markers on the homogeneous store, filtered and
grouped aggregation, and one two-table join.

Heterogeneous OLAP plans read sealed epoch arrays directly; no timestamp is
inspected and no chain is walked. On the versioned store the needed columns
are first resolved to the transaction's begin timestamp (rows committed later
are looked up in the chains), then the same kernels run on the resolved
arrays. Aggregates accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels, storage
from .storage import MARKER_BLOCK, Column

FULL_SCAN_SUM = "full_scan_sum"
Q1_GROUP = "q1_group"
Q4_PRIORITY_COUNT = "q4_priority_count"
Q6_REVENUE = "q6_revenue"
Q17_SMALL_QTY = "q17_small_qty"

PLAN_KINDS = (FULL_SCAN_SUM, Q1_GROUP, Q4_PRIORITY_COUNT, Q6_REVENUE, Q17_SMALL_QTY)


class RoutingError(Exception):
    """Plan ran against a placement it must not use (e.g. cold epoch column)."""


@dataclass
class Predicate:
    """A recorded filter: a numeric/date interval or a dictionary code set."""

    column: str
    lo: float = -math.inf
    hi: float = math.inf
    codes: Optional[frozenset] = None

    def as_tuple(self) -> tuple:
        if self.codes is not None:
            return ("codes", self.codes)
        return ("interval", self.lo, self.hi)


@dataclass
class QueryPlan:
    kind: str
    table: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")

    def to_text(self) -> str:
        parts = [self.kind, f"table={self.table}"]
        for k in sorted(self.params):
            parts.append(f"{k}={self.params[k]}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "QueryPlan":
        tokens = text.split()
        kind = tokens[0]
        table = ""
        params: dict = {}
        for tok in tokens[1:]:
            k, _, v = tok.partition("=")
            if k == "table":
                table = v
            else:
                params[k] = _parse_value(v)
        return cls(kind, table, params)


def _parse_value(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


# --- column resolution -------------------------------------------------------


def materialize_visible(engine, ctx, table: str, column: str) -> np.ndarray:
    """Cells of a versioned column resolved to the transaction's begin
    timestamp; rows committed later are replaced from the chains."""
    col = engine.tables[table].columns[column]
    n = col.row_count
    vals = col.as_array()
    ts_after = col.ts[:n].copy()  # copied after the cells: see storage docstring
    stale = np.nonzero(ts_after > ctx.begin_ts)[0]
    if stale.shape[0]:
        vals = vals.copy()
        stores = engine.chain_store_list()
        for row in stale:
            value, _ = storage.chain_visible(
                (table, column, int(row)), ctx.begin_ts, stores)
            vals[row] = value
        probe = ("chain_traversals_olap" if ctx.kind == "olap"
                 else "chain_traversals_oltp")
        engine.probes.add(probe, int(stale.shape[0]))
    return vals


def _plan_arrays(engine, ctx, table: str, columns: Sequence[str]):
    """(arrays by column, dictionaries by column) for the ctx's placement."""
    t = engine.tables[table]
    if ctx.kind == "olap" and ctx.epoch is not None:
        frozen = engine.registry.acquire(ctx, table, columns)
        arrays = {name: fz.values() for name, fz in zip(columns, frozen)}
        dicts = {name: fz.dictionary for name, fz in zip(columns, frozen)}
    else:
        arrays = {name: materialize_visible(engine, ctx, table, name)
                  for name in columns}
        dicts = {name: t.columns[name].dictionary for name in columns}
    return arrays, dicts


# --- the scan shapes ------------------------------------------------------------


def scan_sum_epoch(engine, ctx, table: str, column: str) -> float:
    """Sum a materialized epoch column in place; no visibility checks at all."""
    if ctx.epoch is None:
        raise RoutingError("epoch scan outside an epoch-pinned transaction")
    frozen = ctx.epoch.frozen.get((table, column))
    if frozen is None:
        raise RoutingError(f"column {table}.{column} not materialized; acquire first")
    vals = frozen.values()
    if vals.dtype == np.float64:
        return float(kernels.sum_f64(vals))
    return int(kernels.sum_i64(vals))


def scan_sum_versioned(engine, table: str, column: str, begin_ts: int,
                       kind: str = "olap") -> float:
    """Versioned full-column sum: tight loops outside each block's
    [first, last] versioned span, per-row visibility checks inside it."""
    col = engine.tables[table].columns[column]
    n = col.row_count
    vals = np.asarray(col.as_array(), dtype=np.float64)
    total = 0.0
    checks = 0
    nblocks = (n + MARKER_BLOCK - 1) // MARKER_BLOCK
    for blk in range(nblocks):
        bs = blk * MARKER_BLOCK
        be = min(bs + MARKER_BLOCK, n)
        first, last = col.markers.span(blk)
        if first < 0 or first >= be:
            total += kernels.block_sum_outside_span(vals, bs, be, be, be - 1)
            continue
        last = min(last, be - 1)
        total += kernels.block_sum_outside_span(vals, bs, be, first, last)
        for row in range(first, last + 1):
            total += engine._visible(col, row, begin_ts, kind)
            checks += 1
    engine.probes.add("visibility_checks_scan", checks)
    return total


def expected_scan_checks(col: Column) -> int:
    """Analytic visibility-check count for one versioned scan of the column."""
    n = col.row_count
    out = 0
    for blk in range((n + MARKER_BLOCK - 1) // MARKER_BLOCK):
        first, last = col.markers.span(blk)
        if first >= 0:
            out += min(last, n - 1) - first + 1
    return out


def filter_rows(engine, ctx, table: str, column: str, lo, hi) -> list[tuple[int, object]]:
    """Rows whose visible value lies in [lo, hi]; recorded as a predicate
    (not as per-row reads) for serializability validation."""
    engine.record_predicate(ctx, table, column, ("interval", lo, hi))
    col = engine.tables[table].columns[column]
    out = []
    for row in range(col.row_count):
        pending = ctx.write_set.get(((table, column), row))
        v = (pending if pending is not None
             else engine._visible(col, row, ctx.begin_ts, ctx.kind))
        if lo <= v <= hi:
            out.append((row, v))
    return out


# --- plan execution -----------------------------------------------------------


def _needed_columns(plan: QueryPlan, engine) -> list[str]:
    t = engine.tables[plan.table]
    if plan.kind == FULL_SCAN_SUM:
        return [c for c in t.column_order if t.columns[c].dtype != storage.DICT]
    if plan.kind == Q6_REVENUE:
        return ["l_extendedprice", "l_discount", "l_shipdate", "l_quantity"]
    if plan.kind == Q1_GROUP:
        return ["l_returnflag", "l_linestatus", "l_quantity", "l_extendedprice",
                "l_discount", "l_shipdate"]
    if plan.kind == Q4_PRIORITY_COUNT:
        return ["o_orderpriority", "o_orderdate"]
    if plan.kind == Q17_SMALL_QTY:
        return ["l_partkey", "l_quantity", "l_extendedprice"]
    raise ValueError(plan.kind)


def run_plan(engine, ctx, plan: QueryPlan) -> list[tuple]:
    """Execute one plan in the given transaction; deterministic row order."""
    if plan.kind == FULL_SCAN_SUM:
        return _run_full_scan(engine, ctx, plan)
    if plan.kind == Q6_REVENUE:
        return _run_q6(engine, ctx, plan)
    if plan.kind == Q1_GROUP:
        return _run_q1(engine, ctx, plan)
    if plan.kind == Q4_PRIORITY_COUNT:
        return _run_q4(engine, ctx, plan)
    if plan.kind == Q17_SMALL_QTY:
        return _run_q17(engine, ctx, plan)
    raise ValueError(plan.kind)


def _register_interval(engine, ctx, table, column, lo=-math.inf, hi=math.inf):
    engine.record_predicate(ctx, table, column, ("interval", lo, hi))


def _run_full_scan(engine, ctx, plan):
    columns = _needed_columns(plan, engine)
    arrays, _ = _plan_arrays(engine, ctx, plan.table, columns)
    out = []
    for name in columns:
        _register_interval(engine, ctx, plan.table, name)
        vals = arrays[name]
        if vals.dtype == np.float64:
            out.append((name, float(kernels.sum_f64(vals))))
        else:
            out.append((name, int(kernels.sum_i64(vals))))
    return out


def _run_q6(engine, ctx, plan):
    p = plan.params
    columns = _needed_columns(plan, engine)
    arrays, _ = _plan_arrays(engine, ctx, plan.table, columns)
    _register_interval(engine, ctx, plan.table, "l_shipdate",
                       p["date_lo"], p["date_hi"] - 1)
    _register_interval(engine, ctx, plan.table, "l_discount",
                       p["disc_lo"], p["disc_hi"])
    _register_interval(engine, ctx, plan.table, "l_quantity",
                       -math.inf, p["qty_lt"])
    _register_interval(engine, ctx, plan.table, "l_extendedprice")
    revenue = kernels.filter_revenue(
        np.asarray(arrays["l_extendedprice"], dtype=np.float64),
        np.asarray(arrays["l_discount"], dtype=np.float64),
        np.asarray(arrays["l_shipdate"], dtype=np.int64),
        np.asarray(arrays["l_quantity"], dtype=np.float64),
        np.int64(p["date_lo"]), np.int64(p["date_hi"]),
        float(p["disc_lo"]), float(p["disc_hi"]), float(p["qty_lt"]))
    return [(float(revenue),)]


def _run_q1(engine, ctx, plan):
    p = plan.params
    columns = _needed_columns(plan, engine)
    arrays, dicts = _plan_arrays(engine, ctx, plan.table, columns)
    for name in columns:
        if name == "l_shipdate":
            _register_interval(engine, ctx, plan.table, name, -math.inf, p["date_hi"])
        else:
            _register_interval(engine, ctx, plan.table, name)
    flag_dict = dicts["l_returnflag"]
    status_dict = dicts["l_linestatus"]
    n_flag, n_status = len(flag_dict), len(status_dict)
    counts, sum_qty, sum_price, sum_disc = kernels.group_agg(
        np.asarray(arrays["l_returnflag"], dtype=np.int64),
        np.asarray(arrays["l_linestatus"], dtype=np.int64),
        np.asarray(arrays["l_quantity"], dtype=np.float64),
        np.asarray(arrays["l_extendedprice"], dtype=np.float64),
        np.asarray(arrays["l_discount"], dtype=np.float64),
        np.asarray(arrays["l_shipdate"], dtype=np.int64),
        np.int64(p["date_hi"]), n_flag, n_status)
    rows = []
    for g in range(n_flag * n_status):
        if counts[g] == 0:
            continue
        rows.append((flag_dict.decode(g // n_status), status_dict.decode(g % n_status),
                     float(sum_qty[g]), float(sum_price[g]), float(sum_disc[g]),
                     int(counts[g])))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def _run_q4(engine, ctx, plan):
    p = plan.params
    columns = _needed_columns(plan, engine)
    arrays, dicts = _plan_arrays(engine, ctx, plan.table, columns)
    _register_interval(engine, ctx, plan.table, "o_orderdate",
                       p["date_lo"], p["date_hi"] - 1)
    _register_interval(engine, ctx, plan.table, "o_orderpriority")
    prio_dict = dicts["o_orderpriority"]
    counts = kernels.count_groups_in_range(
        np.asarray(arrays["o_orderpriority"], dtype=np.int64),
        np.asarray(arrays["o_orderdate"], dtype=np.int64),
        np.int64(p["date_lo"]), np.int64(p["date_hi"]), len(prio_dict))
    rows = [(prio_dict.decode(g), int(counts[g]))
            for g in range(len(prio_dict)) if counts[g] > 0]
    rows.sort(key=lambda r: r[0])
    return rows


def _run_q17(engine, ctx, plan):
    p = plan.params
    part_table = plan.params.get("part_table", "part")
    l_arrays, _ = _plan_arrays(engine, ctx, plan.table,
                               ["l_partkey", "l_quantity", "l_extendedprice"])
    p_arrays, p_dicts = _plan_arrays(engine, ctx, part_table,
                                     ["p_partkey", "p_brand"])
    brand_dict = p_dicts["p_brand"]
    code = brand_dict.index.get(p["brand"], -1)
    partkey = np.asarray(l_arrays["l_partkey"], dtype=np.int64)
    quantity = np.asarray(l_arrays["l_quantity"], dtype=np.float64)
    price = np.asarray(l_arrays["l_extendedprice"], dtype=np.float64)
    p_key = np.asarray(p_arrays["p_partkey"], dtype=np.int64)
    p_brand = np.asarray(p_arrays["p_brand"], dtype=np.int64)
    engine.record_predicate(ctx, part_table, "p_brand", ("codes", {code}))
    for name in ("l_partkey", "l_quantity", "l_extendedprice"):
        _register_interval(engine, ctx, plan.table, name)
    nkeys = int(p_key.max()) + 1 if p_key.size else 1
    # build side: per-part 0.2 * average quantity, restricted to the brand
    counts = np.bincount(partkey, minlength=nkeys)
    sums = np.bincount(partkey, weights=quantity, minlength=nkeys)
    with np.errstate(invalid="ignore", divide="ignore"):
        thr = np.where(counts > 0, 0.2 * sums / np.maximum(counts, 1), -1.0)
    brand_ok = np.zeros(nkeys, dtype=bool)
    brand_ok[p_key[p_brand == code]] = True
    thr = np.where(brand_ok, thr, -1.0)
    revenue = kernels.join_small_qty_revenue(partkey, quantity, price, thr)
    return [(float(revenue),)]
