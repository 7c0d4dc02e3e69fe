"""Hot scan/aggregation kernels: numba-compiled with a pure-numpy fallback.

The numba path is used by default; set SNAPDB_DISABLE_NUMBA=1 (or run without
numba installed) to select the numpy implementations. Both paths compute
identical results; `snapdb microbench kernels` compares their speed. The jit
kernels release the GIL so scans can overlap transaction processing threads.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("SNAPDB_DISABLE_NUMBA", "0") != "1"
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

_JIT = dict(cache=True, nogil=True)


# --- numpy implementations ----------------------------------------------------

def _np_sum_f64(values):
    return float(np.sum(values))


def _np_sum_i64(values):
    return int(np.sum(values))


def _np_first_match(codes, start, code):
    n = codes.shape[0]
    hits = np.nonzero(codes == code)[0]
    if hits.shape[0] == 0:
        return -1
    after = hits[hits >= start]
    return int(after[0]) if after.shape[0] else int(hits[0])


def _np_filter_revenue(price, discount, shipdate, quantity,
                       date_lo, date_hi, disc_lo, disc_hi, qty_lt):
    mask = ((shipdate >= date_lo) & (shipdate < date_hi)
            & (discount >= disc_lo) & (discount <= disc_hi)
            & (quantity < qty_lt))
    return float(np.sum(price[mask] * discount[mask]))


def _np_group_agg(flag_codes, status_codes, quantity, price, discount,
                  shipdate, date_hi, n_flag, n_status):
    mask = shipdate <= date_hi
    group = flag_codes[mask] * n_status + status_codes[mask]
    size = n_flag * n_status
    counts = np.bincount(group, minlength=size).astype(np.int64)
    sum_qty = np.bincount(group, weights=quantity[mask], minlength=size)
    sum_price = np.bincount(group, weights=price[mask], minlength=size)
    disc_price = price[mask] * (1.0 - discount[mask])
    sum_disc = np.bincount(group, weights=disc_price, minlength=size)
    return counts, sum_qty, sum_price, sum_disc


def _np_count_groups_in_range(codes, dates, date_lo, date_hi, n_groups):
    mask = (dates >= date_lo) & (dates < date_hi)
    return np.bincount(codes[mask], minlength=n_groups).astype(np.int64)


def _np_join_small_qty_revenue(l_partkey, l_quantity, l_price,
                               qty_threshold_by_part):
    thr = qty_threshold_by_part[l_partkey]
    mask = (thr >= 0.0) & (l_quantity < thr)
    return float(np.sum(l_price[mask]))


def _np_block_sum_outside_span(values, block_start, block_end, first, last):
    s = 0.0
    if first > block_start:
        s += float(np.sum(values[block_start:first]))
    if last + 1 < block_end:
        s += float(np.sum(values[last + 1:block_end]))
    return s


# --- numba implementations -------------------------------------------------

if USE_NUMBA:

    @njit(**_JIT)
    def _nb_sum_f64(values):
        s = 0.0
        for i in range(values.shape[0]):
            s += values[i]
        return s

    @njit(**_JIT)
    def _nb_sum_i64(values):
        s = 0
        for i in range(values.shape[0]):
            s += values[i]
        return s

    @njit(**_JIT)
    def _nb_first_match(codes, start, code):
        n = codes.shape[0]
        for i in range(start, n):
            if codes[i] == code:
                return i
        for i in range(start):
            if codes[i] == code:
                return i
        return -1

    @njit(**_JIT)
    def _nb_filter_revenue(price, discount, shipdate, quantity,
                           date_lo, date_hi, disc_lo, disc_hi, qty_lt):
        s = 0.0
        for i in range(price.shape[0]):
            if (date_lo <= shipdate[i] < date_hi
                    and disc_lo <= discount[i] <= disc_hi
                    and quantity[i] < qty_lt):
                s += price[i] * discount[i]
        return s

    @njit(**_JIT)
    def _nb_group_agg(flag_codes, status_codes, quantity, price, discount,
                      shipdate, date_hi, n_flag, n_status):
        size = n_flag * n_status
        counts = np.zeros(size, dtype=np.int64)
        sum_qty = np.zeros(size, dtype=np.float64)
        sum_price = np.zeros(size, dtype=np.float64)
        sum_disc = np.zeros(size, dtype=np.float64)
        for i in range(flag_codes.shape[0]):
            if shipdate[i] <= date_hi:
                g = flag_codes[i] * n_status + status_codes[i]
                counts[g] += 1
                sum_qty[g] += quantity[i]
                sum_price[g] += price[i]
                sum_disc[g] += price[i] * (1.0 - discount[i])
        return counts, sum_qty, sum_price, sum_disc

    @njit(**_JIT)
    def _nb_count_groups_in_range(codes, dates, date_lo, date_hi, n_groups):
        out = np.zeros(n_groups, dtype=np.int64)
        for i in range(codes.shape[0]):
            if date_lo <= dates[i] < date_hi:
                out[codes[i]] += 1
        return out

    @njit(**_JIT)
    def _nb_join_small_qty_revenue(l_partkey, l_quantity, l_price,
                                   qty_threshold_by_part):
        s = 0.0
        for i in range(l_partkey.shape[0]):
            thr = qty_threshold_by_part[l_partkey[i]]
            if thr >= 0.0 and l_quantity[i] < thr:
                s += l_price[i]
        return s

    @njit(**_JIT)
    def _nb_block_sum_outside_span(values, block_start, block_end, first, last):
        s = 0.0
        for i in range(block_start, first):
            s += values[i]
        for i in range(last + 1, block_end):
            s += values[i]
        return s


# --- public dispatch --------------------------------------------------------

if USE_NUMBA:
    sum_f64 = _nb_sum_f64
    sum_i64 = _nb_sum_i64
    first_match = _nb_first_match
    filter_revenue = _nb_filter_revenue
    group_agg = _nb_group_agg
    count_groups_in_range = _nb_count_groups_in_range
    join_small_qty_revenue = _nb_join_small_qty_revenue
    block_sum_outside_span = _nb_block_sum_outside_span
else:
    sum_f64 = _np_sum_f64
    sum_i64 = _np_sum_i64
    first_match = _np_first_match
    filter_revenue = _np_filter_revenue
    group_agg = _np_group_agg
    count_groups_in_range = _np_count_groups_in_range
    join_small_qty_revenue = _np_join_small_qty_revenue
    block_sum_outside_span = _np_block_sum_outside_span

NUMPY_IMPLS = {
    "sum_f64": _np_sum_f64,
    "sum_i64": _np_sum_i64,
    "first_match": _np_first_match,
    "filter_revenue": _np_filter_revenue,
    "group_agg": _np_group_agg,
    "count_groups_in_range": _np_count_groups_in_range,
    "join_small_qty_revenue": _np_join_small_qty_revenue,
    "block_sum_outside_span": _np_block_sum_outside_span,
}


def warm_up() -> None:
    """Force-compile every jit kernel (no-op on the numpy path)."""
    f = np.zeros(4, dtype=np.float64)
    i = np.zeros(4, dtype=np.int64)
    sum_f64(f)
    sum_i64(i)
    first_match(i, 0, np.int64(1))
    filter_revenue(f, f, i, f, 0, 1, 0.0, 1.0, 1.0)
    group_agg(i, i, f, f, f, i, np.int64(1), 2, 2)
    count_groups_in_range(i, i, np.int64(0), np.int64(1), 2)
    join_small_qty_revenue(i, f, f, np.zeros(2, dtype=np.float64))
    block_sum_outside_span(f, 0, 4, 1, 2)
