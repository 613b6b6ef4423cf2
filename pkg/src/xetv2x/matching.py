"""Minimum-cost bipartite matching (shortest augmenting path with potentials)."""
from __future__ import annotations

import numpy as np

from .numerics import NumericError


def _solve_rows_le_cols(c: np.ndarray) -> np.ndarray:
    """Assignment for an n x m matrix with n <= m; returns the column of each row.

    Rows are inserted in index order and ties on the reduced cost resolve
    to the lowest column index, so the result is deterministic.
    """
    n, m = c.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    cost = np.zeros((n + 1, m + 1))
    cost[1:, 1:] = c
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Min-cost maximum matching of a rectangular cost matrix.

    Returns (row, col) pairs sorted by row; min(n_rows, n_cols) pairs.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise NumericError("non-finite cost")
    if c.shape[0] <= c.shape[1]:
        cols = _solve_rows_le_cols(c)
        pairs = [(i, int(j)) for i, j in enumerate(cols)]
    else:
        rows = _solve_rows_le_cols(c.T)
        pairs = sorted((int(i), j) for j, i in enumerate(rows))
    return pairs


def gated_match(dist: np.ndarray, max_dist: float) -> list[tuple[int, int]]:
    """Max-cardinality, then min-cost, matching restricted to dist <= max_dist."""
    d = np.asarray(dist, dtype=np.float64)
    if d.size == 0:
        return []
    ok = d <= max_dist
    if not ok.any():
        return []
    big = 1.0 + float(d[ok].sum()) * 2.0 + max_dist * min(d.shape)
    c = np.where(ok, d, big)
    return [(i, j) for i, j in hungarian_match(c) if ok[i, j]]
