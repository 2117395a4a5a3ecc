"""Compiled twins of the numpy kernels.

Same algorithms as `numpy_impl`, written as explicit loops for numba.  No
fastmath: reassociation would let results drift from the reference backend,
and byte-identical reruns matter more here than the last few percent.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def render_density(grid_h: int, grid_w: int, rows: np.ndarray, cols: np.ndarray, sigma: float) -> np.ndarray:
    density = np.zeros((grid_h, grid_w), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for p in range(rows.shape[0]):
        r0 = rows[p]
        c0 = cols[p]
        r_lo = max(int(np.ceil(r0 - 3.0 * sigma)), 0)
        r_hi = min(int(np.floor(r0 + 3.0 * sigma)), grid_h - 1)
        c_lo = max(int(np.ceil(c0 - 3.0 * sigma)), 0)
        c_hi = min(int(np.floor(c0 + 3.0 * sigma)), grid_w - 1)
        if r_lo > r_hi or c_lo > c_hi:
            continue
        total = 0.0
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                dr = r - r0
                dc = c - c0
                total += np.exp(-(dr * dr + dc * dc) * inv)
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                dr = r - r0
                dc = c - c0
                density[r, c] += np.exp(-(dr * dr + dc * dc) * inv) / total
    return density


@numba.njit(cache=True)
def solve_assignment(cost: np.ndarray) -> np.ndarray:
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    scanned_rows = np.empty(nr, dtype=np.int64)
    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        prev_row = np.full(nc, -1, dtype=np.int64)
        scanned_cols = np.zeros(nc, dtype=np.bool_)
        n_scanned = 0
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink == -1:
            scanned_rows[n_scanned] = i
            n_scanned += 1
            lowest = np.inf
            j_min = -1
            for j in range(nc):
                if scanned_cols[j]:
                    continue
                cand = min_val + cost[i, j] - u[i] - v[j]
                if cand < shortest[j]:
                    shortest[j] = cand
                    prev_row[j] = i
                if shortest[j] < lowest:
                    lowest = shortest[j]
                    j_min = j
            j = j_min
            min_val = lowest
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
        u[cur_row] += min_val
        for s in range(n_scanned):
            r = scanned_rows[s]
            if r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        for j in range(nc):
            if scanned_cols[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = prev_row[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur_row:
                break
    return col4row
