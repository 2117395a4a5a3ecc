"""Pure-numpy implementations of the hot kernels.

These are the reference versions: vectorized where numpy allows it, with the
same arithmetic as the compiled twins in `numba_impl` so either backend gives
identical results.
"""

from __future__ import annotations

import math

import numpy as np


def render_density(grid_h: int, grid_w: int, rows: np.ndarray, cols: np.ndarray, sigma: float) -> np.ndarray:
    """Sum of per-point Gaussian kernels, each renormalized to unit mass.

    Kernels use a square window truncated at 3 sigma per axis, clipped to the
    grid; whatever survives clipping is rescaled so every point contributes
    exactly one unit of mass regardless of boundary effects.

    The patch is built with scalar `math.exp` and summed in row-major order.
    numpy's vectorized exp and pairwise summation round differently from the
    libm calls the compiled twin makes, and keeping the scalar path here is
    what lets both backends emit bit-identical maps.
    """
    density = np.zeros((grid_h, grid_w), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for r0, c0 in zip(rows, cols):
        r_lo = max(int(math.ceil(r0 - 3.0 * sigma)), 0)
        r_hi = min(int(math.floor(r0 + 3.0 * sigma)), grid_h - 1)
        c_lo = max(int(math.ceil(c0 - 3.0 * sigma)), 0)
        c_hi = min(int(math.floor(c0 + 3.0 * sigma)), grid_w - 1)
        if r_lo > r_hi or c_lo > c_hi:
            continue
        patch = np.array(
            [
                [
                    math.exp(-((r - r0) * (r - r0) + (c - c0) * (c - c0)) * inv)
                    for c in range(c_lo, c_hi + 1)
                ]
                for r in range(r_lo, r_hi + 1)
            ]
        )
        total = 0.0
        for row in patch:
            for val in row:
                total += val
        density[r_lo : r_hi + 1, c_lo : c_hi + 1] += patch / total
    return density


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting path algorithm with dual potentials.  Requires
    rows <= cols and finite costs; returns col index per row.  Ties are
    resolved toward lower column indices, so the result is deterministic.
    """
    nr, nc = cost.shape
    if nr > nc:
        raise ValueError(f"solve_assignment: needs rows <= cols, got {cost.shape}")
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        prev_row = np.full(nc, -1, dtype=np.int64)
        scanned_cols = np.zeros(nc, dtype=bool)
        scanned_rows: list[int] = []
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink == -1:
            scanned_rows.append(i)
            cand = min_val + cost[i] - u[i] - v
            better = ~scanned_cols & (cand < shortest)
            shortest[better] = cand[better]
            prev_row[better] = i
            masked = np.where(scanned_cols, np.inf, shortest)
            j = int(np.argmin(masked))
            min_val = masked[j]
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
        u[cur_row] += min_val
        for r in scanned_rows:
            if r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]
        j = sink
        while True:
            i = int(prev_row[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row
