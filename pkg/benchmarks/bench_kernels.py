"""Timing comparison of the numba kernels against the numpy fallbacks.

Run as `python benchmarks/bench_kernels.py`.  The first numba call pays the
JIT compile cost, so each kernel is warmed once before timing.  Sizes mirror
the production path: density maps over a full grid with tens of points, and
assignment problems the size of a query-to-instance match.
"""

from __future__ import annotations

import time

import numpy as np

from countex.kernels import numpy_impl

try:
    from countex.kernels import numba_impl
except ImportError:
    numba_impl = None


def bench(fn, args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def density_args(gen: np.random.Generator, grid: int, points: int):
    rows = gen.uniform(0, grid, size=points)
    cols = gen.uniform(0, grid, size=points)
    return grid, grid, rows, cols, 1.5


def assignment_args(gen: np.random.Generator, rows: int, cols: int):
    return (gen.uniform(0, 10, size=(rows, cols)),)


def main() -> None:
    gen = np.random.default_rng(0)
    cases = [
        ("render_density 64x64, 40 pts", "render_density", density_args(gen, 64, 40)),
        ("render_density 128x128, 60 pts", "render_density", density_args(gen, 128, 60)),
        ("solve_assignment 40x60", "solve_assignment", assignment_args(gen, 40, 60)),
        ("solve_assignment 100x120", "solve_assignment", assignment_args(gen, 100, 120)),
    ]
    print(f"{'case':<32} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for label, name, args in cases:
        np_fn = getattr(numpy_impl, name)
        t_np = bench(np_fn, args, repeats=20)
        if numba_impl is None:
            print(f"{label:<32} {t_np * 1e3:>9.3f}ms {'n/a':>10} {'n/a':>8}")
            continue
        nb_fn = getattr(numba_impl, name)
        nb_fn(*args)  # warm the JIT cache
        t_nb = bench(nb_fn, args, repeats=20)
        out_np, out_nb = np_fn(*args), nb_fn(*args)
        if isinstance(out_np, tuple):
            same = all(np.array_equal(a, b) for a, b in zip(out_np, out_nb))
        else:
            same = np.array_equal(out_np, out_nb)
        mark = "" if same else "  (MISMATCH)"
        print(
            f"{label:<32} {t_np * 1e3:>9.3f}ms {t_nb * 1e3:>9.3f}ms {t_np / t_nb:>7.1f}x{mark}"
        )


if __name__ == "__main__":
    main()
