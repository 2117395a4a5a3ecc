import itertools

import numpy as np
import pytest

from countex.kernels import numba_impl, numpy_impl

BACKENDS = [numpy_impl, numba_impl]


def brute_force_assignment(cost: np.ndarray) -> float:
    nr, nc = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(nc), nr):
        best = min(best, sum(cost[i, j] for i, j in enumerate(perm)))
    return best


@pytest.mark.parametrize("impl", BACKENDS)
def test_assignment_matches_brute_force_cost(impl):
    gen = np.random.default_rng(0)
    for _ in range(200):
        nr = int(gen.integers(1, 6))
        nc = int(gen.integers(nr, 7))
        cost = gen.uniform(0, 10, size=(nr, nc))
        cols = impl.solve_assignment(cost)
        assert len(set(cols.tolist())) == nr
        total = cost[np.arange(nr), cols].sum()
        assert np.isclose(total, brute_force_assignment(cost))


@pytest.mark.parametrize("impl", BACKENDS)
def test_assignment_matches_scipy(impl):
    scipy_opt = pytest.importorskip("scipy.optimize")
    gen = np.random.default_rng(1)
    for _ in range(50):
        nr = int(gen.integers(1, 12))
        nc = int(gen.integers(nr, 15))
        cost = gen.uniform(0, 10, size=(nr, nc))
        cols = impl.solve_assignment(cost)
        rows_s, cols_s = scipy_opt.linear_sum_assignment(cost)
        assert np.isclose(cost[np.arange(nr), cols].sum(), cost[rows_s, cols_s].sum())


@pytest.mark.parametrize("impl", BACKENDS)
def test_assignment_tie_break_is_lowest_column(impl):
    cost = np.zeros((2, 3))
    assert impl.solve_assignment(cost).tolist() == [0, 1]


def test_assignment_rejects_more_rows_than_cols():
    with pytest.raises(ValueError):
        numpy_impl.solve_assignment(np.zeros((3, 2)))


def test_assignment_backends_agree_exactly():
    gen = np.random.default_rng(2)
    for _ in range(100):
        nr = int(gen.integers(1, 20))
        nc = int(gen.integers(nr, 25))
        cost = gen.uniform(0, 10, size=(nr, nc))
        assert np.array_equal(
            numpy_impl.solve_assignment(cost), numba_impl.solve_assignment(cost)
        )


@pytest.mark.parametrize("impl", BACKENDS)
def test_density_empty_points_gives_zero_map(impl):
    out = impl.render_density(8, 8, np.zeros(0), np.zeros(0), 1.0)
    assert out.shape == (8, 8)
    assert np.all(out == 0.0)


@pytest.mark.parametrize("impl", BACKENDS)
def test_density_single_interior_point(impl):
    out = impl.render_density(32, 32, np.array([16.0]), np.array([16.0]), 1.0)
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.unravel_index(out.argmax(), out.shape) == (16, 16)


@pytest.mark.parametrize("impl", BACKENDS)
def test_density_boundary_points_keep_unit_mass(impl):
    gen = np.random.default_rng(3)
    rows = gen.uniform(0, 2, size=7)
    cols = gen.uniform(30, 32, size=7)
    out = impl.render_density(32, 32, rows, cols, 1.5)
    assert abs(out.sum() - 7.0) < 1e-6


@pytest.mark.parametrize("impl", BACKENDS)
def test_density_window_truncates_at_three_sigma(impl):
    out = impl.render_density(64, 64, np.array([32.0]), np.array([32.0]), 1.0)
    assert out[32, 36] == 0.0
    assert out[32, 35] > 0.0


def test_density_backends_agree_exactly():
    gen = np.random.default_rng(4)
    for sigma in (0.5, 1.0, 1.7, 3.0):
        n = int(gen.integers(1, 50))
        rows = gen.uniform(-1, 33, size=n)
        cols = gen.uniform(-1, 33, size=n)
        a = numpy_impl.render_density(32, 32, rows, cols, sigma)
        b = numba_impl.render_density(32, 32, rows, cols, sigma)
        assert np.array_equal(a, b)


def test_backend_selection_env(monkeypatch):
    import importlib

    import countex.kernels as kmod
    from countex.errors import ConfigError

    monkeypatch.setenv("COUNTEX_BACKEND", "numpy")
    mod = importlib.reload(kmod)
    assert mod.active_backend() == "numpy"

    monkeypatch.setenv("COUNTEX_BACKEND", "bogus")
    with pytest.raises(ConfigError):
        importlib.reload(kmod)

    monkeypatch.delenv("COUNTEX_BACKEND")
    mod = importlib.reload(kmod)
    assert mod.active_backend() in ("numpy", "numba")
