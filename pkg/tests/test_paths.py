"""Grid construction and Brownian path sampling."""

import numpy as np
import pytest

from dqbsde.paths import (
    PathError,
    evaluate_terminal,
    export_increments,
    make_grid,
    simulate_brownian,
    terminal_sup,
    window_ensemble,
)


def test_grid_nodes_exact():
    assert np.array_equal(make_grid(0.0, 1.0, 1).times, [0.0, 1.0])
    assert np.allclose(make_grid(0.0, 1.0, 4).times,
                       [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)
    half = make_grid(0.5, 1.0, 2)
    assert np.allclose(half.times, [0.5, 0.75, 1.0], atol=1e-15)
    assert half.dt == pytest.approx(0.25, abs=1e-16)
    assert half.n_nodes == 3
    # the last node is pinned to t1 even when dt*steps rounds away from it
    fine = make_grid(0.0, 0.7, 7)
    assert fine.times[-1] == 0.7


def test_grid_rejects_bad_input():
    with pytest.raises(PathError):
        make_grid(1.0, 1.0, 4)
    with pytest.raises(PathError):
        make_grid(0.0, -1.0, 4)
    with pytest.raises(PathError):
        make_grid(0.0, 1.0, 0)
    with pytest.raises(PathError):
        make_grid(0.0, float("inf"), 4)


def test_same_seed_byte_identical():
    grid = make_grid(0.0, 1.0, 32)
    a = simulate_brownian(grid, 500, 2, seed=99)
    b = simulate_brownian(grid, 500, 2, seed=99)
    assert a.increments.tobytes() == b.increments.tobytes()
    c = simulate_brownian(grid, 500, 2, seed=100)
    assert a.increments.tobytes() != c.increments.tobytes()


def test_values_cumulate_increments():
    ens = simulate_brownian(make_grid(0.0, 2.0, 17), 300, 3, seed=5)
    w = ens.values
    assert w.shape == (300, 18, 3)
    assert np.all(w[:, 0, :] == 0.0)
    assert np.allclose(w[:, 1:, :] - w[:, :-1, :], ens.increments, atol=1e-12)
    assert np.array_equal(ens.state(4), w[:, 4, :])


def test_increment_moments():
    grid = make_grid(0.0, 1.0, 40)
    m = 80_000
    ens = simulate_brownian(grid, m, 2, seed=2718)
    inc = ens.increments
    # per-step mean within 4 sigma of zero
    assert np.max(np.abs(inc.mean(axis=0))) <= 4.0 * np.sqrt(grid.dt / m)
    # per-step variance near dt, and the two coordinates uncorrelated
    assert np.max(np.abs(inc.var(axis=0) / grid.dt - 1.0)) <= 5.0 * np.sqrt(2.0 / m)
    cross = np.mean(inc[:, :, 0] * inc[:, :, 1], axis=0)
    assert np.max(np.abs(cross)) <= 5.0 * grid.dt / np.sqrt(m)


def test_window_shares_parent_states():
    ens = simulate_brownian(make_grid(0.0, 1.0, 20), 400, 1, seed=11)
    win = window_ensemble(ens, 5, 15)
    assert win.grid.steps == 10
    assert win.grid.t0 == pytest.approx(0.25, abs=1e-15)
    assert np.array_equal(win.origin, ens.values[:, 5, :])
    # window values are re-accumulated from the origin, so they match the
    # parent slice to rounding, not bitwise
    assert np.allclose(win.values, ens.values[:, 5:16, :], atol=1e-12)
    assert win.seed == ens.seed


def test_window_rejects_bad_nodes():
    ens = simulate_brownian(make_grid(0.0, 1.0, 20), 50, 1, seed=11)
    for k0, k1 in ((10, 10), (-1, 5), (0, 21), (7, 3)):
        with pytest.raises(PathError):
            window_ensemble(ens, k0, k1)


def test_operations_leave_ensemble_unchanged():
    ens = simulate_brownian(make_grid(0.0, 1.0, 16), 800, 1, seed=3)
    inc_before = ens.increments.copy()
    origin_before = ens.origin.copy()
    window_ensemble(ens, 2, 9)
    _ = ens.values
    evaluate_terminal(ens, lambda w: np.cos(w[:, 0]))
    assert np.array_equal(ens.increments, inc_before)
    assert np.array_equal(ens.origin, origin_before)


def test_terminal_evaluation_and_sup():
    ens = simulate_brownian(make_grid(0.0, 1.0, 8), 300, 2, seed=21)
    vals = evaluate_terminal(ens, lambda w: np.cos(w[:, 0]) * np.sin(w[:, 1]))
    assert vals.shape == (300,)
    assert terminal_sup(vals) <= 1.0
    pair = evaluate_terminal(ens, lambda w: np.stack([w[:, 0], w[:, 1]], axis=1))
    assert pair.shape == (300, 2)
    assert terminal_sup(pair) == pytest.approx(
        float(np.max(np.hypot(pair[:, 0], pair[:, 1]))), rel=1e-14)
    with pytest.raises(PathError):
        evaluate_terminal(ens, lambda w: np.where(w[:, 0] > 0.0, np.nan, 1.0))


def test_export_increments_roundtrip(tmp_path):
    ens = simulate_brownian(make_grid(0.0, 0.5, 3), 4, 2, seed=77)
    out = tmp_path / "inc.csv"
    export_increments(ens, str(out))
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "path,step,coordinate,increment"
    assert len(rows) == 1 + 4 * 3 * 2
    j, k, c, v = rows[1].split(",")
    assert (int(j), int(k), int(c)) == (0, 0, 0)
    # repr round-trips the double exactly
    assert float(v) == ens.increments[0, 0, 0]
