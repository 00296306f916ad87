"""Deterministic time grids and Brownian path ensembles.

Every estimator downstream consumes a single :class:`PathEnsemble`, so the
ensemble is the only source of randomness in a run.  Sampling uses the
counter-based Philox bit generator keyed by the seed, which makes the draw
for a given (path, step, coordinate) cell independent of evaluation order
and bit-for-bit reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

__all__ = [
    "PathError",
    "TimeGrid",
    "PathEnsemble",
    "make_grid",
    "simulate_brownian",
    "evaluate_terminal",
    "terminal_sup",
    "window_ensemble",
    "export_increments",
]


class PathError(ValueError):
    """Invalid grid, ensemble, or terminal data."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 = s_0 < s_1 < ... < s_steps = t1.

    Parameters
    ----------
    t0, t1 : float
        Interval endpoints, t0 < t1.
    steps : int
        Number of subintervals (>= 1).
    """

    t0: float
    t1: float
    steps: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.t0) and np.isfinite(self.t1)):
            raise PathError("grid endpoints must be finite")
        if not self.t1 > self.t0:
            raise PathError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise PathError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def n_nodes(self) -> int:
        return self.steps + 1

    @cached_property
    def times(self) -> np.ndarray:
        """Node times, shape (steps+1,)."""
        t = self.t0 + self.dt * np.arange(self.steps + 1)
        t[-1] = self.t1
        return t

    def window(self, k0: int, k1: int) -> "TimeGrid":
        """Sub-grid spanning nodes k0..k1 of this grid."""
        if not (0 <= k0 < k1 <= self.steps):
            raise PathError(f"invalid window [{k0}, {k1}] for {self.steps}-step grid")
        return TimeGrid(float(self.times[k0]), float(self.times[k1]), k1 - k0)


@dataclass(frozen=True)
class PathEnsemble:
    """Brownian paths on a grid.

    Attributes
    ----------
    grid : TimeGrid
    d : int
        Number of Brownian coordinates.
    seed : int
        Seed used for the Philox generator (kept for provenance; windows
        inherit the parent's seed).
    increments : np.ndarray
        Shape (n_paths, steps, d); increment over [s_k, s_{k+1}] at index k.
    origin : np.ndarray
        Shape (n_paths, d); Brownian values at grid.t0.  Zero for freshly
        simulated ensembles, nonzero for windows of a longer ensemble.
    """

    grid: TimeGrid
    d: int
    seed: int
    increments: np.ndarray
    origin: np.ndarray

    def __post_init__(self) -> None:
        inc = self.increments
        if inc.ndim != 3 or inc.shape[1] != self.grid.steps or inc.shape[2] != self.d:
            raise PathError(f"increments shape {inc.shape} does not match grid/d")
        if self.origin.shape != (inc.shape[0], self.d):
            raise PathError("origin shape must be (n_paths, d)")
        if not np.isfinite(inc).all() or not np.isfinite(self.origin).all():
            raise PathError("non-finite values in ensemble")

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @cached_property
    def values(self) -> np.ndarray:
        """Brownian values at every node, shape (n_paths, steps+1, d)."""
        w = np.empty((self.n_paths, self.grid.steps + 1, self.d))
        w[:, 0, :] = self.origin
        np.cumsum(self.increments, axis=1, out=w[:, 1:, :])
        w[:, 1:, :] += self.origin[:, None, :]
        return w

    def state(self, node: int) -> np.ndarray:
        """Markov state (Brownian values) at a node, shape (n_paths, d)."""
        return self.values[:, node, :]


def make_grid(t0: float, t1: float, steps: int) -> TimeGrid:
    """Build a uniform grid on [t0, t1] with the given number of steps."""
    return TimeGrid(float(t0), float(t1), int(steps))


def simulate_brownian(grid: TimeGrid, n_paths: int, d: int, seed: int) -> PathEnsemble:
    """Draw a Brownian ensemble on ``grid``.

    The same (grid, n_paths, d, seed) always produces byte-identical
    increments; W(t0) = 0 on every path.
    """
    if n_paths < 1 or d < 1:
        raise PathError("n_paths and d must be positive")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    inc = rng.standard_normal((n_paths, grid.steps, d)) * np.sqrt(grid.dt)
    return PathEnsemble(
        grid=grid,
        d=d,
        seed=int(seed),
        increments=inc,
        origin=np.zeros((n_paths, d)),
    )


def evaluate_terminal(ensemble: PathEnsemble, terminal_map: Callable) -> np.ndarray:
    """Evaluate a terminal functional on the ensemble's endpoint values.

    ``terminal_map`` receives W(t1) as an (n_paths, d) array and must return
    per-path values of shape (n_paths,) or (n_paths, n).  Values must be
    finite (terminal data is assumed bounded).
    """
    vals = np.asarray(terminal_map(ensemble.values[:, -1, :]), dtype=float)
    if vals.shape[0] != ensemble.n_paths or vals.ndim not in (1, 2):
        raise PathError(f"terminal map returned shape {vals.shape}")
    if not np.isfinite(vals).all():
        raise PathError("terminal map returned non-finite values")
    return vals


def terminal_sup(values: np.ndarray) -> float:
    """Realized sup of the per-path Euclidean norm of terminal values."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        return float(np.max(np.abs(vals)))
    return float(np.max(np.linalg.norm(vals, axis=1)))


def window_ensemble(ensemble: PathEnsemble, k0: int, k1: int) -> PathEnsemble:
    """Restrict an ensemble to grid nodes k0..k1.

    The window's origin carries the parent's Brownian values at node k0, so
    Markov states seen by regression bases agree with the parent ensemble.
    """
    sub = ensemble.grid.window(k0, k1)
    return PathEnsemble(
        grid=sub,
        d=ensemble.d,
        seed=ensemble.seed,
        increments=ensemble.increments[:, k0:k1, :],
        origin=ensemble.values[:, k0, :].copy(),
    )


def export_increments(ensemble: PathEnsemble, path: str) -> None:
    """Dump increments to CSV with columns (path, step, coordinate, increment)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "coordinate", "increment"])
        inc = ensemble.increments
        for j in range(inc.shape[0]):
            for k in range(inc.shape[1]):
                for c in range(inc.shape[2]):
                    writer.writerow([j, k, c, repr(float(inc[j, k, c]))])
