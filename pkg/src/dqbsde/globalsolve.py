"""Global solves on the whole horizon by backward stitching of local solves.

A Lipschitz coupling (alpha = 0) admits a uniform bound on Y that holds on
any sub-interval, so the certified local interval length evaluated at that
bound can be repeated until it covers [0, T].  Segments are solved backward;
every inner segment takes the regression-smoothed seam values of the
previously solved segment as terminal data, and the time-dependent uniform
bound is enforced at every seam before extending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .bmo import bmo2_norm
from .condexp import RegressionBasis, fit, predict
from .constants import (
    ParameterError,
    StructuralConstants,
    global_parameters,
    local_parameters,
)
from .paths import PathEnsemble, TimeGrid, simulate_brownian, window_ensemble
from .picard import SystemGenerator, local_solve

__all__ = [
    "StitchError",
    "StitchPlan",
    "plan_stitch",
    "SeamRecord",
    "GlobalSolution",
    "global_solve",
    "ZBmoReport",
    "z_bmo_report",
    "UniquenessReport",
    "uniqueness_probe",
]


class StitchError(RuntimeError):
    """Stitch plan impossible or a seam bound failed."""


@dataclass(frozen=True)
class StitchPlan:
    """Backward segmentation of the horizon into local-solve intervals.

    ``node_breaks`` are decreasing grid-node indices from the last node to
    0; segment j spans nodes [node_breaks[j+1], node_breaks[j]] and is
    solved j-th (the segment touching the horizon end goes first).  Every
    segment is at most ``eta`` long; only the final segment, the one ending
    at t = t0, may be shorter.
    """

    eta: float
    mode: str
    node_breaks: tuple
    breakpoints: tuple           # times matching node_breaks, decreasing
    segment_grids: tuple         # TimeGrid per segment, backward solve order

    def __post_init__(self) -> None:
        ks = self.node_breaks
        if len(ks) < 2 or ks[-1] != 0:
            raise StitchError(f"node breaks {ks} must end at node 0")
        if any(a <= b for a, b in zip(ks, ks[1:])):
            raise StitchError(f"node breaks {ks} must decrease strictly")
        if len(self.segment_grids) != len(ks) - 1:
            raise StitchError("one grid per segment required")
        for g in self.segment_grids:
            if g.t1 - g.t0 > self.eta * (1.0 + 1e-9):
                raise StitchError(
                    f"segment [{g.t0:.6g}, {g.t1:.6g}] exceeds eta = {self.eta:.6g}"
                )

    @property
    def n_segments(self) -> int:
        return len(self.node_breaks) - 1

    def segment_nodes(self, j: int) -> tuple:
        """(first node, last node) of segment j in the full grid."""
        return self.node_breaks[j + 1], self.node_breaks[j]


def plan_stitch(structural: StructuralConstants, grid: TimeGrid,
                mode: str = "certified", segment_length: Optional[float] = None,
                eta_floor: float = 1e-6) -> StitchPlan:
    """Partition the grid into segments no longer than the interval length.

    Certified mode takes the interval length from the structural constants
    evaluated at the uniform bound; when that length is unavailable or
    shorter than a grid step the error says to rerun in working mode, where
    the caller chooses ``segment_length`` (whole horizon when omitted).
    """
    span = grid.t1 - grid.t0
    if abs(span - structural.horizon) > 1e-9 * max(1.0, structural.horizon):
        raise StitchError(
            f"grid spans {span:.6g} but constants declare horizon {structural.horizon:.6g}"
        )
    if mode == "certified":
        try:
            gp = global_parameters(structural)
        except ParameterError as exc:
            raise StitchError(f"global constants unavailable: {exc}") from exc
        if gp.certified_eta is None:
            raise StitchError(
                "certified segment length unavailable "
                f"({gp.certified_eta_failure}); rerun in working mode "
                "with an explicit segment length"
            )
        eta = gp.certified_eta
        if eta < eta_floor:
            raise StitchError(
                f"certified segment length {eta:.3e} is below the floor "
                f"{eta_floor:.3e}; rerun in working mode with an explicit "
                "segment length"
            )
        if eta < grid.dt:
            raise StitchError(
                f"certified segment length {eta:.3e} is shorter than one grid "
                f"step {grid.dt:.3e}; refine the grid or rerun in working mode"
            )
    elif mode == "working":
        eta = span if segment_length is None else float(segment_length)
        if eta <= 0:
            raise StitchError(f"segment length must be positive, got {eta}")
        eta = min(eta, span)
        if eta < grid.dt:
            raise StitchError(
                f"segment length {eta:.3e} is shorter than one grid step {grid.dt:.3e}"
            )
    else:
        raise StitchError(f"unknown mode {mode!r}, expected 'certified' or 'working'")

    eta_nodes = max(1, int(math.floor(eta / grid.dt + 1e-9)))
    ks = [grid.steps]
    while ks[-1] > 0:
        ks.append(max(0, ks[-1] - eta_nodes))
    node_breaks = tuple(ks)
    times = grid.times
    return StitchPlan(
        eta=eta,
        mode=mode,
        node_breaks=node_breaks,
        breakpoints=tuple(float(times[k]) for k in node_breaks),
        segment_grids=tuple(grid.window(b, a) for a, b in zip(node_breaks, node_breaks[1:])),
    )


@dataclass(frozen=True)
class SeamRecord:
    """Diagnostics for one interior breakpoint."""

    node: int
    time: float
    jump: float                  # max |raw - smoothed| over paths and components
    seam_sup: float              # max Euclidean |Y| of the smoothed seam values
    bound: float                 # time-dependent uniform bound at the seam
    margin: float


@dataclass(frozen=True)
class GlobalSolution:
    y: np.ndarray                # (steps+1, n_paths, n)
    z: np.ndarray                # (steps, n_paths, n, d)
    y0: np.ndarray
    y0_se: np.ndarray
    plan: StitchPlan
    traces: tuple                # IterationTrace per segment, backward order
    uniform_bound: float         # horizon-wide bound on |Y|
    uniform_margin: float        # min over nodes of bound(t) - sup |Y_t|
    sup_abs_y: float
    z_bmo_estimate: float
    seams: tuple                 # SeamRecord per interior breakpoint
    iterations_total: int
    in_ball: Optional[bool]      # certified runs only


def _seam_smooth(ensemble: PathEnsemble, node: int, raw: np.ndarray,
                 basis: RegressionBasis) -> np.ndarray:
    est = fit(ensemble, node, raw, basis)
    return predict(est, ensemble, node)


def global_solve(gen: SystemGenerator, terminal: np.ndarray,
                 ensemble: PathEnsemble, basis: RegressionBasis, *,
                 mode: str = "working", segment_length: Optional[float] = None,
                 plan: Optional[StitchPlan] = None, tol: float = 1e-4,
                 max_iter: int = 40, z_cap: Optional[float] = None,
                 init: str = "mean", seam_slack: float = 1e-6) -> GlobalSolution:
    """Solve on the whole horizon by stitching local solves backward.

    Segment k spans [tau_{k+1}, tau_k] and takes as terminal data the
    smoothed values of the previously solved segment at tau_k (a function
    of the Markov state, so each segment stays Markovian).  Before each
    extension the seam values are checked against the time-dependent
    uniform bound, inflated by ``seam_slack``; a violation aborts with
    diagnostics since it signals a discretization too coarse for the
    instance.  Certified mode also tracks ball membership per segment
    against constants evaluated at the uniform bound.
    """
    sc = gen.constants
    if sc.alpha != 0.0:
        raise StitchError("stitching requires alpha = 0 (Lipschitz coupling)")
    terminal = np.asarray(terminal, dtype=float)
    m = ensemble.n_paths
    if terminal.shape != (m, sc.n):
        raise StitchError(f"terminal shape {terminal.shape}, expected ({m}, {sc.n})")
    gp = global_parameters(sc)
    xi_sup = float(np.max(np.linalg.norm(terminal, axis=1)))
    if xi_sup > gp.uniform_bound(sc.horizon) * (1.0 + 1e-9):
        raise StitchError(
            f"terminal sup {xi_sup:.4g} exceeds the declared bound "
            f"{gp.uniform_bound(sc.horizon):.4g}; fix xi_bound in the constants"
        )
    if plan is None:
        plan = plan_stitch(sc, ensemble.grid, mode=mode,
                           segment_length=segment_length)
    seg_params = None
    if plan.mode == "certified":
        seg_params = local_parameters(replace(sc, xi_bound=gp.y_uniform_bound))

    steps = ensemble.grid.steps
    y = np.empty((steps + 1, m, sc.n))
    z = np.empty((steps, m, sc.n, ensemble.d))
    traces = []
    seams = []
    iterations = 0
    in_ball: Optional[bool] = True if seg_params is not None else None

    seg_terminal = terminal
    y0 = None
    y0_se = None
    for j in range(plan.n_segments):
        k0, k1 = plan.segment_nodes(j)
        window = window_ensemble(ensemble, k0, k1)
        sol, trace = local_solve(gen, seg_terminal, window, basis, tol=tol,
                                 max_iter=max_iter, params=seg_params,
                                 z_cap=z_cap, init=init)
        traces.append(trace)
        iterations += sol.iterations
        if seg_params is not None and sol.in_ball is not None:
            in_ball = bool(in_ball and sol.in_ball)
        y[k0:k1 + 1] = sol.y
        z[k0:k1] = sol.z
        y0, y0_se = sol.y0, sol.y0_se
        if k0 == 0:
            break
        raw = sol.y[0]
        smoothed = _seam_smooth(ensemble, k0, raw, basis)
        t_seam = float(ensemble.grid.times[k0])
        bound = gp.uniform_bound(t_seam)
        seam_sup = float(np.max(np.linalg.norm(smoothed, axis=1)))
        jump = float(np.max(np.abs(raw - smoothed)))
        margin = bound * (1.0 + seam_slack) - seam_sup
        seams.append(SeamRecord(node=k0, time=t_seam, jump=jump,
                                seam_sup=seam_sup, bound=bound, margin=margin))
        if margin < 0.0:
            raise StitchError(
                f"seam at t = {t_seam:.6g}: |Y| = {seam_sup:.4g} exceeds the "
                f"uniform bound {bound:.4g}; the discretization is too coarse "
                "for this instance"
            )
        y[k0] = smoothed
        seg_terminal = smoothed

    sup_per_node = np.max(np.linalg.norm(y, axis=2), axis=1)
    bounds = np.array([gp.uniform_bound(t) for t in ensemble.grid.times])
    uniform_margin = float(np.min(bounds - sup_per_node))
    z_norm_sq = bmo2_norm(ensemble, z.reshape(steps, m, -1), basis).norm_sq
    return GlobalSolution(
        y=y, z=z, y0=y0, y0_se=y0_se, plan=plan, traces=tuple(traces),
        uniform_bound=gp.y_uniform_bound, uniform_margin=uniform_margin,
        sup_abs_y=float(np.max(sup_per_node)),
        z_bmo_estimate=math.sqrt(max(z_norm_sq, 0.0)),
        seams=tuple(seams), iterations_total=iterations, in_ball=in_ball,
    )


@dataclass(frozen=True)
class ZBmoReport:
    estimate: float
    bound: float
    bound_note: Optional[str]
    slack: float
    within: bool


def z_bmo_report(solution: GlobalSolution,
                 structural: StructuralConstants) -> ZBmoReport:
    """Empirical gradient BMO norm against its closed-form cap."""
    gp = global_parameters(structural)
    est = solution.z_bmo_estimate
    return ZBmoReport(
        estimate=est,
        bound=gp.z_bmo_cap,
        bound_note=gp.z_bmo_cap_note,
        slack=gp.z_bmo_cap - est,
        within=bool(est <= gp.z_bmo_cap),
    )


@dataclass(frozen=True)
class UniquenessReport:
    """Distances between re-solves that should all find the same solution."""

    init_y_sup: float            # two initializations, same ensemble
    init_z_bmo: float
    seed_y_sup: float            # same initialization, fresh ensemble
    seed_z_bmo: float
    y0_gap: float
    mc_scale: float
    tolerance_y: float
    tolerance_z: float
    passed: bool


def _cross_field(ens_a: PathEnsemble, ens_b: PathEnsemble, field_a: np.ndarray,
                 field_b: np.ndarray, basis: RegressionBasis, nodes: range,
                 trim: float = 0.005) -> tuple[np.ndarray, np.ndarray]:
    """Difference of the two solutions' smoothed fields on ensemble A states.

    Restricted to the central (1 - 2 trim) band of ensemble B's states at
    each node: fitted functions are only comparable where both samples have
    data, and polynomial fits diverge outside theirs.  Rows outside the
    band are zero.  Returns (differences, band count per node).
    """
    m = ens_a.n_paths
    out = np.zeros((len(nodes), m, field_a.shape[2]))
    counts = np.zeros(len(nodes), dtype=int)
    for row, k in enumerate(nodes):
        est_a = fit(ens_a, k, field_a[k], basis)
        est_b = fit(ens_b, k, field_b[k], basis)
        state_a = basis.state(ens_a, k)
        state_b = basis.state(ens_b, k)
        lo = np.quantile(state_b, trim, axis=0)
        hi = np.quantile(state_b, 1.0 - trim, axis=0)
        mask = np.all((state_a >= lo) & (state_a <= hi), axis=1)
        diff = predict(est_a, ens_a, k) - predict(est_b, ens_a, k)
        out[row, mask] = diff[mask]
        counts[row] = int(mask.sum())
    return out, counts


def uniqueness_probe(gen: SystemGenerator, terminal_fn: Callable,
                     ensemble: PathEnsemble, basis: RegressionBasis, *,
                     mode: str = "working", segment_length: Optional[float] = None,
                     tol: float = 1e-4, max_iter: int = 40,
                     alt_seed: Optional[int] = None,
                     gen_b: Optional[SystemGenerator] = None) -> UniquenessReport:
    """Re-solve from different starting data and report solution distances.

    Three global solves: the reference, one from the all-zero Picard
    initialization on the same ensemble, and one on a fresh ensemble (a
    different regression sample).  The first pair is compared pathwise; the
    cross-ensemble pair through the fitted value functions evaluated on the
    reference states, per node in root mean square over the shared support
    band and then maximized over nodes.  A pathwise sup would measure the
    basis itself: two quantile-bin partitions disagree by a whole bin mean
    on the sliver of paths that falls between their edges, however close
    the fitted functions are in any average sense.  ``terminal_fn`` maps an
    ensemble to terminal data so the fresh ensemble gets matching terminal
    values.  Passing ``gen_b`` swaps the generator of the fresh-ensemble
    run, which should make the probe report a large distance (a self-test
    of the harness).

    The pass threshold for Y distances is 5 * (tol + 3 * mc_scale) with
    mc_scale the sampling error of the terminal mean, the resolution limit
    of two regression samples of this size.  Z fits aggregate increments at
    rate 1/sqrt(dt) and the BMO suffix sum restores sqrt(T), so the Z
    threshold inflates mc_scale by sqrt(T/dt).
    """
    xi_a = np.asarray(terminal_fn(ensemble), dtype=float)
    sol_a = global_solve(gen, xi_a, ensemble, basis, mode=mode,
                         segment_length=segment_length, tol=tol,
                         max_iter=max_iter, init="mean")
    sol_b = global_solve(gen, xi_a, ensemble, basis, mode=mode,
                         segment_length=segment_length, tol=tol,
                         max_iter=max_iter, init="zero")
    steps, m = ensemble.grid.steps, ensemble.n_paths
    init_y = float(np.max(np.linalg.norm(sol_a.y - sol_b.y, axis=2)))
    dz = (sol_a.z - sol_b.z).reshape(steps, m, -1)
    init_z = math.sqrt(max(bmo2_norm(ensemble, dz, basis).norm_sq, 0.0)) if dz.any() else 0.0

    seed_b = ensemble.seed + 1 if alt_seed is None else alt_seed
    ens_b = simulate_brownian(ensemble.grid, m, ensemble.d, seed=seed_b)
    xi_b = np.asarray(terminal_fn(ens_b), dtype=float)
    sol_c = global_solve(gen_b or gen, xi_b, ens_b, basis, mode=mode,
                         segment_length=segment_length, tol=tol,
                         max_iter=max_iter, init="mean")
    dy_cross, dy_counts = _cross_field(ensemble, ens_b, sol_a.y, sol_c.y, basis,
                                       range(steps + 1))
    per_node = np.sqrt(np.sum(dy_cross ** 2, axis=(1, 2))
                       / np.maximum(dy_counts, 1))
    seed_y = float(np.max(per_node))
    dz_a = sol_a.z.reshape(steps, m, -1)
    dz_c = sol_c.z.reshape(steps, m, -1)
    dz_cross, _ = _cross_field(ensemble, ens_b, dz_a, dz_c, basis, range(steps))
    seed_z = math.sqrt(max(bmo2_norm(ensemble, dz_cross, basis).norm_sq, 0.0))
    y0_gap = float(np.max(np.abs(sol_a.y0 - sol_c.y0)))

    mc_scale = max(
        float(np.max(np.std(xi_a, axis=0))),
        float(np.max(np.std(xi_b, axis=0))),
    ) / math.sqrt(m)
    grid = ensemble.grid
    z_inflation = math.sqrt((grid.t1 - grid.t0) / grid.dt)
    tolerance_y = 5.0 * (tol + 3.0 * mc_scale)
    tolerance_z = 5.0 * (tol + 3.0 * mc_scale * z_inflation)
    passed = bool(max(init_y, seed_y) <= tolerance_y
                  and max(init_z, seed_z) <= tolerance_z)
    return UniquenessReport(
        init_y_sup=init_y, init_z_bmo=init_z, seed_y_sup=seed_y,
        seed_z_bmo=seed_z, y0_gap=y0_gap, mc_scale=mc_scale,
        tolerance_y=tolerance_y, tolerance_z=tolerance_z, passed=passed,
    )
