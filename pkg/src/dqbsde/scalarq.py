"""Scalar quadratic BSDE solver on a simulated ensemble.

Least-squares Monte Carlo, backward in time: the martingale coefficient is
regressed from the next-node value against the increment, the value process
from the one-step Euler target.  A Cole-Hopf reference solver covers the
pure-quadratic generator exactly (up to regression error), which is what the
tests calibrate against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .condexp import RegressionBasis, fit, fitted_se, predict
from .constants import phi, phi_prime
from .paths import PathEnsemble

__all__ = [
    "ScalarGeneratorError",
    "ScalarDivergenceError",
    "ScalarGenerator",
    "pure_quadratic",
    "DriverField",
    "ScalarSolution",
    "solve_scalar",
    "ColeHopfSolution",
    "cole_hopf_solve",
    "a_priori_check",
    "APrioriReport",
    "comparison_check",
    "ComparisonReport",
]


class ScalarGeneratorError(ValueError):
    """Generator fails its stated growth bound on random probes."""


class ScalarDivergenceError(RuntimeError):
    """Backward sweep left the a priori region; the scheme is diverging."""


@dataclass(frozen=True)
class ScalarGenerator:
    """Driver z -> f(t, z) with quadratic growth gamma/2 |z|^2 + growth_c.

    ``quadratic_part`` maps (t, z) with z of shape (n, d) to shape (n,).
    Construction probes the growth bound on seeded random inputs and
    rejects violators outright.
    """

    quadratic_part: Callable[[float, np.ndarray], np.ndarray]
    growth_c: float
    gamma: float
    d: int = 1
    label: str = ""
    probe_count: int = field(default=256, repr=False)

    def __post_init__(self) -> None:
        if self.growth_c < 0 or not math.isfinite(self.growth_c):
            raise ScalarGeneratorError("growth_c must be finite and nonnegative")
        if self.gamma <= 0 or not math.isfinite(self.gamma):
            raise ScalarGeneratorError("gamma must be finite and positive")
        if self.d < 1:
            raise ScalarGeneratorError("d must be at least 1")
        rng = np.random.Generator(np.random.Philox(key=20240 + self.d))
        z = rng.standard_normal((self.probe_count, self.d))
        z *= rng.uniform(0.0, 50.0, size=(self.probe_count, 1))
        for t in (0.0, 0.31, 0.5, 0.77, 1.0):
            vals = np.asarray(self(t, z), dtype=float)
            if vals.shape != (self.probe_count,):
                raise ScalarGeneratorError(
                    f"quadratic_part returned shape {vals.shape}, expected ({self.probe_count},)"
                )
            bound = self.growth_c + 0.5 * self.gamma * np.sum(z * z, axis=1)
            bad = np.abs(vals) > bound * (1.0 + 1e-9) + 1e-12
            if bad.any():
                j = int(np.argmax(bad))
                raise ScalarGeneratorError(
                    f"growth bound violated at t={t}, |z|={np.linalg.norm(z[j]):.3f}: "
                    f"|f|={abs(vals[j]):.6g} > {bound[j]:.6g}"
                )

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        return self.quadratic_part(t, z)


def pure_quadratic(gamma: float, d: int = 1) -> ScalarGenerator:
    """The generator gamma/2 |z|^2, exactly solvable by exponential transform."""
    return ScalarGenerator(
        quadratic_part=lambda t, z: 0.5 * gamma * np.sum(z * z, axis=1),
        growth_c=0.0, gamma=gamma, d=d, label=f"pure-quadratic({gamma})",
    )


@dataclass(frozen=True)
class DriverField:
    """Exogenous per-path drift, shape (steps, n_paths); added to the generator."""

    values: np.ndarray


def _driver_values(ensemble: PathEnsemble, driver) -> Optional[np.ndarray]:
    if driver is None:
        return None
    vals = driver.values if isinstance(driver, DriverField) else np.asarray(driver)
    vals = np.asarray(vals, dtype=float)
    if vals.shape[0] == ensemble.grid.steps + 1:
        vals = vals[:-1]
    if vals.shape != (ensemble.grid.steps, ensemble.n_paths):
        raise ValueError(f"driver shape {vals.shape} does not match ensemble")
    if not np.isfinite(vals).all():
        raise ValueError("driver contains non-finite values")
    return vals


@dataclass(frozen=True)
class ScalarSolution:
    y: np.ndarray            # (steps+1, n_paths)
    z: np.ndarray            # (steps, n_paths, d)
    g: np.ndarray            # (steps, n_paths), realized generator along the solution
    y0: float
    y0_se: float
    z_cap: float
    z_cap_hits: int
    y_clip_hits: int
    z_gate_nodes: int        # nodes where the z fit was all noise and zeroed
    max_abs_y: float


def _default_z_cap(gamma: float, xi_sup: float, budget: float, dt: float) -> float:
    # energy bound on int |Z|^2: 2 phi(|xi|) + 2 phi'(y_bound) * (drift budget),
    # with phi the quadratic-exponential test function for this gamma
    y_bound = xi_sup + budget
    energy = 2.0 * phi(xi_sup, gamma) + 2.0 * abs(phi_prime(y_bound, gamma)) * budget
    return 10.0 * math.sqrt(max(energy, 1.0) / dt)


def solve_scalar(ensemble: PathEnsemble, terminal: np.ndarray,
                 generator: ScalarGenerator, basis: RegressionBasis,
                 driver=None, z_cap: Optional[float] = None,
                 divergence_factor: float = 10.0) -> ScalarSolution:
    """Backward LSMC sweep for one scalar quadratic BSDE.

    Z at each node comes from regressing next-value times increment over
    dt; Y from the one-step target with a trapezoidal drift integral
    (average of the generator at this node and the next, which kills the
    O(dt) Euler bias).  A z fit indistinguishable from regression noise is
    zeroed wholesale, and surviving rows are clipped at ``z_cap`` (a
    generous multiple of the energy bound by default) so a single bad
    regression cannot blow up the quadratic term.  The Y estimate is clipped at the
    a priori bound |xi| + (C + |driver|)(T - t), which the true solution
    satisfies, so the clip removes regression overshoot at the state
    edges without biasing the interior.  The sweep aborts if Y still
    leaves ``divergence_factor`` times that bound.
    """
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (ensemble.n_paths,):
        raise ValueError(f"terminal shape {terminal.shape}, expected ({ensemble.n_paths},)")
    if not np.isfinite(terminal).all():
        raise ValueError("terminal contains non-finite values")
    if generator.d != ensemble.d:
        raise ValueError(f"generator dimension {generator.d} != ensemble dimension {ensemble.d}")
    drv = _driver_values(ensemble, driver)
    grid = ensemble.grid
    dt = grid.dt
    steps = grid.steps

    xi_sup = float(np.max(np.abs(terminal)))
    driver_sup = 0.0 if drv is None else float(np.max(np.abs(drv)))
    budget = (generator.growth_c + driver_sup) * (grid.t1 - grid.t0)
    y_bound = xi_sup + budget
    blowup = divergence_factor * max(y_bound, 1.0)
    if z_cap is None:
        z_cap = _default_z_cap(generator.gamma, xi_sup, budget, dt)

    rate = generator.growth_c + driver_sup
    y = np.empty((steps + 1, ensemble.n_paths))
    z = np.empty((steps, ensemble.n_paths, ensemble.d))
    g_vals = np.empty((steps, ensemble.n_paths))
    y[steps] = terminal
    cap_hits = 0
    clip_hits = 0
    gate_nodes = 0
    y0_se = math.nan
    g_next = None
    for k in range(steps - 1, -1, -1):
        dw = ensemble.increments[:, k, :]
        z_target = y[k + 1][:, None] * dw / dt
        z_est = fit(ensemble, k, z_target, basis)
        zk = predict(z_est, ensemble, k)
        # noise gate: under a flat true z the fitted field's mean square
        # concentrates at p/n_paths times the target variance; a fit within
        # 3x of that floor carries no signal, and keeping it would charge
        # spurious quadratic variation to near-deterministic solutions
        p_eff = z_est.coef.shape[0]
        noise_floor = p_eff * float(np.mean(np.var(z_target, axis=0))) / ensemble.n_paths
        if float(np.mean(zk * zk)) <= 3.0 * noise_floor:
            zk = np.zeros_like(zk)
            gate_nodes += 1
        norms = np.linalg.norm(zk, axis=1)
        over = norms > z_cap
        if over.any():
            cap_hits += int(over.sum())
            zk = zk * np.where(over, z_cap / norms, 1.0)[:, None]
        g = generator(grid.times[k], zk)
        if drv is not None:
            g = g + drv[k]
        g_vals[k] = g
        drift = g if g_next is None else 0.5 * (g + g_next)
        y_est = fit(ensemble, k, y[k + 1] + drift * dt, basis)
        pred = predict(y_est, ensemble, k)
        bound_k = xi_sup + rate * (grid.t1 - grid.times[k])
        clip_hits += int(np.sum(np.abs(pred) > bound_k))
        y[k] = np.clip(pred, -bound_k, bound_k)
        z[k] = zk
        peak = float(np.max(np.abs(y[k])))
        if not math.isfinite(peak) or peak > blowup:
            raise ScalarDivergenceError(
                f"|Y| reached {peak:.4g} at node {k}, a priori bound {y_bound:.4g}"
            )
        if k == 0:
            y0_se = float(np.max(fitted_se(y_est, ensemble, 0)))
        g_next = g
    y0 = float(np.mean(y[0]))
    return ScalarSolution(y=y, z=z, g=g_vals, y0=y0, y0_se=y0_se,
                          z_cap=float(z_cap), z_cap_hits=cap_hits,
                          y_clip_hits=clip_hits, z_gate_nodes=gate_nodes,
                          max_abs_y=float(np.max(np.abs(y))))


@dataclass(frozen=True)
class ColeHopfSolution:
    y: np.ndarray            # (steps+1, n_paths)
    y0: float
    y0_se: float


def cole_hopf_solve(ensemble: PathEnsemble, terminal: np.ndarray, gamma: float,
                    basis: RegressionBasis, driver=None) -> ColeHopfSolution:
    """Exponential-transform solution for generator gamma/2 |z|^2 + driver.

    exp(gamma Y_k) is the conditional expectation of
    exp(gamma (xi + suffix driver integral)), evaluated by regression, so
    the only error is the conditional-expectation estimate itself.  The
    driver must not depend on y or z for this to be exact.  Predictions
    are clipped into the a priori band exp(+-gamma (|xi| + |driver|(T-t)))
    so edge-path regression overshoot cannot leave the valid range.
    """
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (ensemble.n_paths,):
        raise ValueError(f"terminal shape {terminal.shape}, expected ({ensemble.n_paths},)")
    drv = _driver_values(ensemble, driver)
    grid = ensemble.grid
    steps = grid.steps
    dt = grid.dt
    xi_sup = float(np.max(np.abs(terminal)))
    rate = 0.0 if drv is None else float(np.max(np.abs(drv)))

    suffix = np.zeros((steps + 1, ensemble.n_paths))
    if drv is not None:
        suffix[:-1] = np.cumsum(drv[::-1], axis=0)[::-1] * dt

    y = np.empty((steps + 1, ensemble.n_paths))
    y[steps] = terminal
    y0 = math.nan
    y0_se = math.nan
    for k in range(steps):
        target = np.exp(gamma * (terminal + suffix[k]))
        est = fit(ensemble, k, target, basis)
        bound_k = xi_sup + rate * (grid.t1 - grid.times[k])
        log_edge = min(gamma * bound_k, 700.0)
        lo, hi = math.exp(-log_edge), math.exp(log_edge)
        pred = np.clip(predict(est, ensemble, k), lo, hi)
        y[k] = np.log(pred) / gamma
        if k == 0:
            se = fitted_se(est, ensemble, 0)
            y0 = float(np.mean(y[0]))
            # delta method: d(log(x)/gamma) = 1/(gamma x)
            y0_se = float(np.max(se / (gamma * pred)))
    return ColeHopfSolution(y=y, y0=y0, y0_se=y0_se)


@dataclass(frozen=True)
class APrioriReport:
    worst_violation_se: float
    worst_node: int
    exp_bound_node0: float
    passed: bool


def a_priori_check(ensemble: PathEnsemble, y: np.ndarray, terminal: np.ndarray,
                   gamma: float, g, basis: RegressionBasis) -> APrioriReport:
    """Exponential a priori bound along the realized generator.

    Checks the smoothed E_k[exp(gamma |Y_k|)] against
    E_k[exp(gamma |xi| + gamma int_t^T |g_s| ds)], with ``g`` the generator
    values realized along the solution (shape (steps, n_paths)).  Both
    sides are fitted on the same basis so basis misfit hits them alike.
    Violations are measured in combined fitted standard errors, floored at
    dt times the bound: the backward scheme satisfies the inequality only
    up to its own discretization bias, which statistical error bars do not
    cover.
    """
    terminal = np.asarray(terminal, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = ensemble.grid
    if y.shape != (grid.steps + 1, ensemble.n_paths):
        raise ValueError(f"y shape {y.shape} does not match ensemble")
    g_vals = _driver_values(ensemble, g)
    if g_vals is None:
        raise ValueError("realized generator values are required")
    suffix = np.zeros((grid.steps + 1, ensemble.n_paths))
    suffix[:-1] = np.cumsum(np.abs(g_vals)[::-1], axis=0)[::-1] * grid.dt
    worst = -math.inf
    worst_node = 0
    bound0 = math.nan
    for k in range(grid.steps):
        rhs_est = fit(ensemble, k, np.exp(gamma * (np.abs(terminal) + suffix[k])), basis)
        # both targets are >= 1 pointwise, so their conditional means are too;
        # flooring the fits at 1 removes basis undershoot without bias
        rhs = np.maximum(predict(rhs_est, ensemble, k), 1.0)
        rhs_se = fitted_se(rhs_est, ensemble, k)
        lhs_est = fit(ensemble, k, np.exp(gamma * np.abs(y[k])), basis)
        lhs = np.maximum(predict(lhs_est, ensemble, k), 1.0)
        lhs_se = fitted_se(lhs_est, ensemble, k)
        se = np.hypot(lhs_se, rhs_se)
        scale = np.maximum(se, grid.dt * np.maximum(rhs, 1.0))
        viol = float(np.max((lhs - rhs) / scale))
        if viol > worst:
            worst, worst_node = viol, k
        if k == 0:
            bound0 = float(np.max(rhs))
    # terminal node: bound holds with equality, no regression involved
    return APrioriReport(worst_violation_se=worst, worst_node=worst_node,
                         exp_bound_node0=bound0, passed=bool(worst <= 3.0))


@dataclass(frozen=True)
class ComparisonReport:
    max_crossing: float
    crossing_node: int
    passed: bool


def comparison_check(y_low: np.ndarray, y_high: np.ndarray,
                     tol: float) -> ComparisonReport:
    """Pathwise ordering of two value processes up to ``tol``.

    For generators and terminal data ordered pointwise, the solutions must
    be ordered too; ``max_crossing`` is the largest observed violation.
    """
    y_low = np.asarray(y_low, dtype=float)
    y_high = np.asarray(y_high, dtype=float)
    if y_low.shape != y_high.shape:
        raise ValueError(f"shape mismatch {y_low.shape} vs {y_high.shape}")
    gap = y_low - y_high
    node = int(np.unravel_index(np.argmax(gap), gap.shape)[0])
    worst = float(np.max(gap))
    return ComparisonReport(max_crossing=worst, crossing_node=node,
                            passed=bool(worst <= tol))
