"""Empirical BMO functionality for martingales of the form (integrand . W).

The BMO norm's supremum over stopping times is restricted to grid nodes, so
every estimate here is a one-sided (from below) approximation of the
continuous-time quantity; conditional expectations are regression-smoothed
and essential suprema are maxima of the smoothed predictions over paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .condexp import RegressionBasis, fit, fitted_se, predict, weighted_fit
from .constants import capital_phi, find_p_for_threshold
from .paths import PathEnsemble

__all__ = [
    "BmoError",
    "IntegrandField",
    "BmoEstimate",
    "bmo2_norm",
    "stochastic_exponential",
    "john_nirenberg_check",
    "JohnNirenbergReport",
    "reverse_holder_check",
    "ReverseHolderReport",
    "bmo_p_binned",
    "make_battery",
    "estimate_norm_equivalence",
    "girsanov_bmo_equivalence",
    "GirsanovReport",
    "GirsanovBounds",
]


class BmoError(ValueError):
    """Shape mismatch or violated precondition in a BMO computation."""


@dataclass(frozen=True)
class IntegrandField:
    """Adapted integrand on the grid's left endpoints, shape (steps, n_paths, ...)."""

    values: np.ndarray


def _integrand_values(ensemble: PathEnsemble, integrand) -> np.ndarray:
    vals = integrand.values if isinstance(integrand, IntegrandField) else np.asarray(integrand)
    vals = np.asarray(vals, dtype=float)
    steps = ensemble.grid.steps
    if vals.shape[0] == steps + 1:
        vals = vals[:-1]
    if vals.shape[0] != steps or vals.shape[1] != ensemble.n_paths:
        raise BmoError(f"integrand shape {vals.shape} does not match ensemble")
    if vals.ndim == 2:
        vals = vals[:, :, None]
    if not np.isfinite(vals).all():
        raise BmoError("integrand contains non-finite values")
    return vals


def _suffix_qv(ensemble: PathEnsemble, vals: np.ndarray) -> np.ndarray:
    """Remaining quadratic variation sum_{l>=k} |v_l|^2 dt, shape (steps+1, n_paths)."""
    sq = vals.reshape(vals.shape[0], vals.shape[1], -1)
    q = np.einsum("knj,knj->kn", sq, sq) * ensemble.grid.dt
    out = np.zeros((vals.shape[0] + 1, vals.shape[1]))
    out[:-1] = np.cumsum(q[::-1], axis=0)[::-1]
    return out


@dataclass(frozen=True)
class BmoEstimate:
    """Grid approximation of a squared BMO norm."""

    norm_sq: float
    per_node: np.ndarray
    argmax_node: int


def bmo2_norm(ensemble: PathEnsemble, integrand, basis: RegressionBasis,
              weights: Optional[np.ndarray] = None) -> BmoEstimate:
    """Squared BMO norm: max over nodes of the smoothed essential sup of the
    remaining quadratic variation.

    With ``weights`` (a positive density per path) the conditional
    expectations are taken under the weighted measure.
    """
    vals = _integrand_values(ensemble, integrand)
    suffix = _suffix_qv(ensemble, vals)
    n_nodes = suffix.shape[0]
    per_node = np.zeros(n_nodes)
    for k in range(n_nodes - 1):
        if weights is None:
            est = fit(ensemble, k, suffix[k], basis)
        else:
            est = weighted_fit(ensemble, k, suffix[k], weights, basis)
        # predictions of a nonnegative target may dip below zero at the
        # state edges; the norm only needs the upper envelope
        per_node[k] = max(float(np.max(predict(est, ensemble, k))), 0.0)
    argmax = int(np.argmax(per_node))
    return BmoEstimate(norm_sq=float(per_node[argmax]), per_node=per_node,
                       argmax_node=argmax)


def _log_doleans_increments(ensemble: PathEnsemble, vals: np.ndarray) -> np.ndarray:
    """log of the per-step Doleans factors, shape (steps, n_paths)."""
    flat = vals.reshape(vals.shape[0], vals.shape[1], -1)
    if flat.shape[2] != ensemble.d:
        raise BmoError(
            f"Doleans exponential needs a d-row integrand, got trailing shape {flat.shape[2:]}"
        )
    inc = np.moveaxis(ensemble.increments, 1, 0)  # (steps, n_paths, d)
    drift = 0.5 * np.einsum("knj,knj->kn", flat, flat) * ensemble.grid.dt
    return np.einsum("knj,knj->kn", flat, inc) - drift


def _log_doleans_suffix(ensemble: PathEnsemble, vals: np.ndarray) -> np.ndarray:
    """log E(M)_k^T per node, shape (steps+1, n_paths); zero at the last node."""
    loginc = _log_doleans_increments(ensemble, vals)
    out = np.zeros((vals.shape[0] + 1, vals.shape[1]))
    out[:-1] = np.cumsum(loginc[::-1], axis=0)[::-1]
    return out


def stochastic_exponential(ensemble: PathEnsemble, integrand,
                           k0: int = 0, k1: Optional[int] = None) -> np.ndarray:
    """Doleans exponential of (integrand . W) over nodes [k0, k1], per path.

    Left-endpoint discretization: exp(sum v_l.dW_l - 0.5 sum |v_l|^2 dt).
    Multiplicative over adjacent windows by construction.
    """
    vals = _integrand_values(ensemble, integrand)
    k1 = vals.shape[0] if k1 is None else k1
    if not (0 <= k0 <= k1 <= vals.shape[0]):
        raise BmoError(f"invalid window [{k0}, {k1}]")
    loginc = _log_doleans_increments(ensemble, vals)
    return np.exp(loginc[k0:k1].sum(axis=0))


@dataclass(frozen=True)
class JohnNirenbergReport:
    applicable: bool
    norm_sq: float
    bound: float
    per_node_max: np.ndarray
    worst_violation_se: float
    passed: Optional[bool]
    note: str = ""

    @property
    def status(self) -> str:
        if not self.applicable:
            return "inapplicable"
        return "pass" if self.passed else "fail"


def john_nirenberg_check(ensemble: PathEnsemble, integrand,
                         basis: RegressionBasis) -> JohnNirenbergReport:
    """Exponential-moment bound check for a small-norm martingale.

    Applicable only for squared norm < 1 (otherwise the report says so
    rather than failing); at each node compares the smoothed conditional
    expectation of exp(remaining quadratic variation) against
    1/(1 - norm_sq).  The worst violation is reported in units of the
    fitted standard error at the offending path.
    """
    vals = _integrand_values(ensemble, integrand)
    est = bmo2_norm(ensemble, vals, basis)
    if est.norm_sq >= 1.0:
        return JohnNirenbergReport(
            applicable=False, norm_sq=est.norm_sq, bound=math.inf,
            per_node_max=np.array([]), worst_violation_se=math.nan, passed=None,
            note=f"norm_sq = {est.norm_sq:.4f} >= 1, bound is void",
        )
    bound = 1.0 / (1.0 - est.norm_sq)
    suffix = _suffix_qv(ensemble, vals)
    n_nodes = suffix.shape[0]
    per_node_max = np.zeros(n_nodes)
    per_node_max[-1] = 1.0  # empty remaining variation
    worst = -math.inf
    for k in range(n_nodes - 1):
        cef = fit(ensemble, k, np.exp(suffix[k]), basis)
        pred = predict(cef, ensemble, k)
        se = fitted_se(cef, ensemble, k)
        per_node_max[k] = float(np.max(pred))
        floor = 1e-12 * max(1.0, bound)
        worst = max(worst, float(np.max((pred - bound) / np.maximum(se, floor))))
    return JohnNirenbergReport(
        applicable=True, norm_sq=est.norm_sq, bound=bound,
        per_node_max=per_node_max, worst_violation_se=worst,
        passed=bool(worst <= 3.0),
    )


@dataclass(frozen=True)
class ReverseHolderReport:
    applicable: bool
    p: float
    threshold: float
    norm: float
    c_p: float
    per_node_max: np.ndarray
    node_uniform_spread: float
    passed: Optional[bool]
    note: str = ""
    envelope_se: float = math.nan

    @property
    def status(self) -> str:
        if not self.applicable:
            return "inapplicable"
        return "pass" if self.passed else "fail"


def reverse_holder_check(ensemble: PathEnsemble, integrand, p: float,
                         basis: RegressionBasis,
                         weights: Optional[np.ndarray] = None) -> ReverseHolderReport:
    """Empirical reverse-Holder constant for the Doleans exponential.

    Applicable while the BMO norm stays below the threshold function at p
    (otherwise the report says so).  Returns the node-uniform empirical
    constant (max over nodes and paths of the smoothed p-th conditional
    moment of E(M)_node^T) and its spread across nodes as a uniformity
    diagnostic; ``passed`` records that every node estimate came out
    finite.
    """
    if p <= 1.0:
        raise BmoError("reverse-Holder exponent must exceed 1")
    vals = _integrand_values(ensemble, integrand)
    est = bmo2_norm(ensemble, vals, basis, weights=weights)
    norm = math.sqrt(est.norm_sq)
    threshold = capital_phi(p)
    if norm >= threshold:
        return ReverseHolderReport(
            applicable=False, p=p, threshold=threshold, norm=norm, c_p=math.nan,
            per_node_max=np.array([]), node_uniform_spread=math.nan, passed=None,
            note=f"norm {norm:.4f} >= capital_phi({p:.4g}) = {threshold:.4f}",
        )
    log_suffix = _log_doleans_suffix(ensemble, vals)
    per_node = _moment_envelope(ensemble, log_suffix, p, basis, weights)
    c_p = float(np.max(per_node))
    spread = float(np.max(per_node) - np.min(per_node))
    # sampling error of the envelope: fitted se at the argmax path of the
    # argmax node (the virtual last node is exact, se 0)
    k_star = int(np.argmax(per_node))
    if k_star == per_node.shape[0] - 1:
        env_se = 0.0
    else:
        target = np.exp(p * log_suffix[k_star])
        if weights is None:
            cef = fit(ensemble, k_star, target, basis)
        else:
            cef = weighted_fit(ensemble, k_star, target, weights, basis)
        pred = predict(cef, ensemble, k_star)
        env_se = float(fitted_se(cef, ensemble, k_star)[int(np.argmax(pred))])
    return ReverseHolderReport(applicable=True, p=p, threshold=threshold,
                               norm=norm, c_p=c_p, per_node_max=per_node,
                               node_uniform_spread=spread,
                               passed=bool(np.isfinite(per_node).all()),
                               envelope_se=env_se)


def _moment_envelope(ensemble: PathEnsemble, log_suffix: np.ndarray, p: float,
                     basis: RegressionBasis,
                     weights: Optional[np.ndarray]) -> np.ndarray:
    """Per-node smoothed ess-sup of exp(p * log_suffix)."""
    n_nodes = log_suffix.shape[0]
    out = np.zeros(n_nodes)
    out[-1] = 1.0
    for k in range(n_nodes - 1):
        target = np.exp(p * log_suffix[k])
        if weights is None:
            cef = fit(ensemble, k, target, basis)
        else:
            cef = weighted_fit(ensemble, k, target, weights, basis)
        out[k] = float(np.max(predict(cef, ensemble, k)))
    return out


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


def bmo_p_binned(ensemble: PathEnsemble, integrand, p: float, n_bins: int = 16,
                 weights: Optional[np.ndarray] = None) -> float:
    """BMO_p norm estimate via quantile-bin conditional moments in log space.

    Stable for arbitrarily large p (degrades gracefully to a sup-based
    estimate), which the norm-equivalence diagnostics need.
    """
    if p <= 0:
        raise BmoError("p must be positive")
    vals = _integrand_values(ensemble, integrand)
    suffix = _suffix_qv(ensemble, vals)
    logw = np.zeros(ensemble.n_paths) if weights is None else np.log(np.asarray(weights, float))
    half_p = p / 2.0
    best = 0.0
    with np.errstate(divide="ignore"):
        log_suffix = np.log(suffix)
    for k in range(suffix.shape[0] - 1):
        coord = ensemble.values[:, k, 0]
        edges = np.quantile(coord, np.arange(1, n_bins) / n_bins)
        idx = np.searchsorted(edges, coord, side="right")
        for b in range(n_bins):
            mask = idx == b
            if not mask.any():
                continue
            num = _logsumexp(half_p * log_suffix[k][mask] + logw[mask])
            den = _logsumexp(logw[mask])
            if not np.isfinite(num):
                continue
            best = max(best, math.exp((num - den) / half_p))
    return math.sqrt(best)


def make_battery(ensemble: PathEnsemble, count: int = 8, seed: int = 1234) -> list:
    """Deterministic battery of adapted test integrands (bounded, diverse)."""
    steps, n_paths, d = ensemble.grid.steps, ensemble.n_paths, ensemble.d
    w0 = ensemble.values[:, :-1, 0].T  # (steps, n_paths)
    battery = []

    def lift(scalar_field: np.ndarray) -> np.ndarray:
        out = np.zeros((steps, n_paths, d))
        out[:, :, 0] = scalar_field
        return out

    battery.append(lift(np.full((steps, n_paths), 0.4)))
    battery.append(np.full((steps, n_paths, d), 0.3 / math.sqrt(d)))
    battery.append(lift(0.45 * np.sign(w0)))
    ramp = 0.5 * (np.arange(steps) + 1.0) / steps
    battery.append(lift(np.tile(ramp[:, None], (1, n_paths))))
    battery.append(lift(0.6 * (np.abs(w0) < 1.0)))
    rng = np.random.Generator(np.random.Philox(key=seed))
    while len(battery) < count:
        amp = 0.2 + 0.4 * rng.random()
        freq = 0.5 + 2.0 * rng.random()
        phase = 2.0 * math.pi * rng.random()
        battery.append(lift(amp * np.cos(freq * w0 + phase)))
    return battery[:count]


def estimate_norm_equivalence(ensemble: PathEnsemble, integrands: Sequence, p: float,
                              n_bins: int = 16,
                              weights: Optional[np.ndarray] = None) -> float:
    """Empirical norm-equivalence constant L_p = max ratio BMO_p / BMO_2.

    A diagnostic estimated over a battery of test martingales, never a
    certified constant.  Both norms use the same binned estimator, so the
    ratio is >= 1 for p >= 2 by Jensen's inequality.
    """
    best = 1.0
    for integrand in integrands:
        denom = bmo_p_binned(ensemble, integrand, 2.0, n_bins, weights)
        if denom == 0.0:
            continue
        best = max(best, bmo_p_binned(ensemble, integrand, p, n_bins, weights) / denom)
    return best


@dataclass(frozen=True)
class GirsanovBounds:
    """Constant chain for the two-sided BMO equivalence under a measure change."""

    K: float
    p: float
    q: float
    c_p: float
    K_bar: float
    p_bar: float
    q_bar: float
    c_p_bar: float
    l_2q: float
    l_2q_bar: float
    c1: float
    c2: float


@dataclass(frozen=True)
class GirsanovReport:
    applicable: bool
    n_norm: float
    m_norm_sq: float
    m_tilde_norm_sq: float
    ratio: float
    within: Optional[bool]
    weight_mean: float
    note: str = ""

    @property
    def status(self) -> str:
        if not self.applicable:
            return "inapplicable"
        return "pass" if self.within else "fail"


def girsanov_bmo_equivalence(ensemble: PathEnsemble, m_integrand, n_integrand,
                             threshold_k: float, basis: RegressionBasis, *,
                             n_bins: int = 16,
                             battery: Optional[Sequence] = None):
    """Two-sided norm equivalence under the measure dP~ = E(N) dP.

    Returns (GirsanovReport, GirsanovBounds); the bounds are None when the
    change-of-measure integrand exceeds the threshold K and the report is
    marked inapplicable.  The drift-adjusted martingale keeps the quadratic
    variation of M, so its norm under the new measure is the importance-
    weighted BMO norm of M's integrand.  The (c1, c2) multiples follow the
    Holder/reverse-Holder chain, with the norm-equivalence constants
    estimated empirically over a battery that includes M itself.
    """
    m_vals = _integrand_values(ensemble, m_integrand)
    n_vals = _integrand_values(ensemble, n_integrand)

    n_norm = math.sqrt(bmo2_norm(ensemble, n_vals, basis).norm_sq)
    if n_norm > threshold_k:
        report = GirsanovReport(
            applicable=False, n_norm=n_norm, m_norm_sq=math.nan,
            m_tilde_norm_sq=math.nan, ratio=math.nan, within=None,
            weight_mean=math.nan,
            note=f"change-of-measure norm {n_norm:.4f} exceeds K = {threshold_k}",
        )
        return report, None

    p = find_p_for_threshold(threshold_k)
    q = p / (p - 1.0)
    rh = reverse_holder_check(ensemble, n_vals, p, basis)
    # rh is applicable because capital_phi(p) > K >= n_norm by construction
    c_p = max(rh.c_p, 1.0)

    weights = stochastic_exponential(ensemble, n_vals)
    if not np.isfinite(weights).all() or np.any(weights <= 0):
        raise BmoError("degenerate Girsanov weights")
    weight_mean = float(weights.mean())

    m_norm_sq = bmo2_norm(ensemble, m_vals, basis).norm_sq
    mt_norm_sq = bmo2_norm(ensemble, m_vals, basis, weights=weights).norm_sq

    batt = list(battery) if battery is not None else make_battery(ensemble)
    batt_plus = batt + [m_vals]
    l_2q = estimate_norm_equivalence(ensemble, batt_plus, 2.0 * q, n_bins)
    c2 = l_2q * c_p ** (1.0 / (2.0 * p))

    k_bar = math.sqrt(2.0 * (q - 1.0) * math.log(c_p + 1.0))
    p_bar = find_p_for_threshold(k_bar)
    q_bar = p_bar / (p_bar - 1.0)

    # inverse density: 1/E(N) is the Doleans exponential of the adjusted -N
    log_suffix_inv = -_log_doleans_suffix(ensemble, n_vals)
    c_p_bar = max(float(np.max(_moment_envelope(
        ensemble, log_suffix_inv, p_bar, basis, weights))), 1.0)
    l_2q_bar = estimate_norm_equivalence(ensemble, batt_plus, 2.0 * q_bar, n_bins,
                                         weights=weights)
    c1 = 1.0 / (l_2q_bar * c_p_bar ** (1.0 / (2.0 * p_bar)))

    if m_norm_sq > 0:
        ratio = math.sqrt(mt_norm_sq / m_norm_sq)
        within = bool(c1 * math.sqrt(m_norm_sq) <= math.sqrt(mt_norm_sq)
                      <= c2 * math.sqrt(m_norm_sq))
    else:
        ratio = 1.0
        within = True

    bounds = GirsanovBounds(K=threshold_k, p=p, q=q, c_p=c_p, K_bar=k_bar,
                            p_bar=p_bar, q_bar=q_bar, c_p_bar=c_p_bar,
                            l_2q=l_2q, l_2q_bar=l_2q_bar, c1=c1, c2=c2)
    report = GirsanovReport(applicable=True, n_norm=n_norm, m_norm_sq=m_norm_sq,
                            m_tilde_norm_sq=mt_norm_sq, ratio=ratio,
                            within=within, weight_mean=weight_mean)
    return report, bounds
