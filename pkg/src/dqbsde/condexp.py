"""Regression estimators for conditional expectations on a path ensemble.

Conditional expectations given the state at a grid node are estimated by
least squares on a finite basis of functions of a low-dimensional Markov
state (by default the Brownian values at the node).  The estimator is a
linear smoother, so estimating a constant returns that constant, and the
map targets -> predictions is exactly linear.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .paths import PathEnsemble

__all__ = [
    "RegressionError",
    "RegressionBasis",
    "CondExpEstimator",
    "fit",
    "weighted_fit",
    "predict",
    "fitted_se",
    "smoothed_ess_sup",
]


class RegressionError(ValueError):
    """Invalid regression inputs or an unusable design matrix."""


def _brownian_state(ensemble: PathEnsemble, node: int) -> np.ndarray:
    return ensemble.state(node)


@dataclass(frozen=True)
class RegressionBasis:
    """Basis specification for conditional-expectation regression.

    Parameters
    ----------
    kind : str
        "poly" for multivariate monomials of total degree <= order, or
        "bins" for indicator functions of quantile bins of the first state
        coordinate.
    order : int
        Total degree (poly, >= 0) or bin count (bins, >= 1).
    state_map : callable, optional
        (ensemble, node) -> (n_paths, k) state array.  Defaults to the
        Brownian values at the node.
    ridge : float
        Trace-scaled ridge factor; the regularizer added to the Gram matrix
        is ridge * trace(X'X)/p.  Zero disables regularization, in which
        case a rank-deficient design raises instead of being silently
        resolved to a minimum-norm solution.
    """

    kind: str = "poly"
    order: int = 3
    state_map: Optional[Callable] = None
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("poly", "bins"):
            raise RegressionError(f"unknown basis kind {self.kind!r}")
        if self.kind == "poly" and self.order < 0:
            raise RegressionError("poly order must be >= 0")
        if self.kind == "bins" and self.order < 1:
            raise RegressionError("bin count must be >= 1")
        if self.ridge < 0:
            raise RegressionError("ridge must be >= 0")

    def state(self, ensemble: PathEnsemble, node: int) -> np.ndarray:
        mapper = self.state_map or _brownian_state
        s = np.asarray(mapper(ensemble, node), dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] != ensemble.n_paths:
            raise RegressionError(f"state map returned shape {s.shape}")
        if not np.isfinite(s).all():
            raise RegressionError("state map returned non-finite values")
        return s


def _poly_exponents(k: int, degree: int) -> list[tuple[int, ...]]:
    combos: list[tuple[int, ...]] = []
    for deg in range(degree + 1):
        combos.extend(itertools.combinations_with_replacement(range(k), deg))
    return combos


def _design(basis: RegressionBasis, state: np.ndarray,
            bin_edges: Optional[np.ndarray]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    n = state.shape[0]
    if basis.kind == "poly":
        combos = _poly_exponents(state.shape[1], basis.order)
        x = np.ones((n, len(combos)))
        for col, combo in enumerate(combos):
            for idx in combo:
                x[:, col] *= state[:, idx]
        return x, None
    # quantile bins on the first state coordinate; edges are frozen at fit
    # time so predictions reuse the fitted partition
    coord = state[:, 0]
    if bin_edges is None:
        qs = np.arange(1, basis.order) / basis.order
        bin_edges = np.quantile(coord, qs)
    idx = np.searchsorted(bin_edges, coord, side="right")
    x = np.zeros((n, basis.order))
    x[np.arange(n), idx] = 1.0
    return x, bin_edges


@dataclass(frozen=True)
class CondExpEstimator:
    """Fitted linear smoother for one grid node."""

    basis: RegressionBasis
    node: int
    coef: np.ndarray            # (p, m)
    bin_edges: Optional[np.ndarray]
    gram_inv: np.ndarray        # inverse of the regularized Gram matrix
    resid_scale: np.ndarray     # (m,) residual standard deviation per target
    n_fit: int
    single: bool                # targets were 1-d


def _validate_targets(ensemble: PathEnsemble, targets: np.ndarray) -> tuple[np.ndarray, bool]:
    y = np.asarray(targets, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != ensemble.n_paths:
        raise RegressionError(f"targets shape {np.shape(targets)} does not match ensemble")
    if not np.isfinite(y).all():
        raise RegressionError("targets contain non-finite values")
    return y, single


def _solve(x: np.ndarray, y: np.ndarray, w: Optional[np.ndarray],
           ridge: float) -> tuple[np.ndarray, np.ndarray]:
    xw = x if w is None else x * w[:, None]
    gram = xw.T @ x
    p = gram.shape[0]
    lam = ridge * np.trace(gram) / p if ridge > 0 else 0.0
    if lam == 0.0 and np.linalg.matrix_rank(x) < p:
        raise RegressionError(
            "rank-deficient design with zero ridge; raise the ridge or shrink the basis"
        )
    a = gram + lam * np.eye(p)
    try:
        gram_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"singular regularized Gram matrix: {exc}") from exc
    coef = gram_inv @ (xw.T @ y)
    return coef, gram_inv


def _fit(ensemble: PathEnsemble, node: int, targets, basis: RegressionBasis,
         weights: Optional[np.ndarray]) -> CondExpEstimator:
    if not (0 <= node <= ensemble.grid.steps):
        raise RegressionError(f"node {node} outside grid")
    y, single = _validate_targets(ensemble, targets)
    state = basis.state(ensemble, node)
    x, edges = _design(basis, state, None)
    coef, gram_inv = _solve(x, y, weights, basis.ridge)
    resid = y - x @ coef
    if weights is None:
        resid_scale = resid.std(axis=0)
    else:
        wm = weights / weights.mean()
        resid_scale = np.sqrt(np.mean(wm[:, None] * resid**2, axis=0))
    return CondExpEstimator(
        basis=basis, node=node, coef=coef, bin_edges=edges,
        gram_inv=gram_inv, resid_scale=resid_scale,
        n_fit=ensemble.n_paths, single=single,
    )


def fit(ensemble: PathEnsemble, node: int, targets, basis: RegressionBasis) -> CondExpEstimator:
    """Least-squares projection of per-path targets on the node basis.

    Targets may be (n_paths,) or (n_paths, m); columns are fitted jointly
    against one design matrix.
    """
    return _fit(ensemble, node, targets, basis, None)


def weighted_fit(ensemble: PathEnsemble, node: int, targets, weights,
                 basis: RegressionBasis) -> CondExpEstimator:
    """Importance-weighted projection estimating a changed-measure
    conditional expectation.

    With weights equal to the Doleans density of the new measure on the
    horizon, the fitted function estimates the conditional expectation
    under that measure given the node state.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (ensemble.n_paths,):
        raise RegressionError(f"weights shape {w.shape} does not match ensemble")
    if not np.isfinite(w).all() or np.any(w <= 0):
        raise RegressionError("weights must be positive and finite")
    return _fit(ensemble, node, targets, basis, w)


def predict(estimator: CondExpEstimator, ensemble: PathEnsemble, node: int) -> np.ndarray:
    """Evaluate the fitted conditional-expectation function at a node's states."""
    if node != estimator.node:
        raise RegressionError(
            f"estimator was fitted at node {estimator.node}, asked to predict at {node}"
        )
    state = estimator.basis.state(ensemble, node)
    x, _ = _design(estimator.basis, state, estimator.bin_edges)
    out = x @ estimator.coef
    return out[:, 0] if estimator.single else out


def fitted_se(estimator: CondExpEstimator, ensemble: PathEnsemble, node: int) -> np.ndarray:
    """Standard error of the fitted values (per path, per target).

    Uses the leverage of each evaluation point against the regularized Gram
    matrix; a Monte Carlo error scale for the smoothed predictions.
    """
    if node != estimator.node:
        raise RegressionError("fitted_se must be evaluated at the fitting node")
    state = estimator.basis.state(ensemble, node)
    x, _ = _design(estimator.basis, state, estimator.bin_edges)
    leverage = np.einsum("ij,jk,ik->i", x, estimator.gram_inv, x)
    leverage = np.clip(leverage, 0.0, None)
    se = np.sqrt(leverage)[:, None] * estimator.resid_scale[None, :]
    return se[:, 0] if estimator.single else se


def smoothed_ess_sup(ensemble: PathEnsemble, node: int, targets, basis: RegressionBasis,
                     weights: Optional[np.ndarray] = None) -> float:
    """Essential supremum proxy: max over paths of the smoothed predictions."""
    if weights is None:
        est = fit(ensemble, node, targets, basis)
    else:
        est = weighted_fit(ensemble, node, targets, weights, basis)
    return float(np.max(predict(est, ensemble, node)))
