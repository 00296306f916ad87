"""Closed-form constants for the local contraction argument and the global
uniform bound.

Everything here is deterministic arithmetic: the exponential test function
and its derivatives, the reverse-Holder threshold function, the certified
local interval length with its quadratic root, and the uniform bound used
for interval stitching.  Quantities that live in exponentials are guarded;
an exponent outside double range raises a structured error instead of
silently saturating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

__all__ = [
    "ParameterError",
    "ParameterOverflowError",
    "ThresholdError",
    "phi",
    "phi_prime",
    "phi_double_prime",
    "capital_phi",
    "find_p_for_threshold",
    "reverse_holder_constant",
    "delta_alpha",
    "StructuralConstants",
    "LocalSolveParameters",
    "local_parameters",
    "GlobalSolveParameters",
    "global_parameters",
]

# largest exponent we allow into math.exp; stays clear of the float64
# overflow threshold (~709.78)
_MAX_EXPONENT = 700.0
_MIN_LOG = -744.0


class ParameterError(ValueError):
    """Inadmissible structural constants or a failed derived-constant invariant."""


class ParameterOverflowError(ParameterError):
    """A derived constant leaves double-precision range."""

    def __init__(self, quantity: str, exponent: float):
        self.quantity = quantity
        self.exponent = exponent
        super().__init__(
            f"{quantity} has natural-log magnitude {exponent:.3g}, "
            f"outside double-precision range"
        )


class ThresholdError(ParameterError):
    """No representable argument satisfies the requested threshold."""


def phi(y, gamma: float):
    """Exponential test function (exp(g|y|) - g|y| - 1)/g^2; phi(0) = 0."""
    a = gamma * np.abs(y)
    return (np.expm1(a) - a) / gamma**2


def phi_prime(y, gamma: float):
    """First derivative of :func:`phi`; odd, sign(y)(exp(g|y|)-1)/g."""
    return np.sign(y) * np.expm1(gamma * np.abs(y)) / gamma


def phi_double_prime(y, gamma: float):
    """Second derivative exp(g|y|); satisfies phi'' - g|phi'| = 1."""
    return np.exp(gamma * np.abs(y))


def capital_phi(x):
    """Reverse-Holder threshold function on (1, inf).

    Continuous and decreasing, diverging at 1+ and vanishing at infinity.
    Evaluated as t/(1 + sqrt(1+t)) with t = x^-2 * log1p(1/(2(x-1))), which
    is algebraically sqrt(1+t) - 1 but avoids cancellation for large x and
    stays positive everywhere on the domain.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 1.0):
        raise ParameterError("capital_phi is defined for arguments > 1")
    t = np.log1p(1.0 / (2.0 * (arr - 1.0))) / arr**2
    out = t / (1.0 + np.sqrt(1.0 + t))
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def find_p_for_threshold(threshold: float, margin: float = 1e-3) -> float:
    """Smallest-practical p > 1 with capital_phi(p) > threshold.

    Bisection solves capital_phi(p) = threshold*(1+margin) on the decreasing
    branch; the returned p always satisfies the strict inequality.
    """
    if not threshold > 0:
        raise ParameterError("threshold must be positive")
    target = threshold * (1.0 + margin)
    lo = float(np.nextafter(1.0, 2.0))
    if capital_phi(lo) <= target:
        raise ThresholdError(
            f"threshold {threshold:.6g} exceeds the largest capital_phi value "
            f"representable in double precision ({capital_phi(lo):.6g})"
        )
    hi = 2.0
    while capital_phi(hi) >= target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if capital_phi(mid) > target:
            lo = mid
        else:
            hi = mid
    return lo


def reverse_holder_constant(p: float, norm: float) -> float:
    """Explicit admissible constant for the conditional p-th moment of a
    stochastic exponential whose integrand martingale has BMO norm below
    capital_phi(p).

    The John-Nirenberg argument yields 2/(1 - k) with
    k = (2(p-1)/(2p-1)) * exp(p^2 (norm^2 + 2 norm)); the threshold
    condition norm < capital_phi(p) is algebraically identical to k < 1.
    """
    if p <= 1.0:
        raise ParameterError("exponent must exceed 1")
    if norm < 0.0:
        raise ParameterError("norm must be nonnegative")
    exponent = p * p * (norm * norm + 2.0 * norm)
    if exponent > _MAX_EXPONENT:
        raise ParameterOverflowError("moment-constant factor", exponent)
    k = 2.0 * (p - 1.0) / (2.0 * p - 1.0) * math.exp(exponent)
    if k >= 1.0:
        raise ParameterError(
            f"norm {norm:.6g} is not below capital_phi({p:.6g}) = "
            f"{capital_phi(p):.6g}; no finite moment constant"
        )
    return 2.0 / (1.0 - k)


def delta_alpha(gamma: float, delta: float, alpha: float) -> float:
    """Auxiliary rate constant 0.5*(1-a) * (g * delta^{-(1+a)/2})^{2/(1-a)}."""
    if not (0.0 <= alpha < 1.0):
        raise ParameterError("alpha must lie in [0, 1)")
    if delta <= 0 or gamma <= 0:
        raise ParameterError("gamma and delta must be positive")
    return 0.5 * (1.0 - alpha) * gamma ** (2.0 / (1.0 - alpha)) \
        * delta ** (-(1.0 + alpha) / (1.0 - alpha))


@dataclass(frozen=True)
class StructuralConstants:
    """Structural constants of a generator system.

    growth_c bounds the non-quadratic growth and the Lipschitz moduli;
    gamma is the quadratic coefficient of the own-gradient part; alpha in
    [0, 1) is the gradient power of the coupling growth; n and d are the
    number of equations and Brownian coordinates; horizon is the terminal
    time and xi_bound the sup norm of the terminal data.
    """

    growth_c: float
    gamma: float
    alpha: float
    n: int
    d: int
    horizon: float
    xi_bound: float

    def __post_init__(self) -> None:
        if not self.growth_c >= 0 or not math.isfinite(self.growth_c):
            raise ParameterError("growth_c must be finite and >= 0")
        if not self.gamma > 0:
            raise ParameterError("gamma must be positive")
        if not (0.0 <= self.alpha < 1.0):
            raise ParameterError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n < 1 or self.d < 1:
            raise ParameterError("n and d must be >= 1")
        if not self.horizon > 0:
            raise ParameterError("horizon must be positive")
        if not self.xi_bound >= 0:
            raise ParameterError("xi_bound must be >= 0")


@dataclass(frozen=True)
class LocalSolveParameters:
    """Certified constants for the local fixed-point solve.

    delta splits the quadratic-variation budget; c_delta caps exponential
    moments of the frozen coupling; beta, mu1, mu2, mu aggregate the Young
    splits of the coupling growth; epsilon is the certified interval
    length; ball_radius_sq is the smaller root of the interval quadratic
    and bounds the gradient-part BMO norm on the invariant ball.
    """

    constants: StructuralConstants
    delta: float
    c_delta: float
    log_c_delta: float
    beta: float
    mu1: float
    mu2: float
    mu: float
    lin_coef: float              # growth_c * n * gamma^-2 * exp(gamma*xi_bound)
    drift_coef: float            # mu * c_delta * exp(3*n*gamma*xi_bound/(1-alpha))
    epsilon_lipschitz: float
    epsilon_exponential: float
    epsilon: float
    epsilon_branch: str
    discriminant: float
    ball_radius_sq: float
    residual_weight: float       # 1 - delta * ball_radius_sq
    sup_exp_cap: float
    log_sup_exp_cap: float
    y_sup_bound: float

    def balance_residual(self) -> float:
        """Relative gap in the root identity tying the ball radius to the
        linear, drift, and quadratic budgets; ~1e-15 for valid parameters."""
        lhs = self.lin_coef + self.drift_coef * self.epsilon / self.residual_weight \
            + self.ball_radius_sq / 4.0
        rhs = self.ball_radius_sq / 2.0
        return abs(lhs - rhs) / max(1.0, abs(rhs))


def _checked_exp(log_value: float, quantity: str) -> float:
    if log_value > _MAX_EXPONENT:
        raise ParameterOverflowError(quantity, log_value)
    if log_value < _MIN_LOG:
        raise ParameterOverflowError(quantity, log_value)
    return math.exp(log_value)


def local_parameters(sc: StructuralConstants) -> LocalSolveParameters:
    """Derive the certified local-solve constants from structural data.

    Raises
    ------
    ParameterError
        If growth_c is zero (the split weight divides by it) or a derived
        invariant fails.
    ParameterOverflowError
        If any exponential leaves double range (carries the exponent).
    """
    if sc.growth_c <= 0:
        raise ParameterError("local parameters require growth_c > 0")
    c, g, a = sc.growth_c, sc.gamma, sc.alpha
    n, t, xi = sc.n, sc.horizon, sc.xi_bound

    delta = g**2 * _checked_exp(-g * xi, "terminal weight") / (8.0 * c * n)
    log_c_delta = 6.0 * g * c * t / (1.0 - a) \
        + 1.5 * g * c * (n / delta) ** ((1.0 + a) / 2.0) * t
    c_delta = _checked_exp(log_c_delta, "exponential moment cap")

    beta = 0.5 * (1.0 - a) * c ** (2.0 / (1.0 - a)) \
        * (2.0 * (1.0 + a)) ** ((1.0 + a) / (1.0 - a))
    mu1 = (1.0 - a) * (1.0 + (1.0 - a) / ((1.0 + a) * g))
    mu2 = (1.0 + a) * (1.0 + (1.0 - a) / ((1.0 + a) * g))
    mu = (beta + c * mu1) * g ** (2.0 / (a - 1.0)) + c * mu2

    lin_coef = c * n * g**-2 * _checked_exp(g * xi, "terminal weight")
    drift_exponent = 3.0 * n * g * xi / (1.0 - a)
    log_drift = math.log(mu) + log_c_delta + drift_exponent
    drift_coef = _checked_exp(log_drift, "coupling drift coefficient")

    eps_lip = 1.0 / (3.0 * n * c)
    log_eps_exp = math.log(c * n / (8.0 * mu)) - 2.0 * math.log(g) \
        + (1.0 - 3.0 * n / (1.0 - a)) * g * xi - log_c_delta
    eps_exp = _checked_exp(log_eps_exp, "certified interval length")
    if eps_exp <= eps_lip:
        epsilon, branch = eps_exp, "exponential-cap"
    else:
        epsilon, branch = eps_lip, "lipschitz-cap"

    lin_term = 4.0 * lin_coef * delta
    if branch == "exponential-cap":
        # the exponential cap is exactly the value that collapses the
        # discriminant to a double root: eps = lin_coef/(8*drift_coef) and
        # 4*lin_coef*delta = 1/2 by the choice of delta, so the identity
        # holds without float cancellation
        discriminant = 0.0
    else:
        # assembled in log space: c_delta alone may sit near the overflow edge
        prod = math.exp(math.log(16.0 * mu * delta) + log_c_delta
                        + drift_exponent + math.log(epsilon))
        discriminant = (1.0 - lin_term) ** 2 - prod
        if discriminant < -1e-12:
            raise ParameterError(f"negative discriminant {discriminant}")
        discriminant = max(discriminant, 0.0)

    ball = (1.0 + lin_term - math.sqrt(discriminant)) / (2.0 * delta)
    residual_weight = 1.0 - delta * ball
    if not residual_weight > 0:
        raise ParameterError(f"root weight 1 - delta*A = {residual_weight} not positive")
    if ball > 3.0 / (4.0 * delta) * (1.0 + 1e-12):
        raise ParameterError("ball radius exceeds its closed-form cap")

    log_sup_cap = log_c_delta + drift_exponent - math.log(residual_weight)
    sup_exp_cap = _checked_exp(log_sup_cap, "sup exponential cap")
    y_sup_bound = (1.0 - a) / (2.0 * n * g) * log_sup_cap

    params = LocalSolveParameters(
        constants=sc, delta=delta, c_delta=c_delta, log_c_delta=log_c_delta,
        beta=beta, mu1=mu1, mu2=mu2, mu=mu, lin_coef=lin_coef,
        drift_coef=drift_coef, epsilon_lipschitz=eps_lip,
        epsilon_exponential=eps_exp, epsilon=epsilon, epsilon_branch=branch,
        discriminant=discriminant, ball_radius_sq=ball,
        residual_weight=residual_weight, sup_exp_cap=sup_exp_cap,
        log_sup_exp_cap=log_sup_cap, y_sup_bound=y_sup_bound,
    )
    res = params.balance_residual()
    if res > 1e-10:
        raise ParameterError(f"root identity violated, relative residual {res:.3e}")
    return params


@dataclass(frozen=True)
class GlobalSolveParameters:
    """Uniform bound and stitching data for global solves (alpha = 0)."""

    constants: StructuralConstants
    c_eff: float
    y_uniform_bound: float       # bound on |Y_t| over the whole horizon
    certified_eta: Optional[float]
    certified_eta_failure: Optional[str]
    z_bmo_cap: float
    z_bmo_cap_note: Optional[str]

    def uniform_bound(self, t: float) -> float:
        """Time-dependent uniform bound (c+1) exp((c+1)^2 (T-t)/2)."""
        rem = max(self.constants.horizon - t, 0.0)
        return (self.c_eff + 1.0) * math.exp((self.c_eff + 1.0) ** 2 * rem / 2.0)


def global_parameters(sc: StructuralConstants) -> GlobalSolveParameters:
    """Global-solve constants: uniform bound, certified segment length,
    closed-form cap on the gradient BMO norm.

    The effective growth constant is max(growth_c, xi_bound), so the
    uniform bound always dominates the terminal data.
    """
    if sc.alpha != 0.0:
        raise ParameterError("global parameters are derived for alpha = 0")
    c_eff = max(sc.growth_c, sc.xi_bound)
    lam_exp = (c_eff + 1.0) ** 2 * sc.horizon / 2.0
    lam = (c_eff + 1.0) * _checked_exp(lam_exp, "uniform bound")

    note = None
    phi_p_exp = sc.gamma * lam
    if phi_p_exp > _MAX_EXPONENT:
        cap = math.inf
        note = "cap not representable: phi'(bound) exponent too large"
    else:
        pp = phi_prime(lam, sc.gamma)
        cap = sc.growth_c * sc.n * pp * math.sqrt(sc.horizon) + math.sqrt(
            2.0 * sc.n * phi(sc.xi_bound, sc.gamma)
            + 2.0 * sc.growth_c * sc.n * pp * (2.0 + lam) * sc.horizon
        )

    eta: Optional[float] = None
    eta_failure: Optional[str] = None
    try:
        eta = local_parameters(replace(sc, xi_bound=lam)).epsilon
    except ParameterError as exc:
        eta_failure = str(exc)

    return GlobalSolveParameters(
        constants=sc, c_eff=c_eff, y_uniform_bound=lam,
        certified_eta=eta, certified_eta_failure=eta_failure,
        z_bmo_cap=cap, z_bmo_cap_note=note,
    )
