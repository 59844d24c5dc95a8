"""Generalized Pareto distribution (GPD) primitives.

Shape convention: for scale ``sigma > 0`` and shape ``epsilon``,

    H(x) = 1 - (1 + epsilon * x / sigma) ** (-1 / epsilon)    (epsilon != 0)
    H(x) = 1 - exp(-x / sigma)                                (epsilon == 0)

supported on x >= 0 (and x <= -sigma/epsilon when epsilon < 0).  A positive
shape gives a polynomial (heavy) tail, zero an exponential one, negative a
bounded one.  All functions are pure; random draws come from a caller-owned
``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this |epsilon| the exponential branch is used; the power form
# (1 + eps*x/sigma)**(-1/eps) loses all precision to cancellation there.
EPSILON_SWITCH_TOL = 1e-8


@dataclass(frozen=True)
class GpdParams:
    """Scale and shape of a GPD (same units as the modeled exceedances)."""

    sigma: float
    epsilon: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite, got {self.epsilon}")

    @property
    def has_finite_mean(self) -> bool:
        return self.epsilon < 1.0

    @property
    def support_upper(self) -> float:
        """Upper end of the support (finite only for negative shape)."""
        if self.epsilon < 0.0:
            return -self.sigma / self.epsilon
        return math.inf


def _check_support(x: np.ndarray, p: GpdParams) -> None:
    if np.any(x < 0.0):
        raise ValueError("GPD support is x >= 0; got negative values")
    if p.epsilon < 0.0 and np.any(x > p.support_upper):
        raise ValueError(
            f"x outside bounded support [0, {p.support_upper}] for epsilon={p.epsilon}"
        )


def gpd_cdf(x, p: GpdParams):
    """CDF H(x).  Accepts a scalar or array; raises on out-of-support input."""
    x_arr = np.asarray(x, dtype=float)
    _check_support(x_arr, p)
    if abs(p.epsilon) < EPSILON_SWITCH_TOL:
        out = 1.0 - np.exp(-x_arr / p.sigma)
    else:
        base = 1.0 + p.epsilon * x_arr / p.sigma
        # base == 0 only at the upper support end for epsilon < 0, where H = 1
        base = np.maximum(base, 0.0)
        out = 1.0 - base ** (-1.0 / p.epsilon)
    return out if np.ndim(x) else float(out)


def gpd_quantile(pr, p: GpdParams):
    """Inverse CDF.  Defined for probabilities in [0, 1)."""
    pr_arr = np.asarray(pr, dtype=float)
    if np.any(pr_arr < 0.0) or np.any(pr_arr >= 1.0):
        raise ValueError("probability must lie in [0, 1)")
    log_tail = np.log1p(-pr_arr)
    if abs(p.epsilon) < EPSILON_SWITCH_TOL:
        out = -p.sigma * log_tail
    else:
        # expm1 form of (1-pr)^(-eps) - 1, exact down to tiny shapes
        out = (p.sigma / p.epsilon) * np.expm1(-p.epsilon * log_tail)
    return out if np.ndim(pr) else float(out)


def gpd_sample(rng: np.random.Generator, p: GpdParams, m: int) -> np.ndarray:
    """Draw ``m`` i.i.d. values by inverse-CDF transform of uniforms."""
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    u = rng.random(m)
    return np.asarray(gpd_quantile(u, p), dtype=float)


def gpd_mean(p: GpdParams) -> float:
    """Expected value sigma / (1 - epsilon); finite only for epsilon < 1."""
    if not p.has_finite_mean:
        raise ValueError(f"mean is infinite for epsilon={p.epsilon} >= 1")
    return p.sigma / (1.0 - p.epsilon)


def _loglik_terms(xs, p: GpdParams) -> np.ndarray:
    x = np.asarray(xs, dtype=float)
    if x.ndim != 1:
        x = x.reshape(-1)
    if np.any(x < 0.0):
        raise ValueError("log-likelihood inputs must be >= 0")
    base = 1.0 + p.epsilon * x / p.sigma
    if np.any(base <= 0.0):
        # Impossible for epsilon >= 0; for negative shape this means the
        # caller passed values outside the support, which is a bug upstream.
        raise ValueError("1 + epsilon*x/sigma <= 0: value outside GPD support")
    return base


def gpd_log_likelihood(xs, p: GpdParams) -> float:
    """Summed log density of ``xs`` under the GPD."""
    base = _loglik_terms(xs, p)
    n = base.size
    if abs(p.epsilon) < EPSILON_SWITCH_TOL:
        x = np.asarray(xs, dtype=float).reshape(-1)
        return float(-n * math.log(p.sigma) - np.sum(x) / p.sigma)
    return float(
        -n * math.log(p.sigma) - (1.0 / p.epsilon + 1.0) * np.sum(np.log(base))
    )


def gpd_loglik_grad(xs, p: GpdParams) -> tuple[float, float]:
    """Analytic (d/dsigma, d/depsilon) of :func:`gpd_log_likelihood`.

    For epsilon != 0, per observation x with b = 1 + eps*x/sigma:

        d/dsigma  = -1/sigma + (1 + eps) * x / (sigma * (sigma + eps * x))
        d/depsilon = log(b) / eps**2 - (1/eps + 1) * x / (sigma + eps * x)

    The epsilon == 0 branch uses the limits x**2/(2 sigma**2) - x/sigma for
    the shape component and the exponential-density derivative for scale.
    """
    base = _loglik_terms(xs, p)
    x = np.asarray(xs, dtype=float).reshape(-1)
    n = x.size
    sig, eps = p.sigma, p.epsilon
    if abs(eps) < EPSILON_SWITCH_TOL:
        d_sigma = -n / sig + np.sum(x) / sig**2
        d_eps = np.sum(x**2 / (2.0 * sig**2) - x / sig)
        return float(d_sigma), float(d_eps)
    denom = sig + eps * x
    d_sigma = -n / sig + (1.0 + eps) * np.sum(x / denom) / sig
    d_eps = np.sum(np.log(base)) / eps**2 - (1.0 / eps + 1.0) * np.sum(x / denom)
    return float(d_sigma), float(d_eps)
