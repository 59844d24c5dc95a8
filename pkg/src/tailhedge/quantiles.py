"""Quantile representation of a return distribution and quantile-based risk.

A return distribution is approximated by N values theta[n] carrying equal
1/N probability mass at the implicit levels tau[n] = n/N.  The values need
not be sorted while they are being learned; every risk extraction here sorts
a copy first.  VaR/CVaR and the body/tail threshold are all order statistics
of that sorted copy, indexed by round(mass * N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantileDistribution:
    """N equally weighted quantile values at levels n/N, n = 0..N-1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("values must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.n) / self.n


@dataclass(frozen=True)
class RiskMeasureSpec:
    """Which quantile risk measure to optimize/report: VaR or CVaR at alpha."""

    kind: str
    alpha: float

    def __post_init__(self) -> None:
        if self.kind not in ("var", "cvar"):
            raise ValueError(f"kind must be 'var' or 'cvar', got {self.kind!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def label(self) -> str:
        return f"{self.kind.upper()}{round(self.alpha * 100)}"


def sorted_risk_index(alpha: float, n: int) -> int:
    """Order-statistic index for the level 1 - alpha on n sorted values.

    Nearest-level rule round((1-alpha)*n) with clamping; round() ties follow
    Python's round-half-even.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return min(max(round((1.0 - alpha) * n), 0), n - 1)


def pinball(e, tau):
    """Asymmetric residual loss e * (tau - 1{e < 0}); minimized by the
    tau-quantile.  Accepts scalars or arrays."""
    e_arr = np.asarray(e, dtype=float)
    t_arr = np.asarray(tau, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    out = e_arr * (t_arr - (e_arr < 0.0))
    return out if (np.ndim(e) or np.ndim(tau)) else float(out)


def var_alpha(q: QuantileDistribution, alpha: float) -> float:
    """Value at risk: the sorted quantile value at level 1 - alpha."""
    vals = np.sort(q.values)
    return float(vals[sorted_risk_index(alpha, q.n)])


def cvar_alpha(q: QuantileDistribution, alpha: float) -> float:
    """Mean of the quantile values at or below VaR_alpha."""
    vals = np.sort(q.values)
    var = vals[sorted_risk_index(alpha, q.n)]
    return float(np.mean(vals[vals <= var]))


def threshold(q: QuantileDistribution, beta: float) -> float:
    """Body/tail split point: the sorted quantile value at level 1 - beta."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    vals = np.sort(q.values)
    return float(vals[sorted_risk_index(beta, q.n)])


def risk_measure(q: QuantileDistribution, spec: RiskMeasureSpec) -> float:
    if spec.kind == "var":
        return var_alpha(q, spec.alpha)
    return cvar_alpha(q, spec.alpha)


def qr_loss_and_grad(theta: np.ndarray, levels: np.ndarray, z_body, z_tail,
                     weighting: str = "two_part"):
    """Batched two-part quantile-regression loss and its theta-gradient.

    theta: (B, N) predicted quantile values; levels: (N,).
    z_body: (B, M_body); z_tail: (B, M_tail) or None/empty.

    Per sample the loss sums, over levels n, the body-sample average and the
    tail-sample average of pinball residuals:

        sum_n [ mean_l rho(z_body[l] - theta[n]) + mean_k rho(z_tail[k] - theta[n]) ]

    This weights the two averages equally regardless of how many samples each
    carries (the tail is deliberately overweighted relative to its
    probability mass).  ``weighting='pooled'`` switches to a plain mean over
    all samples, for ablation only.

    Returns (loss (B,), grad (B, N)).  A residual of exactly zero contributes
    no gradient (a valid subgradient), so a perfectly fitted degenerate
    target yields loss 0 and gradient 0.
    """
    if weighting not in ("two_part", "pooled"):
        raise ValueError(f"unknown weighting {weighting!r}")
    theta = np.asarray(theta, dtype=float)
    bsz, n = theta.shape
    loss = np.zeros(bsz)
    grad = np.zeros((bsz, n))

    parts = [np.asarray(z, dtype=float) for z in (z_body, z_tail)
             if z is not None and np.size(z) > 0]
    if weighting == "pooled":
        parts = [np.concatenate([p.reshape(bsz, -1) for p in parts], axis=1)]
    for z in parts:
        z = z.reshape(bsz, -1)
        diff = z[:, :, None] - theta[:, None, :]          # (B, M, N)
        rho = diff * (levels[None, None, :] - (diff < 0.0))
        loss += rho.sum(axis=2).mean(axis=1)
        g = ((diff < 0.0).astype(float) - levels[None, None, :])
        g[diff == 0.0] = 0.0
        grad += g.mean(axis=1)
    return loss, grad


def qr_loss_two_part(pred: QuantileDistribution, z_body, z_tail,
                     weighting: str = "two_part") -> float:
    """Two-part QR loss of a single prediction against body/tail samples."""
    theta = pred.values[None, :]
    loss, _ = qr_loss_and_grad(
        theta, pred.levels,
        None if z_body is None or np.size(z_body) == 0 else np.asarray(z_body)[None, :],
        None if z_tail is None or np.size(z_tail) == 0 else np.asarray(z_tail)[None, :],
        weighting=weighting,
    )
    return float(loss[0])
