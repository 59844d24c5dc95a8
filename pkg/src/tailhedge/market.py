"""Gamma-hedging market simulator.

A desk accumulates client option orders arriving by a Poisson process, and
once per day trades a fresh at-the-money hedge option to remove a chosen
fraction of the book's gamma, after which delta is rebalanced to zero with
a cost-free asset trade.  The underlying follows exact lognormal dynamics;
options are priced and marked with Black-Scholes-Merton.

Accounting: trades settle into cash at market value, so portfolio value
P = options + asset position + cash is conserved by every trade and moves
only with market prices.  The proportional hedge-option transaction cost is
charged in the reward, R = -kappa * |V * H| + (P_t - P_{t-1}), not in the
cash ledger; cumulative reward therefore equals mark-to-market PnL net of
all costs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MarketParams:
    s0: float = 10.0
    vol: float = 0.3
    mu: float = 0.0
    r: float = 0.0
    q: float = 0.0
    dt: float = 1.0 / 365.0
    horizon: int = 30
    poisson_intensity: float = 1.0
    client_maturity_days: int = 60
    hedge_maturity_days: int = 30
    contract_multiplier: float = 100.0
    kappa: float = 0.01

    def __post_init__(self) -> None:
        if self.s0 <= 0.0:
            raise ValueError("s0 must be positive")
        if self.vol <= 0.0:
            raise ValueError("vol must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.poisson_intensity < 0.0:
            raise ValueError("poisson_intensity must be >= 0")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")
        if self.client_maturity_days < 1 or self.hedge_maturity_days < 1:
            raise ValueError("option maturities must be >= 1 day")
        if self.contract_multiplier <= 0.0:
            raise ValueError("contract_multiplier must be positive")


@dataclass
class OptionContract:
    """European call position.  ``position`` counts units of underlying
    covered (contracts times multiplier), signed from the desk's side."""

    strike: float
    maturity_step: int
    position: float
    is_hedge: bool = False


@dataclass
class EnvState:
    observation: np.ndarray   # (price, portfolio gamma, hedge-option gamma)
    step_index: int


@dataclass
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    a_next: float
    done: bool


@dataclass
class StepRecord:
    step: int
    price: float
    gamma_pre: float
    gamma_post: float
    hedge_contracts: float
    delta_rebalance: float
    reward: float
    cumulative_pnl: float
    hedge_value: float = 0.0
    cost: float = 0.0
    portfolio_value: float = 0.0
    trade_value_drift: float = 0.0
    admit_value_drift: float = 0.0


EPISODE_LOG_COLUMNS = ("step", "price", "gamma_pre", "gamma_post",
                       "hedge_contracts", "delta_rebalance", "reward",
                       "cumulative_pnl")


def gbm_step(s: float, drift: float, vol: float, dt: float, z: float) -> float:
    """Exact lognormal update s * exp((drift - vol^2/2) dt + vol sqrt(dt) z)."""
    if s <= 0.0 or vol < 0.0 or dt <= 0.0:
        raise ValueError("require s > 0, vol >= 0, dt > 0")
    return s * math.exp((drift - 0.5 * vol * vol) * dt + vol * math.sqrt(dt) * z)


def _d1_d2(s, k, r, q, vol, ttm):
    srt = vol * np.sqrt(ttm)
    d1 = (np.log(s / k) + (r - q + 0.5 * vol * vol) * ttm) / srt
    return d1, d1 - srt


def bsm_price(s, k, r, q, vol, ttm):
    """Call value S N(d1) e^{-qT} - K e^{-rT} N(d2); intrinsic at ttm <= 0."""
    s, k, ttm = (np.asarray(v, dtype=float) for v in (s, k, ttm))
    intrinsic = np.maximum(s - k, 0.0)
    live = ttm > 0.0
    out = np.where(live, 0.0, intrinsic)
    if np.any(live):
        ttm_safe = np.where(live, ttm, 1.0)
        d1, d2 = _d1_d2(s, k, r, q, vol, ttm_safe)
        val = s * ndtr(d1) * np.exp(-q * ttm_safe) - k * np.exp(-r * ttm_safe) * ndtr(d2)
        out = np.where(live, val, out)
    return float(out) if out.ndim == 0 else out


def bsm_delta(s, k, r, q, vol, ttm):
    """dPrice/dS = N(d1) e^{-qT}; step function at expiry."""
    s, k, ttm = (np.asarray(v, dtype=float) for v in (s, k, ttm))
    live = ttm > 0.0
    out = np.where(s > k, 1.0, 0.0)
    if np.any(live):
        ttm_safe = np.where(live, ttm, 1.0)
        d1, _ = _d1_d2(s, k, r, q, vol, ttm_safe)
        out = np.where(live, ndtr(d1) * np.exp(-q * ttm_safe), out)
    return float(out) if out.ndim == 0 else out


def bsm_gamma(s, k, r, q, vol, ttm):
    """d2Price/dS2 = N'(d1) e^{-qT} / (S vol sqrt(T)); zero at expiry."""
    s, k, ttm = (np.asarray(v, dtype=float) for v in (s, k, ttm))
    live = ttm > 0.0
    out = np.zeros_like(s * k * ttm, dtype=float)
    if np.any(live):
        ttm_safe = np.where(live, ttm, 1.0)
        d1, _ = _d1_d2(s, k, r, q, vol, ttm_safe)
        pdf = np.exp(-0.5 * d1 * d1) / _SQRT_2PI
        val = pdf * np.exp(-q * ttm_safe) / (s * vol * np.sqrt(ttm_safe))
        out = np.where(live, val, out)
    return float(out) if out.ndim == 0 else out


def poisson_arrivals(rng: np.random.Generator, intensity: float,
                     dt_days: float = 1.0) -> int:
    """Number of client orders arriving over ``dt_days`` days."""
    if intensity < 0.0:
        raise ValueError("intensity must be >= 0")
    return int(rng.poisson(intensity * dt_days))


def gamma_hedge_ratio(records) -> float | None:
    """Fraction of gamma exposure removed over an episode:

        1 - sum_t sign(gamma_pre) * gamma_post / sum_t |gamma_pre|

    Steps with zero pre-hedge gamma contribute to neither sum; None when
    every step had zero exposure (ratio undefined).
    """
    num = 0.0
    den = 0.0
    for rec in records:
        num += math.copysign(1.0, rec.gamma_pre) * rec.gamma_post if rec.gamma_pre != 0.0 else 0.0
        den += abs(rec.gamma_pre)
    if den == 0.0:
        return None
    return 1.0 - num / den


def write_episode_log(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_LOG_COLUMNS)
        for rec in records:
            writer.writerow([getattr(rec, c) for c in EPISODE_LOG_COLUMNS])


class HedgingEnv:
    """Single-episode hedging MDP.  One instance is single-threaded; run
    independent instances with independent seeds for Monte Carlo work."""

    def __init__(self, params: MarketParams, seed=None):
        self.params = params
        self._rng = np.random.default_rng(seed)
        self.log: list[StepRecord] = []
        self.reset()

    # -- book helpers ------------------------------------------------------

    def _book_metrics(self, price: float, t: int) -> tuple[float, float, float]:
        """(value, delta, gamma) of all open options, position-weighted."""
        if not self._options:
            return 0.0, 0.0, 0.0
        p = self.params
        strikes = np.array([o.strike for o in self._options])
        ttm = np.array([(o.maturity_step - t) * p.dt for o in self._options])
        pos = np.array([o.position for o in self._options])
        value = float(np.sum(pos * bsm_price(price, strikes, p.r, p.q, p.vol, ttm)))
        delta = float(np.sum(pos * bsm_delta(price, strikes, p.r, p.q, p.vol, ttm)))
        gamma = float(np.sum(pos * bsm_gamma(price, strikes, p.r, p.q, p.vol, ttm)))
        return value, delta, gamma

    def _portfolio_value(self, book_value: float, price: float) -> float:
        return book_value + self._asset * price + self._cash

    def _admit_orders(self, price: float, t: int) -> None:
        p = self.params
        n = poisson_arrivals(self._rng, p.poisson_intensity)
        for _ in range(n):
            side = 1.0 if self._rng.random() < 0.5 else -1.0
            position = side * p.contract_multiplier
            premium = bsm_price(price, price, p.r, p.q, p.vol,
                                p.client_maturity_days * p.dt)
            self._options.append(OptionContract(
                strike=price, maturity_step=t + p.client_maturity_days,
                position=position))
            self._cash -= position * premium

    def _settle_expired(self, price: float, t: int) -> None:
        live = []
        for o in self._options:
            if o.maturity_step <= t:
                self._cash += o.position * max(price - o.strike, 0.0)
            else:
                live.append(o)
        self._options = live

    def _hedge_gamma(self, price: float) -> float:
        p = self.params
        return bsm_gamma(price, price, p.r, p.q, p.vol, p.hedge_maturity_days * p.dt)

    def _observe(self) -> np.ndarray:
        _, _, gamma = self._book_metrics(self._price, self._t)
        return np.array([self._price, gamma, self._hedge_gamma(self._price)])

    # -- episode lifecycle -------------------------------------------------

    def reset(self, seed=None) -> EnvState:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._t = 0
        self._price = self.params.s0
        self._cash = 0.0
        self._asset = 0.0
        self._options: list[OptionContract] = []
        self._cum_pnl = 0.0
        self.log = []
        self._admit_orders(self._price, self._t)
        self._state = EnvState(self._observe(), 0)
        return self._state

    @property
    def state(self) -> EnvState:
        return self._state

    def step(self, action: float) -> tuple[EnvState, float, bool]:
        p = self.params
        t = self._t
        if t >= p.horizon:
            raise RuntimeError("episode finished; call reset()")
        a = float(action)
        if a < 0.0 or a > 1.0:
            logger.warning("action %.6g outside [0, 1]; clamped", a)
            a = min(max(a, 0.0), 1.0)

        price = self._price
        value0, _, gamma_pre = self._book_metrics(price, t)
        p_prev = self._portfolio_value(value0, price)

        # Hedge trade: remove fraction a of current gamma with the fresh
        # ATM option, premium settled at market value.
        hedge_ttm = p.hedge_maturity_days * p.dt
        hedge_value = bsm_price(price, price, p.r, p.q, p.vol, hedge_ttm)
        hedge_gamma = bsm_gamma(price, price, p.r, p.q, p.vol, hedge_ttm)
        hedge_units = -a * gamma_pre / hedge_gamma
        if hedge_units != 0.0:
            self._options.append(OptionContract(
                strike=price, maturity_step=t + p.hedge_maturity_days,
                position=hedge_units, is_hedge=True))
            self._cash -= hedge_units * hedge_value
        cost = p.kappa * abs(hedge_units * hedge_value)

        # Recompute from the book: post-hedge gamma and the delta to kill.
        value1, delta1, gamma_post = self._book_metrics(price, t)
        asset_trade = -delta1 - self._asset
        self._asset = -delta1
        self._cash -= asset_trade * price
        trade_drift = self._portfolio_value(value1, price) - p_prev

        # Market moves; expiries settle at intrinsic; new client orders
        # arrive at the start of the new day, struck at the money.
        z = self._rng.standard_normal()
        new_price = gbm_step(price, p.mu, p.vol, p.dt, z)
        t_new = t + 1
        value2, _, _ = self._book_metrics(new_price, t_new)
        p_mid = self._portfolio_value(value2, new_price)
        self._settle_expired(new_price, t_new)
        self._admit_orders(new_price, t_new)
        value3, _, _ = self._book_metrics(new_price, t_new)
        p_now = self._portfolio_value(value3, new_price)
        admit_drift = p_now - p_mid

        reward = -cost + (p_now - p_prev)
        self._cum_pnl += reward
        self._price = new_price
        self._t = t_new
        done = t_new >= p.horizon

        self.log.append(StepRecord(
            step=t, price=price, gamma_pre=gamma_pre, gamma_post=gamma_post,
            hedge_contracts=hedge_units / p.contract_multiplier,
            delta_rebalance=asset_trade, reward=reward,
            cumulative_pnl=self._cum_pnl, hedge_value=hedge_value, cost=cost,
            portfolio_value=p_now, trade_value_drift=trade_drift,
            admit_value_drift=admit_drift))

        self._state = EnvState(self._observe(), t_new)
        return self._state, reward, done
