"""Multi-stock trading MDP over a :class:`~clstm_ppo.market_data.Panel`."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError
from .market_data import Panel

LIQUIDATE = "liquidate"
FREEZE = "freeze"


@dataclass(frozen=True)
class EnvConfig:
    initial_capital: float = 1_000_000.0
    h_max: int = 100
    cost_rate: float = 0.001
    reward_scale: float = 1e-4
    turbulence_threshold: float | None = None  # None disables the gate
    turbulence_policy: str = LIQUIDATE
    n_stocks: int = 30

    def __post_init__(self):
        if not self.initial_capital > 0:
            raise ValueError("initial_capital must be positive")
        if self.h_max < 1:
            raise ValueError("h_max must be at least 1")
        if not 0 <= self.cost_rate < 1:
            raise ValueError("cost_rate must lie in [0, 1)")
        if self.turbulence_policy not in (LIQUIDATE, FREEZE):
            raise ValueError(f"unknown turbulence_policy {self.turbulence_policy!r}")


@dataclass(frozen=True)
class MarketState:
    balance: float
    prices: np.ndarray
    holdings: np.ndarray
    macd: np.ndarray
    rsi: np.ndarray
    cci: np.ndarray
    adx: np.ndarray

    @property
    def portfolio_value(self) -> float:
        return float(self.balance + self.prices @ self.holdings)

    def as_vector(self) -> np.ndarray:
        """[balance, prices, holdings, macd, rsi, cci, adx], length 1 + 6N."""
        return np.concatenate((
            [self.balance], self.prices, self.holdings.astype(np.float64),
            self.macd, self.rsi, self.cci, self.adx,
        ))


@dataclass(frozen=True)
class StepInfo:
    date: dt.date
    executed: np.ndarray  # signed share counts, sells negative
    cost: float
    turbulence: float
    halted: bool


@dataclass(frozen=True)
class StepResult:
    next_state: MarketState
    reward: float
    done: bool
    info: StepInfo


@dataclass(frozen=True)
class Trade:
    date: dt.date
    ticker: str
    side: str
    shares: int
    price: float
    cost: float


@dataclass(frozen=True)
class EquityPoint:
    date: dt.date
    portfolio_value: float
    balance: float
    turbulence: float
    halted: bool


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class TradingEnv:
    """One trading episode over ``date_range`` (inclusive) of a panel.

    Orders execute at the current date's adjusted close; the reward is the
    scaled change in total portfolio value once prices move to the next date.
    Each instance is single-threaded.
    """

    def __init__(self, panel: Panel, config: EnvConfig,
                 date_range: tuple[dt.date, dt.date] | None = None):
        if not panel.has_indicators:
            raise DataError("panel has no indicators; run compute_indicators first")
        if panel.n_tickers != config.n_stocks:
            raise DataError(f"panel has {panel.n_tickers} tickers but config expects {config.n_stocks}")
        self.panel = panel
        self.config = config
        if date_range is None:
            self.start, self.stop = 0, panel.n_dates - 1
        else:
            lo, hi = date_range
            if lo < panel.dates[0] or hi > panel.dates[-1]:
                raise DataError(f"range {lo}..{hi} outside panel calendar "
                                f"{panel.dates[0]}..{panel.dates[-1]}")
            idx = [i for i, d in enumerate(panel.dates) if lo <= d <= hi]
            if not idx:
                raise DataError(f"range {lo}..{hi} contains no trading dates")
            self.start, self.stop = idx[0], idx[-1]
        if self.stop - self.start < 1:
            raise DataError("episode range needs at least two trading dates")
        self._t: int | None = None
        self._balance = 0.0
        self._holdings = np.zeros(config.n_stocks, dtype=np.int64)
        self._done = True
        self.trades: list[Trade] = []
        self.equity: list[EquityPoint] = []

    @property
    def n_steps(self) -> int:
        return self.stop - self.start

    @property
    def state_dim(self) -> int:
        return 1 + 6 * self.config.n_stocks

    @property
    def date(self) -> dt.date:
        self._check_started()
        return self.panel.dates[self._t]

    @property
    def done(self) -> bool:
        return self._done

    def _check_started(self):
        if self._t is None:
            raise ContractError("environment used before reset()")

    def reset(self, balance: float | None = None, holdings: Sequence[int] | None = None) -> MarketState:
        """Start an episode at the first date of the range.

        ``balance``/``holdings`` override the fresh-account defaults so a
        backtest can carry a portfolio across windows.
        """
        self._t = self.start
        self._balance = float(self.config.initial_capital if balance is None else balance)
        if holdings is None:
            self._holdings = np.zeros(self.config.n_stocks, dtype=np.int64)
        else:
            h = np.asarray(holdings, dtype=np.int64)
            if h.shape != (self.config.n_stocks,) or np.any(h < 0):
                raise ContractError("holdings must be N non-negative integers")
            self._holdings = h.copy()
        if self._balance < 0:
            raise ContractError("balance must be non-negative")
        self._done = False
        self.trades = []
        self.equity = []
        state = self.state()
        self._record_equity(state)
        return state

    def state(self) -> MarketState:
        self._check_started()
        p, t = self.panel, self._t
        return MarketState(
            balance=self._balance,
            prices=p.adjclose[t].copy(),
            holdings=self._holdings.copy(),
            macd=p.macd[t].copy(), rsi=p.rsi[t].copy(),
            cci=p.cci[t].copy(), adx=p.adx[t].copy(),
        )

    def state_vector(self) -> np.ndarray:
        return self.state().as_vector()

    def turbulence_at(self, t: int | None = None) -> float:
        return float(self.panel.turbulence[self._t if t is None else t])

    def _gate_active(self) -> bool:
        thr = self.config.turbulence_threshold
        return thr is not None and self.turbulence_at() > thr

    def _record_equity(self, state: MarketState):
        self.equity.append(EquityPoint(
            self.panel.dates[self._t], state.portfolio_value, state.balance,
            self.turbulence_at(), self._gate_active()))

    def desired_orders(self, action: np.ndarray) -> np.ndarray:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (self.config.n_stocks,):
            raise ContractError(f"action must have shape ({self.config.n_stocks},)")
        if not np.all(np.isfinite(a)):
            raise ContractError("action contains non-finite values")
        return round_half_away(a * self.config.h_max).astype(np.int64)

    def step(self, action: np.ndarray) -> StepResult:
        self._check_started()
        if self._done:
            raise ContractError("step() called on a finished episode; call reset()")
        cfg = self.config
        t = self._t
        prices = self.panel.adjclose[t]
        before = self.state()
        desired = self.desired_orders(action)

        halted = self._gate_active()
        if halted:
            if cfg.turbulence_policy == LIQUIDATE:
                desired = -self._holdings.copy()
            else:
                desired = np.zeros_like(desired)

        executed = np.zeros(cfg.n_stocks, dtype=np.int64)
        balance = self._balance
        holdings = self._holdings.copy()
        total_cost = 0.0
        date = self.panel.dates[t]
        trades = []
        for i in range(cfg.n_stocks):
            if desired[i] < 0 and holdings[i] > 0:
                shares = int(min(-desired[i], holdings[i]))
                value = float(prices[i]) * shares
                fee = cfg.cost_rate * value
                balance += value - fee
                holdings[i] -= shares
                executed[i] = -shares
                total_cost += fee
                trades.append(Trade(date, self.panel.tickers[i], "sell", shares, float(prices[i]), fee))
        for i in range(cfg.n_stocks):
            if desired[i] > 0:
                price = float(prices[i])
                shares = int(min(desired[i], math.floor(balance / (price * (1.0 + cfg.cost_rate)))))
                while shares > 0 and price * shares + cfg.cost_rate * price * shares > balance:
                    shares -= 1
                if shares <= 0:
                    continue
                value = price * shares
                fee = cfg.cost_rate * value
                balance -= value + fee
                holdings[i] += shares
                executed[i] = shares
                total_cost += fee
                trades.append(Trade(date, self.panel.tickers[i], "buy", shares, price, fee))

        self._balance = balance
        self._holdings = holdings
        self._t = t + 1
        self._done = self._t >= self.stop
        after = self.state()
        # cost is already inside the new balance, so the value change is net of it
        reward = cfg.reward_scale * (after.portfolio_value - before.portfolio_value)
        self.trades.extend(trades)
        self._record_equity(after)
        info = StepInfo(date, executed, total_cost, self.turbulence_at(t), halted)
        return StepResult(after, reward, self._done, info)


def write_trades_csv(trades: Sequence[Trade], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "side", "shares", "price", "cost"])
        for tr in trades:
            w.writerow([tr.date.isoformat(), tr.ticker, tr.side, tr.shares, repr(tr.price), repr(tr.cost)])


def read_trades_csv(path: str | Path) -> list[Trade]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [Trade(dt.date.fromisoformat(r["date"]), r["ticker"], r["side"], int(r["shares"]),
                      float(r["price"]), float(r["cost"])) for r in reader]


def write_equity_csv(points: Sequence[EquityPoint], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "portfolio_value", "balance", "turbulence", "halted"])
        for p in points:
            w.writerow([p.date.isoformat(), repr(p.portfolio_value), repr(p.balance),
                        repr(p.turbulence), int(p.halted)])


def read_equity_csv(path: str | Path) -> list[EquityPoint]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [EquityPoint(dt.date.fromisoformat(r["date"]), float(r["portfolio_value"]),
                            float(r["balance"]), float(r["turbulence"]), r["halted"] == "1")
                for r in reader]
