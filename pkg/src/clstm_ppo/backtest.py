"""Rolling retrain-then-trade protocol with a growing training window."""

from __future__ import annotations

import calendar as _calendar
import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as metrics_mod
from .env import EnvConfig, EquityPoint, Trade, TradingEnv, write_equity_csv, write_trades_csv
from .errors import DataError, NumericalError
from .features import StateScales, warm_pad
from .market_data import Panel, turbulence_threshold
from .nn import checkpoint
from .ppo import Agent, Hyperparams, make_optimizer, policy_forward, sample_action, train, write_train_log

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Window:
    index: int
    train_start: dt.date
    train_end: dt.date
    trade_start: dt.date
    trade_end: dt.date


def add_months(d: dt.date, months: int) -> dt.date:
    month0 = d.month - 1 + months
    year = d.year + month0 // 12
    month = month0 % 12 + 1
    day = min(d.day, _calendar.monthrange(year, month)[1])
    return dt.date(year, month, day)


def make_schedule(calendar: Sequence[dt.date], train_end_initial: dt.date,
                  stride_months: int = 3) -> list[Window]:
    """Quarterly (by default) trade windows after ``train_end_initial``.

    Window k trades the dates in ``(b_k, b_{k+1}]`` with
    ``b_k = train_end_initial + k * stride_months``, and trains on every
    date from the start of the calendar up to the day before it trades.
    """
    dates = sorted(calendar)
    if stride_months < 1:
        raise ValueError("stride_months must be >= 1")
    oos = [d for d in dates if d > train_end_initial]
    if not oos:
        raise DataError(f"no out-of-sample dates after {train_end_initial}")
    in_sample = [d for d in dates if d <= train_end_initial]
    if not in_sample:
        raise DataError(f"no training dates on/before {train_end_initial}")
    windows: list[Window] = []
    k = 0
    pos = 0
    while pos < len(oos):
        upper = add_months(train_end_initial, (k + 1) * stride_months)
        chunk = []
        while pos < len(oos) and oos[pos] <= upper:
            chunk.append(oos[pos])
            pos += 1
        k += 1
        if not chunk:
            continue
        train_end = max(d for d in dates if d < chunk[0])
        windows.append(Window(len(windows), dates[0], train_end, chunk[0], chunk[-1]))
    return windows


@dataclass(frozen=True)
class AgentSpec:
    window: int = 30
    extractor_hidden: int = 128
    features_dim: int = 128
    policy_hidden: int = 512
    train_steps: int = 30_000


@dataclass
class WindowResult:
    window: Window
    threshold: float | None
    threshold_through: dt.date
    trained_through: dt.date | None
    start_balance: float
    start_holdings: np.ndarray
    end_balance: float = float("nan")
    end_holdings: np.ndarray | None = None
    train_log: list = field(default_factory=list)
    episode_rewards: list = field(default_factory=list)
    checkpoint: dict[str, np.ndarray] | None = None


@dataclass
class BacktestReport:
    equity: list[EquityPoint]
    trades: list[Trade]
    windows: list[WindowResult]
    metrics: metrics_mod.MetricsReport | None
    error: str | None = None

    @property
    def values(self) -> np.ndarray:
        return np.array([p.portfolio_value for p in self.equity])


def window_threshold(panel: Panel, train_start: dt.date, train_end: dt.date) -> float:
    """Frozen 90th-percentile turbulence over the training dates with full history."""
    idx = [i for i, d in enumerate(panel.dates)
           if train_start <= d <= train_end and i >= panel.turbulence_valid_from]
    if not idx:
        raise DataError(f"no turbulence history between {train_start} and {train_end}")
    return turbulence_threshold(panel.turbulence[idx])


def _date_meta(d: dt.date | None) -> np.ndarray:
    return np.array([np.nan if d is None else float(d.toordinal())])


def meta_date(arrays: dict[str, np.ndarray], key: str) -> dt.date | None:
    v = float(arrays[key][0])
    return None if np.isnan(v) else dt.date.fromordinal(int(v))


def checkpoint_arrays(agent: Agent | None, result: WindowResult) -> dict[str, np.ndarray]:
    arrays = {} if agent is None else dict(agent.state_dict())
    arrays["meta.window"] = np.array([float(result.window.index)])
    arrays["meta.trained_through"] = _date_meta(result.trained_through)
    arrays["meta.threshold"] = np.array([np.nan if result.threshold is None else result.threshold])
    arrays["meta.threshold_through"] = _date_meta(result.threshold_through)
    if agent is not None:
        arrays["meta.scales.balance"] = np.array([agent.scales.balance])
        arrays["meta.scales.prices"] = agent.scales.prices.copy()
        arrays["meta.scales.holdings"] = np.array([agent.scales.holdings])
    return arrays


def _trade_range(panel: Panel, schedule: Sequence[Window], k: int) -> tuple[dt.date, dt.date]:
    w = schedule[k]
    if k + 1 < len(schedule):
        return w.trade_start, schedule[k + 1].trade_start
    return w.trade_start, w.trade_end


def run_backtest(panel: Panel, schedule: Sequence[Window], env_config: EnvConfig,
                 hyper: Hyperparams, seed: int, spec: AgentSpec = AgentSpec(),
                 use_turbulence: bool = True, random_agent: bool = False,
                 risk_free: float = 0.0, out_dir: str | Path | None = None,
                 agent: Agent | None = None) -> BacktestReport:
    """Retrain on each growing window, then trade the next one with the frozen policy.

    The agent warm-starts from the previous window (parameters and Adam
    moments), the portfolio carries across windows, and trading uses the
    deterministic action. With ``random_agent`` no training happens and
    actions are uniform in [-1, 1]. A pre-built ``agent`` (for example one
    restored from a checkpoint) replaces the freshly initialized one.
    """
    if not schedule:
        raise DataError("empty schedule")
    if schedule[-1].trade_end > panel.dates[-1] or schedule[0].train_start < panel.dates[0]:
        raise DataError("schedule extends beyond the panel calendar")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).spawn(len(schedule) + 2)
    scales = StateScales.from_panel(panel, env_config.initial_capital, env_config.h_max)
    optimizer = None
    if random_agent:
        agent = None
    elif agent is None:
        agent = Agent.create(panel.n_tickers, scales, spec.window, spec.extractor_hidden,
                             spec.features_dim, spec.policy_hidden,
                             seed=int(seeds[0].generate_state(1)[0]))
    if agent is not None:
        if agent.model.state_dim != 1 + 6 * panel.n_tickers:
            raise DataError("agent state dimension does not match the panel")
        optimizer = make_optimizer(agent.model, hyper)
    action_rng = np.random.default_rng(seeds[1])

    equity: list[EquityPoint] = []
    trades: list[Trade] = []
    results: list[WindowResult] = []
    balance = env_config.initial_capital
    holdings = np.zeros(panel.n_tickers, dtype=np.int64)
    history: list[np.ndarray] = []
    error = None

    for k, w in enumerate(schedule):
        threshold = window_threshold(panel, w.train_start, w.train_end) if use_turbulence else None
        cfg = replace(env_config, turbulence_threshold=threshold)
        result = WindowResult(w, threshold, w.train_end, None, balance, holdings.copy())
        if agent is not None:
            train_env = TradingEnv(panel, cfg, (w.train_start, w.train_end))
            try:
                tr = train(train_env, agent, hyper, spec.train_steps,
                           seed=int(seeds[k + 2].generate_state(1)[0]), optimizer=optimizer)
            except NumericalError as exc:
                error = f"window {k}: training diverged: {exc}"
                logger.error(error)
                break
            result.train_log = tr.log
            result.episode_rewards = tr.episode_rewards
            result.trained_through = w.train_end
        result.checkpoint = checkpoint_arrays(agent, result)
        if out is not None:
            write_train_log(result.train_log, out / f"train_log_{k}.csv")
            if agent is not None:
                checkpoint.save(result.checkpoint, out / "checkpoints" / f"window_{k}.ckpt")

        lo, hi = _trade_range(panel, schedule, k)
        if lo == hi:
            # single-date final window: nothing to trade, just mark to market
            i = panel.index_of(lo)
            value = float(balance + panel.adjclose[i] @ holdings)
            point = EquityPoint(lo, value, balance, float(panel.turbulence[i]),
                                threshold is not None and panel.turbulence[i] > threshold)
            if not equity or equity[-1].date != lo:
                equity.append(point)
        else:
            env = TradingEnv(panel, cfg, (lo, hi))
            state = env.reset(balance, holdings)
            if agent is not None and not history:
                history.append(agent.observe(state.as_vector()))
            h = c = None
            if agent is not None:
                h, c = agent.model.initial_state()
            while not env.done:
                if agent is None:
                    action = action_rng.uniform(-1.0, 1.0, panel.n_tickers)
                else:
                    window = warm_pad(history, agent.window)
                    po = policy_forward(agent.model, window, h, c)
                    action, _, _ = sample_action(po.mean[0], po.log_std, None, deterministic=True)
                    h, c = po.h, po.c
                res = env.step(action)
                if agent is not None:
                    history.append(agent.observe(res.next_state.as_vector()))
                    del history[:-agent.window]
            points = env.equity if not equity else env.equity[1:]
            equity.extend(points)
            trades.extend(env.trades)
            final = env.state()
            balance, holdings = final.balance, final.holdings.copy()
        result.end_balance = balance
        result.end_holdings = holdings.copy()
        results.append(result)

    report_metrics = None
    if equity:
        report_metrics = metrics_mod.evaluate([p.portfolio_value for p in equity], trades, risk_free)
    report = BacktestReport(equity, trades, results, report_metrics, error)
    if out is not None:
        write_report(report, out)
    return report


def write_report(report: BacktestReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_equity_csv(report.equity, out / "equity.csv")
    write_trades_csv(report.trades, out / "trades.csv")
    if report.metrics is not None:
        metrics_mod.write_metrics_csv(report.metrics, out / "metrics.csv")


def replay_trades(panel: Panel, report: BacktestReport, env_config: EnvConfig) -> list[EquityPoint]:
    """Re-execute the trade log through fresh environments, one per window."""
    by_date: dict[dt.date, list[Trade]] = {}
    for t in report.trades:
        by_date.setdefault(t.date, []).append(t)
    col = {t: j for j, t in enumerate(panel.tickers)}
    schedule = [r.window for r in report.windows]
    equity: list[EquityPoint] = []
    balance = env_config.initial_capital
    holdings = np.zeros(panel.n_tickers, dtype=np.int64)
    for k, r in enumerate(report.windows):
        lo, hi = _trade_range(panel, schedule, k)
        if lo == hi:
            i = panel.index_of(lo)
            if not equity or equity[-1].date != lo:
                equity.append(EquityPoint(lo, float(balance + panel.adjclose[i] @ holdings), balance,
                                          float(panel.turbulence[i]),
                                          r.threshold is not None and panel.turbulence[i] > r.threshold))
            continue
        env = TradingEnv(panel, replace(env_config, turbulence_threshold=r.threshold), (lo, hi))
        env.reset(balance, holdings)
        while not env.done:
            shares = np.zeros(panel.n_tickers)
            for t in by_date.get(env.date, []):
                shares[col[t.ticker]] += t.shares if t.side == "buy" else -t.shares
            env.step(shares / env_config.h_max)
        equity.extend(env.equity if not equity else env.equity[1:])
        final = env.state()
        balance, holdings = final.balance, final.holdings.copy()
    return equity


def buy_and_hold_index(panel: Panel, start: dt.date, end: dt.date) -> tuple[list[dt.date], np.ndarray]:
    """Equal-weight index of price relatives, 1.0 on ``start``."""
    idx = [i for i, d in enumerate(panel.dates) if start <= d <= end]
    if not idx:
        raise DataError(f"no dates between {start} and {end}")
    rel = panel.adjclose[idx] / panel.adjclose[idx[0]]
    return [panel.dates[i] for i in idx], rel.mean(axis=1)
