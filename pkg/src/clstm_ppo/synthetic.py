"""Seeded synthetic OHLCV markets for tests, demos and benchmarks."""

from __future__ import annotations

import datetime as dt
from typing import Sequence

import numpy as np

from .market_data import Bar, BarSeries


def business_days(start: dt.date, n: int) -> list[dt.date]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def bars_from_closes(ticker: str, dates: Sequence[dt.date], closes: np.ndarray,
                     rng: np.random.Generator, spread: float = 0.005) -> BarSeries:
    """Wrap a close path into consistent OHLCV bars (adjusted close = close)."""
    closes = np.asarray(closes, dtype=np.float64)
    opens = np.empty_like(closes)
    opens[0] = closes[0]
    opens[1:] = closes[:-1] * (1.0 + 0.25 * spread * rng.standard_normal(len(closes) - 1))
    top = np.maximum(opens, closes)
    bottom = np.minimum(opens, closes)
    highs = top * (1.0 + spread * np.abs(rng.standard_normal(len(closes))))
    lows = bottom * (1.0 - spread * np.abs(rng.standard_normal(len(closes))))
    volumes = np.floor(1e6 * (1.0 + rng.random(len(closes))))
    bars = tuple(Bar(d, float(o), float(h), float(lo), float(c), float(c), float(v))
                 for d, o, h, lo, c, v in zip(dates, opens, highs, lows, closes, volumes))
    return BarSeries(ticker, bars)


def drift_market(n_days: int, drifts: Sequence[float], volatility: float | Sequence[float] = 0.01,
                 seed: int = 0, start: dt.date = dt.date(2009, 1, 1),
                 start_prices: Sequence[float] | None = None,
                 tickers: Sequence[str] | None = None) -> list[BarSeries]:
    """Independent assets with constant daily drift plus Gaussian noise.

    Daily simple return of asset i is ``drifts[i] + volatility[i] * z``.
    """
    rng = np.random.default_rng(seed)
    n = len(drifts)
    drifts = np.asarray(drifts, dtype=np.float64)
    vol = np.broadcast_to(np.asarray(volatility, dtype=np.float64), (n,))
    prices0 = np.full(n, 100.0) if start_prices is None else np.asarray(start_prices, dtype=np.float64)
    tickers = list(tickers) if tickers is not None else [f"S{i:02d}" for i in range(n)]
    dates = business_days(start, n_days)
    rets = drifts + vol * rng.standard_normal((n_days - 1, n))
    rets = np.maximum(rets, -0.5)
    closes = prices0 * np.vstack([np.ones(n), np.cumprod(1.0 + rets, axis=0)])
    return [bars_from_closes(t, dates, closes[:, i], rng) for i, t in enumerate(tickers)]


def random_market(n_tickers: int, n_days: int, seed: int = 0, volatility: float = 0.015,
                  start: dt.date = dt.date(2009, 1, 1)) -> list[BarSeries]:
    """Driftless random walks with mildly correlated returns."""
    rng = np.random.default_rng(seed)
    common = rng.standard_normal((n_days - 1, 1))
    own = rng.standard_normal((n_days - 1, n_tickers))
    rets = volatility * (0.4 * common + 0.9 * own)
    prices0 = 20.0 + 180.0 * rng.random(n_tickers)
    closes = prices0 * np.vstack([np.ones(n_tickers), np.cumprod(1.0 + rets, axis=0)])
    dates = business_days(start, n_days)
    return [bars_from_closes(f"T{i:02d}", dates, closes[:, i], rng) for i in range(n_tickers)]


def inject_crash(series: Sequence[BarSeries], date: dt.date, drop: float = 0.2) -> list[BarSeries]:
    """Scale every bar on/after ``date`` by ``1 - drop`` for every ticker."""
    factor = 1.0 - drop
    out = []
    for s in series:
        bars = tuple(
            Bar(b.date, b.open * factor, b.high * factor, b.low * factor, b.close * factor,
                b.adjusted_close * factor, b.volume) if b.date >= date else b
            for b in s.bars)
        out.append(BarSeries(s.ticker, bars))
    return out
