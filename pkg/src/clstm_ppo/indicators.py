"""Technical indicators over (dates, tickers) price matrices.

Every function takes 2-D arrays shaped ``(n_dates, n_tickers)`` and returns an
array of the same shape. Values before an indicator has enough history are
NaN; callers trim a warm-up prefix before using them.
"""

from __future__ import annotations

import numpy as np


def _as_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    return x


def ema(close: np.ndarray, period: int) -> np.ndarray:
    """Exponential moving average seeded with the first observation.

    alpha = 2 / (period + 1), no bias adjustment.
    """
    close = _as_2d(close)
    alpha = 2.0 / (period + 1.0)
    out = np.empty_like(close)
    out[0] = close[0]
    for t in range(1, close.shape[0]):
        out[t] = alpha * close[t] + (1.0 - alpha) * out[t - 1]
    return out


def wilder_mean(values: np.ndarray, period: int, start: int) -> np.ndarray:
    """Wilder's running average.

    The first output sits at ``start + period - 1`` and is the simple mean of
    ``values[start : start + period]``; afterwards
    ``avg[t] = (avg[t-1] * (period - 1) + values[t]) / period``.
    """
    values = _as_2d(values)
    out = np.full_like(values, np.nan)
    first = start + period - 1
    if first >= values.shape[0]:
        return out
    out[first] = values[start:first + 1].mean(axis=0)
    for t in range(first + 1, values.shape[0]):
        out[t] = (out[t - 1] * (period - 1) + values[t]) / period
    return out


def macd(close: np.ndarray, fast: int = 12, slow: int = 26) -> np.ndarray:
    """MACD line: EMA(fast) - EMA(slow). The signal line is not used."""
    return ema(close, fast) - ema(close, slow)


def rsi(close: np.ndarray, period: int = 14) -> np.ndarray:
    """Relative strength index with Wilder smoothing.

    Flat windows (no gains and no losses) give 50; windows without losses
    give 100.
    """
    close = _as_2d(close)
    delta = np.full_like(close, np.nan)
    delta[1:] = np.diff(close, axis=0)
    gain = np.where(delta > 0, delta, 0.0)
    loss = np.where(delta < 0, -delta, 0.0)
    avg_gain = wilder_mean(gain, period, start=1)
    avg_loss = wilder_mean(loss, period, start=1)

    out = np.full_like(close, np.nan)
    valid = ~np.isnan(avg_gain)
    g, l = avg_gain[valid], avg_loss[valid]
    with np.errstate(divide="ignore", invalid="ignore"):
        value = 100.0 - 100.0 / (1.0 + g / l)
    value = np.where(l == 0.0, np.where(g == 0.0, 50.0, 100.0), value)
    out[valid] = value
    return out


def cci(high: np.ndarray, low: np.ndarray, close: np.ndarray,
        period: int = 14, constant: float = 0.015) -> np.ndarray:
    """Commodity channel index on the typical price (H + L + C) / 3.

    A window with zero mean absolute deviation yields 0.
    """
    tp = (_as_2d(high) + _as_2d(low) + _as_2d(close)) / 3.0
    out = np.full_like(tp, np.nan)
    for t in range(period - 1, tp.shape[0]):
        window = tp[t - period + 1:t + 1]
        sma = window.mean(axis=0)
        mad = np.abs(window - sma).mean(axis=0)
        dev = tp[t] - sma
        with np.errstate(divide="ignore", invalid="ignore"):
            value = dev / (constant * mad)
        out[t] = np.where(mad == 0.0, 0.0, value)
    return out


def adx(high: np.ndarray, low: np.ndarray, close: np.ndarray, period: int = 14) -> np.ndarray:
    """Average directional index with Wilder smoothing.

    True range and directional movement start at index 1. The directional
    indicators use Wilder averages of TR/+DM/-DM (first value at ``period``),
    DX is averaged again with Wilder smoothing, so the first ADX value lands
    at index ``2 * period - 1``.
    """
    high, low, close = _as_2d(high), _as_2d(low), _as_2d(close)
    n = close.shape[0]
    tr = np.full_like(close, np.nan)
    plus_dm = np.full_like(close, np.nan)
    minus_dm = np.full_like(close, np.nan)
    if n > 1:
        prev_close = close[:-1]
        tr[1:] = np.maximum.reduce([
            high[1:] - low[1:],
            np.abs(high[1:] - prev_close),
            np.abs(low[1:] - prev_close),
        ])
        up = high[1:] - high[:-1]
        down = low[:-1] - low[1:]
        plus_dm[1:] = np.where((up > down) & (up > 0), up, 0.0)
        minus_dm[1:] = np.where((down > up) & (down > 0), down, 0.0)

    atr = wilder_mean(tr, period, start=1)
    pdm = wilder_mean(plus_dm, period, start=1)
    mdm = wilder_mean(minus_dm, period, start=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plus_di = np.where(atr == 0.0, 0.0, 100.0 * pdm / atr)
        minus_di = np.where(atr == 0.0, 0.0, 100.0 * mdm / atr)
        di_sum = plus_di + minus_di
        dx = np.where(di_sum == 0.0, 0.0, 100.0 * np.abs(plus_di - minus_di) / di_sum)
    dx[np.isnan(atr)] = np.nan
    return wilder_mean(dx, period, start=period)
