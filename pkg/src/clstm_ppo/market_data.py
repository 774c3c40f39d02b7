"""OHLCV ingestion, calendar alignment, indicators and the turbulence index."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import indicators
from .errors import AlignmentError, DataError, InsufficientHistoryError, NumericalError

logger = logging.getLogger(__name__)

CSV_HEADER = ("date", "open", "high", "low", "close", "adjclose", "volume", "ticker")
PANEL_HEADER = ("date", "ticker", "adjclose", "macd", "rsi", "cci", "adx", "turbulence")


@dataclass(frozen=True)
class Bar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    adjusted_close: float
    volume: float


@dataclass(frozen=True)
class BarSeries:
    ticker: str
    bars: tuple[Bar, ...]

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def dates(self) -> list[dt.date]:
        return [b.date for b in self.bars]


@dataclass(frozen=True)
class IndicatorParams:
    macd_fast: int = 12
    macd_slow: int = 26
    rsi_period: int = 14
    cci_period: int = 14
    cci_constant: float = 0.015
    adx_period: int = 14
    warmup: int = 63
    turbulence_lookback: int = 252
    ridge: float = 1e-8


@dataclass(frozen=True)
class Panel:
    """Date-aligned multi-ticker table.

    Matrices are shaped ``(n_dates, n_tickers)``; ``turbulence`` has one value
    per date. Raw OHLC matrices are optional because a panel reloaded from
    its CSV export only carries what the environment consumes.
    """

    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    adjclose: np.ndarray
    high: np.ndarray | None = None
    low: np.ndarray | None = None
    close: np.ndarray | None = None
    macd: np.ndarray | None = None
    rsi: np.ndarray | None = None
    cci: np.ndarray | None = None
    adx: np.ndarray | None = None
    turbulence: np.ndarray | None = None
    # first date index (within ``dates``) whose turbulence had enough history
    turbulence_valid_from: int = 0
    dropped: tuple[tuple[str, str], ...] = ()
    warmup_cutoff: dt.date | None = None

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    @property
    def has_indicators(self) -> bool:
        return all(m is not None for m in (self.macd, self.rsi, self.cci, self.adx, self.turbulence))

    def index_of(self, date: dt.date) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise DataError(f"date {date.isoformat()} not in panel calendar") from None

    def slice_dates(self, start: int, stop: int) -> "Panel":
        """Sub-panel over date indices ``[start, stop)``."""
        def cut(m):
            return None if m is None else m[start:stop]
        return replace(
            self,
            dates=self.dates[start:stop],
            adjclose=cut(self.adjclose), high=cut(self.high), low=cut(self.low),
            close=cut(self.close), macd=cut(self.macd), rsi=cut(self.rsi),
            cci=cut(self.cci), adx=cut(self.adx), turbulence=cut(self.turbulence),
            turbulence_valid_from=max(0, self.turbulence_valid_from - start),
        )


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _read_rows(path: Path) -> list[tuple[int, str, Bar]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    rows: list[tuple[int, str, Bar]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty input")
        if tuple(h.strip().lower() for h in header) != CSV_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for record in reader:
            line = reader.line_num
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(CSV_HEADER):
                raise DataError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(record)}")
            try:
                date = _parse_date(record[0])
                o, h, lo, c, adj, vol = (float(x) for x in record[1:7])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            ticker = record[7].strip()
            values = np.array([o, h, lo, c, adj])
            if not np.all(np.isfinite(values)) or np.any(values <= 0):
                raise DataError(f"{path}:{line}: prices must be positive")
            if not np.isfinite(vol) or vol < 0:
                raise DataError(f"{path}:{line}: volume must be non-negative")
            if lo > min(o, c) or h < max(o, c):
                raise DataError(f"{path}:{line}: high/low do not bracket open/close")
            if not ticker:
                raise DataError(f"{path}:{line}: missing ticker")
            rows.append((line, ticker, Bar(date, o, h, lo, c, adj, vol)))
    if not rows:
        raise DataError(f"{path}: empty input")
    return rows


def _to_series(path: Path, ticker: str, rows: list[tuple[int, Bar]]) -> BarSeries:
    seen: dict[dt.date, int] = {}
    for line, bar in rows:
        if bar.date in seen:
            raise DataError(
                f"{path}:{line}: duplicate date {bar.date.isoformat()} for {ticker} "
                f"(first seen on line {seen[bar.date]})"
            )
        seen[bar.date] = line
    bars = tuple(sorted((b for _, b in rows), key=lambda b: b.date))
    return BarSeries(ticker, bars)


def load_ohlcv(path: str | Path) -> BarSeries:
    """Load a single-ticker CSV file, sorted by date."""
    rows = _read_rows(Path(path))
    tickers = {t for _, t, _ in rows}
    if len(tickers) != 1:
        raise DataError(f"{path}: expected one ticker, found {sorted(tickers)}; use load_ohlcv_many")
    ticker = tickers.pop()
    return _to_series(Path(path), ticker, [(line, bar) for line, _, bar in rows])


def load_ohlcv_many(path: str | Path) -> list[BarSeries]:
    """Load a combined CSV holding several tickers, one series per ticker.

    Series are returned in order of first appearance in the file.
    """
    rows = _read_rows(Path(path))
    grouped: dict[str, list[tuple[int, Bar]]] = defaultdict(list)
    for line, ticker, bar in rows:
        grouped[ticker].append((line, bar))
    return [_to_series(Path(path), t, r) for t, r in grouped.items()]


def load_paths(paths: Iterable[str | Path]) -> list[BarSeries]:
    """Load every CSV under the given files/directories (directories sorted by name)."""
    out: list[BarSeries] = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in files:
            out.extend(load_ohlcv_many(f))
    seen = set()
    for s in out:
        if s.ticker in seen:
            raise DataError(f"ticker {s.ticker} appears in more than one input")
        seen.add(s.ticker)
    return out


def write_ohlcv(series: Sequence[BarSeries], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in series:
            for b in s.bars:
                w.writerow([b.date.isoformat(), repr(b.open), repr(b.high), repr(b.low),
                            repr(b.close), repr(b.adjusted_close), repr(b.volume), s.ticker])


def align_panel(series: Sequence[BarSeries], min_start: dt.date | None = None) -> Panel:
    """Align tickers onto one dense trading calendar.

    The calendar is every date any remaining ticker traded inside the range
    all remaining tickers cover (and on/after ``min_start``). Tickers with a
    hole in that calendar are dropped with a warning and the calendar is
    recomputed until every remaining ticker is dense.
    """
    if not series:
        raise AlignmentError("no series to align")
    remaining = list(series)
    dropped: list[tuple[str, str]] = []
    while True:
        if not remaining:
            raise AlignmentError("every ticker was dropped during alignment")
        date_sets = {}
        for s in remaining:
            ds = {d for d in s.dates if min_start is None or d >= min_start}
            if not ds:
                raise AlignmentError(f"{s.ticker} has no dates on/after {min_start}")
            date_sets[s.ticker] = ds
        lo = max(min(ds) for ds in date_sets.values())
        hi = min(max(ds) for ds in date_sets.values())
        if lo > hi:
            raise AlignmentError("tickers share no common date range")
        calendar = sorted({d for ds in date_sets.values() for d in ds if lo <= d <= hi})
        gappy = []
        for s in remaining:
            missing = [d for d in calendar if d not in date_sets[s.ticker]]
            if missing:
                gappy.append((s, missing))
        if not gappy:
            break
        for s, missing in gappy:
            reason = f"missing {len(missing)} of {len(calendar)} dates (first {missing[0].isoformat()})"
            logger.warning("dropping %s: %s", s.ticker, reason)
            dropped.append((s.ticker, reason))
        gone = {id(s) for s, _ in gappy}
        remaining = [s for s in remaining if id(s) not in gone]

    cal_index = {d: i for i, d in enumerate(calendar)}
    shape = (len(calendar), len(remaining))
    mats = {k: np.empty(shape) for k in ("adjclose", "high", "low", "close")}
    for j, s in enumerate(remaining):
        for b in s.bars:
            i = cal_index.get(b.date)
            if i is None:
                continue
            mats["adjclose"][i, j] = b.adjusted_close
            mats["high"][i, j] = b.high
            mats["low"][i, j] = b.low
            mats["close"][i, j] = b.close
    return Panel(
        tickers=tuple(s.ticker for s in remaining),
        dates=tuple(calendar),
        dropped=tuple(dropped),
        **mats,
    )


def simple_returns(prices: np.ndarray) -> np.ndarray:
    return prices[1:] / prices[:-1] - 1.0


def compute_turbulence(panel: Panel, date_index: int, lookback: int, ridge: float = 1e-8) -> float:
    """Mahalanobis distance of one day's cross-sectional returns.

    ``y`` is the simple return from ``date_index - 1`` to ``date_index``.
    Mean and covariance come from the ``lookback - 1`` returns between the
    ``lookback`` prices preceding ``date_index``. The covariance gets a ridge
    of ``ridge * trace / N`` on its diagonal.
    """
    n = panel.n_tickers
    if lookback < n + 2:
        raise InsufficientHistoryError(f"lookback {lookback} < n_tickers + 2 = {n + 2}")
    if date_index < lookback or date_index >= panel.n_dates:
        raise InsufficientHistoryError(
            f"date_index {date_index} needs lookback {lookback} and must be < {panel.n_dates}")
    prices = panel.adjclose
    hist = simple_returns(prices[date_index - lookback:date_index])
    y = prices[date_index] / prices[date_index - 1] - 1.0
    return mahalanobis(y, hist, ridge)


def mahalanobis(y: np.ndarray, hist: np.ndarray, ridge: float) -> float:
    mu = hist.mean(axis=0)
    sigma = np.atleast_2d(np.cov(hist, rowvar=False))
    n = sigma.shape[0]
    dev = y - mu
    trace = np.trace(sigma)
    if trace == 0.0:
        # flat history: the ridge vanishes with the trace
        if np.all(dev == 0.0):
            return 0.0
        raise NumericalError("zero-variance return history with a non-zero deviation")
    sigma = sigma + np.eye(n) * (ridge * trace / n)
    try:
        x = np.linalg.solve(sigma, dev)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is singular after regularization: {exc}") from None
    value = float(dev @ x)
    if not np.isfinite(value):
        raise NumericalError("turbulence is not finite")
    return max(value, 0.0)


def turbulence_series(panel: Panel, lookback: int = 252, ridge: float = 1e-8) -> tuple[np.ndarray, int]:
    """Turbulence for every date plus the first index where it is defined.

    Until ``lookback`` prices are available the window expands from the
    first date; dates with fewer than ``n_tickers + 2`` prior prices get 0.
    """
    n = panel.n_tickers
    out = np.zeros(panel.n_dates)
    first = n + 2
    for t in range(first, panel.n_dates):
        out[t] = compute_turbulence(panel, t, min(lookback, t), ridge)
    return out, min(first, panel.n_dates)


def turbulence_threshold(history: Sequence[float] | np.ndarray, quantile: float = 90.0) -> float:
    """90th percentile with linear interpolation between order statistics."""
    values = np.asarray(history, dtype=np.float64)
    if values.size == 0:
        raise DataError("turbulence history is empty")
    return float(np.percentile(values, quantile))


def compute_indicators(panel: Panel, params: IndicatorParams = IndicatorParams()) -> Panel:
    """Fill MACD/RSI/CCI/ADX/turbulence and trim the warm-up prefix."""
    if panel.high is None or panel.low is None or panel.close is None:
        raise DataError("panel lacks high/low/close; indicators need the raw OHLC matrices")
    if panel.n_dates <= params.warmup + 1:
        raise InsufficientHistoryError(
            f"{panel.n_dates} dates but warm-up needs more than {params.warmup + 1}")
    close = panel.close
    filled = replace(
        panel,
        macd=indicators.macd(close, params.macd_fast, params.macd_slow),
        rsi=indicators.rsi(close, params.rsi_period),
        cci=indicators.cci(panel.high, panel.low, close, params.cci_period, params.cci_constant),
        adx=indicators.adx(panel.high, panel.low, close, params.adx_period),
    )
    turb, valid_from = turbulence_series(panel, params.turbulence_lookback, params.ridge)
    filled = replace(filled, turbulence=turb, turbulence_valid_from=valid_from)
    trimmed = filled.slice_dates(params.warmup, panel.n_dates)
    for name in ("macd", "rsi", "cci", "adx"):
        if np.isnan(getattr(trimmed, name)).any():
            raise InsufficientHistoryError(f"{name} still undefined after {params.warmup} warm-up dates")
    return replace(trimmed, warmup_cutoff=trimmed.dates[0])


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Columnar export: one row per (date, ticker)."""
    if not panel.has_indicators:
        raise DataError("panel has no indicators to export")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_HEADER)
        for i, d in enumerate(panel.dates):
            for j, t in enumerate(panel.tickers):
                w.writerow([d.isoformat(), t, repr(float(panel.adjclose[i, j])),
                            repr(float(panel.macd[i, j])), repr(float(panel.rsi[i, j])),
                            repr(float(panel.cci[i, j])), repr(float(panel.adx[i, j])),
                            repr(float(panel.turbulence[i]))])


def read_panel_csv(path: str | Path, turbulence_valid_from: int = 0) -> Panel:
    """Inverse of :func:`write_panel_csv`. Values round-trip exactly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    rows: dict[dt.date, dict[str, list[float]]] = {}
    tickers: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PANEL_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(PANEL_HEADER)}")
        for rec in reader:
            if len(rec) != len(PANEL_HEADER):
                raise DataError(f"{path}:{reader.line_num}: expected {len(PANEL_HEADER)} fields")
            try:
                d = _parse_date(rec[0])
                vals = [float(x) for x in rec[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
            if rec[1] not in tickers:
                tickers.append(rec[1])
            rows.setdefault(d, {})[rec[1]] = vals
    if not rows:
        raise DataError(f"{path}: empty input")
    dates = sorted(rows)
    shape = (len(dates), len(tickers))
    m = np.empty((6,) + shape)
    for i, d in enumerate(dates):
        if set(rows[d]) != set(tickers):
            raise DataError(f"{path}: date {d.isoformat()} is missing tickers")
        for j, t in enumerate(tickers):
            m[:, i, j] = rows[d][t]
    return Panel(
        tickers=tuple(tickers), dates=tuple(dates), adjclose=m[0],
        macd=m[1], rsi=m[2], cci=m[3], adx=m[4], turbulence=m[5][:, 0].copy(),
        turbulence_valid_from=turbulence_valid_from,
        warmup_cutoff=dates[0],
    )
