"""Evaluation measures over a daily equity curve and trade log.

Undefined measures (no trades, zero return variance) come back as ``None``
and are written as ``NA``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    cr: float
    mer: float
    mpb: float
    appt: float | None
    sr: float | None
    nt: int

    def rows(self) -> list[tuple[str, float | int | None]]:
        return [("CR", self.cr), ("MER", self.mer), ("MPB", self.mpb),
                ("APPT", self.appt), ("SR", self.sr), ("NT", self.nt)]

    def format(self) -> str:
        def pct(x):
            return f"{100 * x:.2f}%"
        return "\n".join([
            f"CR    {pct(self.cr)}",
            f"MER   {pct(self.mer)}",
            f"MPB   {pct(self.mpb)}",
            f"APPT  {'NA' if self.appt is None else f'{self.appt:.4f}'}",
            f"SR    {'NA' if self.sr is None else f'{self.sr:.4f}'}",
            f"NT    {self.nt}",
        ])


def _curve(curve) -> np.ndarray:
    a = np.asarray(curve, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("equity curve must be a non-empty 1-D sequence")
    return a


def cumulative_return(curve) -> float:
    a = _curve(curve)
    if a[0] <= 0:
        raise ValueError("initial portfolio value must be positive")
    return float((a[-1] - a[0]) / a[0])


def max_earning_rate(curve) -> float:
    """Largest (A_x - A_y) / A_y over y < x; 0 without a rising pair."""
    a = _curve(curve)
    if a.size < 2:
        return 0.0
    running_min = np.minimum.accumulate(a)[:-1]
    best = float(np.max((a[1:] - running_min) / running_min))
    return max(best, 0.0)


def max_pullback(curve) -> float:
    """Largest (A_y - A_x) / A_y over y < x, as a positive magnitude."""
    a = _curve(curve)
    if a.size < 2:
        return 0.0
    running_max = np.maximum.accumulate(a)[:-1]
    best = float(np.max((running_max - a[1:]) / running_max))
    return max(best, 0.0)


def appt(curve, n_trades: int) -> float | None:
    a = _curve(curve)
    if n_trades <= 0:
        return None
    return float((a[-1] - a[0]) / n_trades)


def sharpe(curve, risk_free_annual: float = 0.0, periods_per_year: int = 252) -> float | None:
    """Annualized Sharpe ratio of simple daily returns (sample std, ddof=1)."""
    a = _curve(curve)
    if a.size < 3:
        return None
    r = a[1:] / a[:-1] - 1.0
    mean = float(r.mean())
    std = float(r.std(ddof=1))
    if std <= 1e-12 * max(1.0, abs(mean)):
        return None
    return (mean * periods_per_year - risk_free_annual) / (std * math.sqrt(periods_per_year))


def count_trades(trades: Sequence) -> int:
    return sum(1 for t in trades if t.shares != 0)


def evaluate(curve, trades: Sequence, risk_free_annual: float = 0.0,
             periods_per_year: int = 252) -> MetricsReport:
    nt = count_trades(trades)
    return MetricsReport(
        cr=cumulative_return(curve),
        mer=max_earning_rate(curve),
        mpb=max_pullback(curve),
        appt=appt(curve, nt),
        sr=sharpe(curve, risk_free_annual, periods_per_year),
        nt=nt,
    )


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, "NA" if value is None else repr(value)])


def read_metrics_csv(path: str | Path) -> MetricsReport:
    values = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            v = row["value"]
            values[row["metric"]] = None if v == "NA" else float(v)
    return MetricsReport(values["CR"], values["MER"], values["MPB"], values["APPT"],
                         values["SR"], int(values["NT"]))
