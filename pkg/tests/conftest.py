import datetime as dt

import numpy as np
import pytest

from clstm_ppo import market_data as md
from clstm_ppo import synthetic
from clstm_ppo.env import EnvConfig


def make_panel(n_tickers=3, n_days=200, seed=0, lookback=30, volatility=0.015):
    series = synthetic.random_market(n_tickers, n_days, seed=seed, volatility=volatility)
    return md.compute_indicators(md.align_panel(series), md.IndicatorParams(turbulence_lookback=lookback))


def price_panel(prices, start=dt.date(2020, 1, 1), turbulence=None, tickers=None):
    """Panel with the given adjusted closes, zero indicators and (by default) zero turbulence."""
    prices = np.asarray(prices, dtype=np.float64)
    if prices.ndim == 1:
        prices = prices[:, None]
    n, k = prices.shape
    zeros = np.zeros_like(prices)
    turb = np.zeros(n) if turbulence is None else np.asarray(turbulence, dtype=np.float64)
    return md.Panel(
        tickers=tuple(tickers or [f"X{j}" for j in range(k)]),
        dates=tuple(synthetic.business_days(start, n)),
        adjclose=prices, macd=zeros, rsi=zeros.copy(), cci=zeros.copy(), adx=zeros.copy(),
        turbulence=turb,
    )


def config_for(panel, **kw):
    return EnvConfig(n_stocks=panel.n_tickers, **kw)


@pytest.fixture(scope="session")
def toy_panel():
    return make_panel(n_tickers=3, n_days=260, seed=11, lookback=30)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import ACCEPTANCE_LINES
    except ImportError:
        return
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
