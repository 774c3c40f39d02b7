"""Cascaded-LSTM PPO stock trading: data, environment, agent, backtest, metrics."""

__version__ = "0.1.0"
