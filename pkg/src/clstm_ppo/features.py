"""LSTM feature extractor over a window of recent environment states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .nn.layers import LSTM, Linear, Module, Tanh


@dataclass(frozen=True)
class StateScales:
    """Block-wise divisors for the [b, p, h, M, R, C, X] state layout."""

    balance: float
    prices: np.ndarray
    holdings: float
    macd: float = 100.0
    rsi: float = 100.0
    cci: float = 100.0
    adx: float = 100.0

    @classmethod
    def identity(cls, n_stocks: int) -> "StateScales":
        return cls(1.0, np.ones(n_stocks), 1.0, 1.0, 1.0, 1.0, 1.0)

    @classmethod
    def from_panel(cls, panel, initial_capital: float, h_max: int) -> "StateScales":
        """Prices are scaled by each ticker's first price in the panel."""
        return cls(float(initial_capital), panel.adjclose[0].copy(), float(h_max))

    def vector(self) -> np.ndarray:
        n = len(self.prices)
        return np.concatenate((
            [self.balance], self.prices, np.full(n, self.holdings),
            np.full(n, self.macd), np.full(n, self.rsi),
            np.full(n, self.cci), np.full(n, self.adx),
        ))


def normalize_state(raw: np.ndarray, scales: StateScales) -> np.ndarray:
    divisor = scales.vector()
    if np.any(divisor <= 0):
        raise ValueError("state scales must be positive")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != divisor.size:
        raise ValueError(f"state has length {raw.shape[-1]}, scales expect {divisor.size}")
    return raw / divisor


def warm_pad(history: Sequence[np.ndarray], window: int) -> np.ndarray:
    """Last ``window`` states, left-padded by repeating the earliest one.

    Returns a ``(window, state_dim)`` array, oldest first.
    """
    if len(history) == 0:
        raise ContractError("cannot build a state window from an empty history")
    recent = list(history[-window:])
    pad = [recent[0]] * (window - len(recent))
    return np.stack(pad + recent)


class LSTMFeatureExtractor(Module):
    """LSTM over the window, last hidden state, then three linear+tanh layers."""

    def __init__(self, state_dim: int, hidden_size: int = 128, features_dim: int = 128,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        gain = float(np.sqrt(2.0))
        self.state_dim = state_dim
        self.features_dim = features_dim
        self.lstm = LSTM(state_dim, hidden_size, rng)
        self.linear1 = Linear(hidden_size, features_dim, rng, gain)
        self.linear2 = Linear(features_dim, features_dim, rng, gain)
        self.linear3 = Linear(features_dim, features_dim, rng, gain)
        self.act1, self.act2, self.act3 = Tanh(), Tanh(), Tanh()

    def forward(self, windows: np.ndarray) -> np.ndarray:
        """(B, T, state_dim) -> (B, features_dim)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[2] != self.state_dim:
            raise ValueError(f"expected windows of shape (B, T, {self.state_dim}), got {windows.shape}")
        _, h_last, _ = self.lstm.forward(windows)
        x = self.act1.forward(self.linear1.forward(h_last))
        x = self.act2.forward(self.linear2.forward(x))
        return self.act3.forward(self.linear3.forward(x))

    def backward(self, dfeatures: np.ndarray) -> np.ndarray:
        d = self.linear3.backward(self.act3.backward(dfeatures))
        d = self.linear2.backward(self.act2.backward(d))
        d = self.linear1.backward(self.act1.backward(d))
        dxs, _, _ = self.lstm.backward(dh_last=d)
        return dxs

    def extract(self, window: np.ndarray) -> np.ndarray:
        """Single (T, state_dim) window -> feature vector."""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2:
            raise ValueError("extract expects a single (T, state_dim) window")
        return self.forward(window[None])[0]
