"""Hand-written layers with explicit forward/backward passes.

Everything is float64. Forward products go through :func:`rowwise_matmul`,
which makes each sample's output independent of its batch-mates, so
re-evaluating a transition inside a shuffled minibatch reproduces the
rollout-time numbers bit for bit.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ContractError


def rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for a (B, I) batch, evaluated one row at a time."""
    return np.matmul(x[:, None, :], w)[:, 0, :]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Parameter:
    """A named float64 tensor with a same-shape gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64, order="C")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


class Module:
    """Minimal container: parameters and sub-modules are plain attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"{name}: shape {value.shape} != {p.shape}")
            p.value[...] = value


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what}: expected trailing dimension {width}, got shape {x.shape}")
    return x, single


class Linear(Module):
    """y = x W^T + b."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(orthogonal((out_features, in_features), gain, rng))
        self.bias = Parameter(np.zeros(out_features))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x, single = _as_batch(x, self.in_features, "linear input")
        self._x = x
        y = rowwise_matmul(x, self.weight.value.T) + self.bias.value
        return y[0] if single else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise ContractError("Linear.backward called without a recorded forward pass")
        dy2, single = _as_batch(dy, self.out_features, "linear grad")
        self.weight.grad += dy2.T @ self._x
        self.bias.grad += dy2.sum(axis=0)
        dx = dy2 @ self.weight.value
        return dx[0] if single else dx


class Tanh(Module):
    def __init__(self):
        self._y: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._y is None:
            raise ContractError("Tanh.backward called without a recorded forward pass")
        return dy * (1.0 - self._y ** 2)


def lstm_cell_forward(x, h, c, w_ih, w_hh, b):
    """One LSTM step on a batch; gate order is input, forget, cell, output.

    Returns ``(h_next, c_next, cache)`` where ``cache`` feeds
    :func:`lstm_cell_backward`.
    """
    hidden = h.shape[1]
    z = rowwise_matmul(x, w_ih.T) + rowwise_matmul(h, w_hh.T) + b
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:])
    c_next = f * c + i * g
    tc = np.tanh(c_next)
    h_next = o * tc
    return h_next, c_next, (x, h, c, i, f, g, o, tc)


def lstm_cell_backward(dh_next, dc_next, cache, w_ih, w_hh):
    """Gradients of one LSTM step. Returns ``(dx, dh, dc, dw_ih, dw_hh, db)``."""
    x, h, c, i, f, g, o, tc = cache
    do = dh_next * tc
    dc = dc_next + dh_next * o * (1.0 - tc ** 2)
    dz = np.concatenate((
        dc * g * i * (1.0 - i),
        dc * c * f * (1.0 - f),
        dc * i * (1.0 - g ** 2),
        do * o * (1.0 - o),
    ), axis=1)
    return dz @ w_ih, dz @ w_hh, dc * f, dz.T @ x, dz.T @ h, dz.sum(axis=0)


class LSTM(Module):
    """Single-layer LSTM over (batch, time, features) sequences."""

    def __init__(self, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None, forget_bias: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.weight_ih = Parameter(np.concatenate(
            [orthogonal((h, input_size), 1.0, rng) for _ in range(4)]))
        self.weight_hh = Parameter(np.concatenate(
            [orthogonal((h, h), 1.0, rng) for _ in range(4)]))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = forget_bias
        self.bias = Parameter(bias)
        self._caches: list | None = None

    def zero_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros((batch, self.hidden_size)), np.zeros((batch, self.hidden_size))

    def forward(self, xs: np.ndarray, h0: np.ndarray | None = None,
                c0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Run the sequence oldest-first.

        Returns all hidden states (B, T, H) and the final ``(h, c)``.
        """
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[2] != self.input_size:
            raise ValueError(f"LSTM input must be (batch, time, {self.input_size}), got {xs.shape}")
        batch, steps, _ = xs.shape
        zero_h, zero_c = self.zero_state(batch)
        h = zero_h if h0 is None else np.asarray(h0, dtype=np.float64)
        c = zero_c if c0 is None else np.asarray(c0, dtype=np.float64)
        if h.shape != (batch, self.hidden_size) or c.shape != (batch, self.hidden_size):
            raise ValueError("initial state shape does not match (batch, hidden)")
        w_ih, w_hh, b = self.weight_ih.value, self.weight_hh.value, self.bias.value
        hs = np.empty((batch, steps, self.hidden_size))
        caches = []
        for t in range(steps):
            h, c, cache = lstm_cell_forward(xs[:, t], h, c, w_ih, w_hh, b)
            hs[:, t] = h
            caches.append(cache)
        self._caches = caches
        return hs, h, c

    def backward(self, dhs: np.ndarray | None = None, dh_last: np.ndarray | None = None,
                 dc_last: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Backpropagation through time over the recorded sequence.

        ``dhs`` is the gradient w.r.t. every hidden output, ``dh_last`` /
        ``dc_last`` w.r.t. the final state. Returns ``(dxs, dh0, dc0)``.
        """
        if self._caches is None:
            raise ContractError("LSTM.backward called without a recorded forward pass")
        caches = self._caches
        batch = caches[0][0].shape[0]
        steps = len(caches)
        dh = np.zeros((batch, self.hidden_size)) if dh_last is None else dh_last.copy()
        dc = np.zeros((batch, self.hidden_size)) if dc_last is None else dc_last.copy()
        dxs = np.empty((batch, steps, self.input_size))
        w_ih, w_hh = self.weight_ih.value, self.weight_hh.value
        gw_ih = np.zeros_like(w_ih)
        gw_hh = np.zeros_like(w_hh)
        gb = np.zeros_like(self.bias.value)
        for t in reversed(range(steps)):
            if dhs is not None:
                dh = dh + dhs[:, t]
            dx, dh, dc, dwi, dwh, db = lstm_cell_backward(dh, dc, caches[t], w_ih, w_hh)
            dxs[:, t] = dx
            gw_ih += dwi
            gw_hh += dwh
            gb += db
        self.weight_ih.grad += gw_ih
        self.weight_hh.grad += gw_hh
        self.bias.grad += gb
        return dxs, dh, dc
