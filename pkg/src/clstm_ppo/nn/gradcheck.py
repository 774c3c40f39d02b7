"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Parameter


def numerical_gradients(loss: Callable[[], float], params: Sequence[Parameter],
                        step: float = 1e-5) -> list[np.ndarray]:
    """Perturb every parameter element by +/- ``step`` and difference ``loss``."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + step
            up = loss()
            p.value[idx] = orig - step
            down = loss()
            p.value[idx] = orig
            g[idx] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference round-off by nothing.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss: Callable[[], float], analytic: Callable[[], None],
                    params: Sequence[Parameter], step: float = 1e-5,
                    floor: float = 1e-4) -> float:
    """Worst elementwise relative error between analytic and numeric gradients.

    ``analytic`` must run forward + backward, accumulating into ``.grad``
    of freshly zeroed parameters.
    """
    for p in params:
        p.zero_grad()
    analytic()
    grads = [p.grad.copy() for p in params]
    numeric = numerical_gradients(loss, params, step)
    return max(float(relative_errors(a, n, floor).max()) for a, n in zip(grads, numeric))
