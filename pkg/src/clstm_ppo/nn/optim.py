"""Adam and global-norm gradient clipping."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NumericalError
from .layers import Parameter


class Adam:
    """Bias-corrected Adam over a fixed, named list of parameters."""

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for _, p in self.named_params]
        self.v = [np.zeros_like(p.value) for _, p in self.named_params]
        self.t = 0

    def step(self):
        for name, p in self.named_params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (_, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float = 0.5) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm([p.grad for p in params])
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm
