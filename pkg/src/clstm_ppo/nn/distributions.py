"""Diagonal Gaussian with state-independent log standard deviations."""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Sum over action dimensions; ``x``/``mean`` are (B, N) or (N,)."""
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob_grads(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d log_prob / d mean and d log_prob / d log_std, per sample."""
    inv_var = np.exp(-2.0 * log_std)
    diff = x - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 + 0.5 * LOG_2PI))
