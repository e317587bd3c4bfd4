"""Finite-difference verification of metric gradients.

The oracle is a plain central difference of the metric's forward score; it
never touches the reverse-mode machinery, so agreement certifies the engine's
gradients independently.
"""
from __future__ import annotations

import math

import numpy as np

from .engine import Tensor, gradient
from .metrics import Metric


def central_difference_gradient(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Elementwise (f(x+h) - f(x-h)) / 2h."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi = x.copy()
        hi[idx] += step
        lo = x.copy()
        lo[idx] -= step
        grad[idx] = (fn(hi) - fn(lo)) / (2.0 * step)
    return grad


def max_relative_gradient_error(metric: Metric, a: np.ndarray, b: np.ndarray,
                                step: float = 1e-5, mask_threshold: float = 1e-6) -> float:
    """Worst relative disagreement between autodiff and central differences.

    Compared on d(a, x) at x = b over elements where either gradient exceeds
    `mask_threshold` in magnitude; returns 0.0 if no element qualifies. The
    default step keeps the oracle's truncation error well below the masked
    gradients for double precision; much larger steps make the oracle itself
    the dominant error on curved metrics.
    """
    b_t = Tensor(b, requires_grad=True)
    auto = gradient(metric.graph(Tensor(a), b_t), b_t)
    fd = central_difference_gradient(lambda x: metric.distance(a, x), b, step)
    if not (np.all(np.isfinite(auto)) and np.all(np.isfinite(fd))):
        # A NaN would silently empty the mask below; report outright failure.
        return math.inf
    denom = np.maximum(np.abs(auto), np.abs(fd))
    mask = denom > mask_threshold
    if not mask.any():
        return 0.0
    return float((np.abs(auto - fd)[mask] / denom[mask]).max())


def metric_gradcheck(metric: Metric, seed: int, shape: tuple[int, int, int] = (3, 16, 16),
                     step: float = 1e-5, mask_threshold: float = 1e-6) -> float:
    """Gradient check on a seeded random image pair in [-1, 1]."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, shape)
    b = rng.uniform(-1.0, 1.0, shape)
    return max_relative_gradient_error(metric, a, b, step=step, mask_threshold=mask_threshold)
