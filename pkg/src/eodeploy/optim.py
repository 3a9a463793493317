"""Adam optimizer and the warmup + cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from typing import Dict

import numpy as np

from .tensor import FP32, Tensor


class Adam:
    """Adam with bias-corrected first/second moments.

    Parameters live in a name -> Tensor dict; ``step`` returns a new dict
    (tensors are immutable) and keeps moment state keyed by name.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
             lr: float = None) -> Dict[str, Tensor]:
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            g = np.asarray(g, dtype=np.float32)
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            new = p.data.astype(np.float32) - lr * mhat / (np.sqrt(vhat) + self.eps)
            out[name] = Tensor(new, dtype=FP32, requires_grad=True)
        return out


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float,
                     warmup_fraction: float = 0.1, min_lr: float = 0.0) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr."""
    if total_steps <= 0:
        return base_lr
    warm = max(1, int(round(warmup_fraction * total_steps))) \
        if warmup_fraction > 0 else 0
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
