"""Named trainable parameters and the Adam update."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """Gradient-enabled leaf tensor carrying its own Adam moment buffers."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place, then clear gradients."""
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    for p in params:
        g = p.grad.astype(p.dtype, copy=False)
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1**t)
        v_hat = p.adam_v / (1 - beta2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.grad = None


class Adam:
    """Thin holder for Adam hyperparameters over a fixed parameter list."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
