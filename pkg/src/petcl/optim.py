"""Adam with a constant learning rate.

Moment buffers live per parameter and step counts are tracked per
parameter, so a tensor that is frozen for a while and later unfrozen
starts its bias correction fresh instead of inheriting stale counts.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params: list[Tensor] = []
        seen: set[int] = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}
        self._t = {id(p): 0 for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            key = id(p)
            self._t[key] += 1
            t = self._t[key]
            g = p.grad
            self._m[key] = self.beta1 * self._m[key] + (1.0 - self.beta1) * g
            self._v[key] = self.beta2 * self._v[key] + (1.0 - self.beta2) * g * g
            m_hat = self._m[key] / (1.0 - self.beta1 ** t)
            v_hat = self._v[key] / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
