"""Adam optimizer over a ParamStore, gated by per-parameter trainable flags.

Frozen parameters still receive gradients during backward (useful for
diagnostics); the optimizer simply never reads them, so frozen tensors and
their optimizer state stay bit-identical across any number of steps.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .params import ParamStore


class Adam:
    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0.0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, entry in self.store.items():
            if not entry.trainable:
                continue
            g = entry.tensor.grad
            if g is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(entry.tensor.data)
                self._v[name] = np.zeros_like(entry.tensor.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            entry.tensor.data -= self.lr * update
