"""Adam over named numpy parameters."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; learning rates may differ per parameter.

    Parameters are updated in place. Moments are created lazily and can be
    re-indexed with :meth:`select_rows` when a parameter's rows change.
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def rate(self, name: str) -> float:
        return self.lr[name] if isinstance(self.lr, dict) else self.lr

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.rate(name) / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def select_rows(self, name: str, idx: np.ndarray) -> None:
        """Keep (and possibly repeat) the moment rows listed in ``idx``."""
        if name in self.m:
            self.m[name] = self.m[name][idx]
            self.v[name] = self.v[name][idx]

    def extend_rows(self, name: str, count: int) -> None:
        """Append ``count`` zero-moment rows."""
        if name in self.m:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])
