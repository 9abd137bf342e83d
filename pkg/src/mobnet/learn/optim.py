"""Adam and the linear learning-rate schedule."""
from __future__ import annotations

import numpy as np


def lr_at(epoch: int, lr_start: float = 0.05, lr_end: float = 5e-4, decay_epochs: int = 100) -> float:
    """Linear from ``lr_start`` at epoch 0 to ``lr_end`` at ``decay_epochs``, constant afterwards."""
    if not 0 < lr_end <= lr_start:
        raise ValueError("need 0 < lr_end <= lr_start")
    if decay_epochs <= 0 or epoch >= decay_epochs:
        return lr_end
    return lr_start + (lr_end - lr_start) * epoch / decay_epochs


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
