"""Adam with bias correction."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, OptimizationError

MOMENT_FLUSH = 1e-200


def flush_moments(m, v):
    """Zero moment entries that would otherwise decay into subnormals."""
    m[np.abs(m) < MOMENT_FLUSH] = 0.0
    v[v < MOMENT_FLUSH] = 0.0


class Adam:
    """Adam optimizer updating a list of parameter arrays in place.

    Parameters
    ----------
    params : list of ndarray
        Arrays updated in place by :meth:`step`.
    lr : float
        Learning rate.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p) for p in self.params]
        self.second_moment = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise DimensionError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizationError(f"non-finite gradient at step {self.step_count + 1}")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        # bias corrections folded into the step size and epsilon
        lr_t = self.lr * np.sqrt(c2) / c1
        eps_t = self.eps * np.sqrt(c2)
        for p, g, m, v in zip(self.params, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            flush_moments(m, v)
            p -= lr_t * m / (np.sqrt(v) + eps_t)
