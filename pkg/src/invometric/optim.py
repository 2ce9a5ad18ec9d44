"""Adam over lists of numpy parameter arrays."""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ShapeError


class Adam:
    """Bias-corrected Adam, updating parameters in place.

    The correction is folded into the step size,
    ``lr * sqrt(1 - beta2**t) / (1 - beta1**t)``, with ``eps`` added to
    ``sqrt(v)``. ``m`` and ``v`` are created lazily on the first step and
    matched to parameters by position.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        params = list(params)
        grads = list(grads)
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params) or any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ShapeError("parameter list changed shape between steps")

        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = float(self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t))
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (step_size * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)
