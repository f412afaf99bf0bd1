"""Adam with per-group learning rates."""

from __future__ import annotations

import math

import numpy as np

from .diffcore import NonFiniteError, Parameter


class Adam:
    """Bias-corrected Adam over a list of :class:`Parameter`.

    ``group_lrs`` maps ``Parameter.group`` to a learning rate; groups not listed
    use ``lr``. With ``total_steps`` and ``cosine=True`` every rate follows a
    cosine decay to zero over ``total_steps``.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, group_lrs: dict[str, float] | None = None,
                 cosine: bool = False, total_steps: int | None = None):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.group_lrs = dict(group_lrs or {})
        self.cosine = cosine
        self.total_steps = total_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self._work = [(np.empty_like(p.values), np.empty_like(p.values)) for p in self.params]

    def lr_for(self, p: Parameter) -> float:
        lr = self.group_lrs.get(p.group, self.lr)
        if self.cosine and self.total_steps:
            frac = min(self.step_count, self.total_steps) / self.total_steps
            lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grads)):
                raise NonFiniteError(f"non-finite gradient in parameter {p.name!r} at step {self.step_count + 1}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v, (a, b) in zip(self.params, self.m, self.v, self._work):
            g = p.grads
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=a)
            m += a
            v *= self.beta2
            np.multiply(g, g, out=a)
            a *= 1.0 - self.beta2
            v += a
            # lr * (m / bc1) / (sqrt(v / bc2) + eps), without temporaries
            np.divide(m, bc1, out=a)
            a *= self.lr_for(p)
            np.divide(v, bc2, out=b)
            np.sqrt(b, out=b)
            b += self.eps
            a /= b
            p.values -= a
