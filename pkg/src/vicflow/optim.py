"""Adam with bias correction and optional decoupled weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor, UsageError


class Adam:
    """Adam over a fixed list of parameter tensors.

    Moments are float64 and keyed by position in ``params``. ``weight_decay``
    is applied decoupled from the gradient (AdamW style).
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            names = [self.params[i].name or f"#{i}" for i in missing[:5]]
            raise UsageError(f"adam step without gradients for {names}")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update.astype(p.dtype)
