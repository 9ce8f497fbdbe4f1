"""Parameter updates for named tensor dictionaries."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


class Sgd:
    """Plain stochastic gradient descent, no momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = float(lr)

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / (1.0 - self.b1 ** self.t)
            vhat = self.v[k] / (1.0 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, params: dict[str, Tensor], lr: float):
    if name == "sgd":
        return Sgd(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}, expected 'sgd' or 'adam'")
