"""Optimizers over ParameterStore tensors."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .models import ParameterStore


class SgdMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            store[name] = store[name] - self.lr * v


class Adam:
    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray]):
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name] = m
            self.v[name] = v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            store[name] = store[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.9,
                   betas: tuple[float, float] = (0.9, 0.999)):
    if name == "adam":
        return Adam(lr, betas)
    if name == "sgd_momentum":
        return SgdMomentum(lr, momentum)
    raise ConfigError(f"unknown optimizer {name!r}")


def optimizer_step(store: ParameterStore, grads: dict[str, np.ndarray], opt):
    """Apply one update; the store's step counter advances exactly once."""
    for name, g in grads.items():
        if store[name].shape != g.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, "
                                f"parameter has {store[name].shape}")
    opt.step(store, grads)
    store.step_count += 1
