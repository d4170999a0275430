"""Plain SGD and Adam acting in place on parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError


@dataclass
class OptimState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, kind, lr, params):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        state = cls(kind, lr)
        if kind == "adam":
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        return state


def _check(params, grads):
    if len(params) != len(grads):
        raise DimensionError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")


def sgd_step(params, grads, state):
    """``p -= lr * g`` for every array; returns ``params``."""
    _check(params, grads)
    for p, g in zip(params, grads):
        p -= state.lr * g
    state.step += 1
    return params


def adam_step(params, grads, state):
    """Adam with bias-corrected moments; returns ``params``."""
    _check(params, grads)
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Optimizer:
    """Binds an :class:`OptimState` to a list of tensors."""

    def __init__(self, params, kind="adam", lr=1e-4):
        self.params = list(params)
        self.state = OptimState.create(kind, lr, [p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        data = [p.data for p in self.params]
        if self.state.kind == "sgd":
            sgd_step(data, grads, self.state)
        else:
            adam_step(data, grads, self.state)
