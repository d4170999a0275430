"""Deterministic tanh-bounded policy shared by MOOSE and behavior cloning."""
from __future__ import annotations

import numpy as np

from .diffcore import Mlp, Tensor, forward_mlp, ops
from .diffcore.checkpoint import mlp_from_arrays, mlp_to_arrays, read_container, write_container


class DeterministicPolicy:
    """``a = tanh(mlp((s - mean) / std))``; identical states give identical actions."""

    def __init__(self, mlp, state_mean, state_std):
        self.mlp = mlp
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)

    @classmethod
    def init(cls, state_dim, action_dim, rng, hidden=(64, 64), state_mean=None, state_std=None):
        sizes = [state_dim, *hidden, action_dim]
        acts = ["relu"] * len(hidden) + ["tanh"]
        mean = np.zeros(state_dim) if state_mean is None else state_mean
        std = np.ones(state_dim) if state_std is None else state_std
        return cls(Mlp.init(sizes, acts, rng), mean, std)

    @property
    def state_dim(self):
        return self.mlp.sizes[0]

    @property
    def action_dim(self):
        return self.mlp.sizes[-1]

    def parameters(self):
        return self.mlp.parameters()

    def forward(self, s):
        """Differentiable action for a state tensor of shape (..., state_dim)."""
        z = ops.div(ops.sub(s, self.state_mean), self.state_std)
        return forward_mlp(self.mlp, z)

    def act(self, s):
        return self.forward(Tensor(s)).data

    def copy(self):
        return DeterministicPolicy(self.mlp.copy(), self.state_mean.copy(), self.state_std.copy())

    def save(self, path, extra=None):
        meta, arrays = mlp_to_arrays(self.mlp)
        arrays["state_mean"] = self.state_mean
        arrays["state_std"] = self.state_std
        write_container(path, "policy", {**meta, **(extra or {})}, arrays)

    @classmethod
    def load(cls, path):
        _, meta, arrays = read_container(path, "policy")
        return cls(mlp_from_arrays(meta, arrays), arrays["state_mean"], arrays["state_std"])
