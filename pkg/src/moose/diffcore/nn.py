"""Multilayer perceptrons with optional weight normalization.

An :class:`Mlp` can carry a leading *members* axis so that K independent
networks of identical shape run as one batched computation. Member ``k``
owns slice ``k`` of every parameter array and nothing else; its gradients
never mix with other members'.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass
class Layer:
    v: Tensor
    g: Tensor | None  # None for a plain (non-normalized) weight matrix stored in v
    b: Tensor
    activation: str

    def weight(self):
        if self.g is None:
            return self.v
        return T.weight_norm_effective(self.v, self.g)

    def params(self):
        return [p for p in (self.v, self.g, self.b) if p is not None]


class Mlp:
    """Feed-forward network ``sizes[0] -> ... -> sizes[-1]``.

    ``activations`` has one tag per layer. With ``members=K`` every parameter
    gains a leading axis of length K and ``forward`` expects input of shape
    ``(K, batch, in)``.
    """

    def __init__(self, layers, weight_norm, members=None):
        self.layers = list(layers)
        self.weight_norm = weight_norm
        self.members = members

    @classmethod
    def init(cls, sizes, activations, rng, weight_norm=False, members=None):
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation tag per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
        lead = () if members is None else (members,)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            v = rng.uniform(-limit, limit, size=lead + (fan_out, fan_in))
            b = np.zeros(lead + (1, fan_out) if members else (fan_out,))
            g = np.sqrt((v * v).sum(axis=-1)) if weight_norm else None
            layers.append(Layer(
                Tensor(v, requires_grad=True),
                None if g is None else Tensor(g, requires_grad=True),
                Tensor(b, requires_grad=True),
                act,
            ))
        return cls(layers, weight_norm, members)

    @property
    def sizes(self):
        return [self.layers[0].v.shape[-1]] + [layer.v.shape[-2] for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def effective_weights(self):
        """Effective weight arrays, detached from any graph."""
        return [layer.weight().data for layer in self.layers]

    def frozen(self):
        """Copy whose weights are pre-multiplied constants (no gradient, no weight-norm work)."""
        layers = []
        for layer in self.layers:
            layers.append(Layer(Tensor(layer.weight().data), None, Tensor(layer.b.data), layer.activation))
        return Mlp(layers, False, self.members)

    def copy(self):
        layers = []
        for layer in self.layers:
            layers.append(Layer(
                Tensor(layer.v.data.copy(), requires_grad=True),
                None if layer.g is None else Tensor(layer.g.data.copy(), requires_grad=True),
                Tensor(layer.b.data.copy(), requires_grad=True),
                layer.activation,
            ))
        return Mlp(layers, self.weight_norm, self.members)

    def member(self, k):
        """Stand-alone copy of member ``k`` (no members axis)."""
        if self.members is None:
            raise ContractError("network has no members axis")
        layers = []
        for layer in self.layers:
            layers.append(Layer(
                Tensor(layer.v.data[k].copy(), requires_grad=True),
                None if layer.g is None else Tensor(layer.g.data[k].copy(), requires_grad=True),
                Tensor(layer.b.data[k, 0].copy(), requires_grad=True),
                layer.activation,
            ))
        return Mlp(layers, self.weight_norm, None)

    def __call__(self, x):
        return forward_mlp(self, x)


def forward_mlp(params: Mlp, x) -> Tensor:
    h = T.as_tensor(x)
    if params.members is not None and (h.ndim != 3 or h.shape[0] != params.members):
        raise DimensionError(f"expected input of shape ({params.members}, batch, in), got {h.shape}")
    for i, layer in enumerate(params.layers):
        fan_in = layer.v.shape[-1]
        if h.shape[-1] != fan_in:
            raise DimensionError(f"layer {i}: expected input width {fan_in}, got {h.shape[-1]}")
        h = T.dense(h, layer.weight(), layer.b, layer.activation)
    return h
