"""Numeric substrate: tensors with reverse-mode gradients, MLPs, optimizers."""
from . import tensor as ops
from .checkpoint import load_mlp, read_container, save_mlp, write_container
from .nn import Layer, Mlp, forward_mlp
from .optim import Optimizer, OptimState, adam_step, sgd_step
from .tensor import Tensor, weight_norm_effective

__all__ = [
    "Tensor", "ops", "Layer", "Mlp", "forward_mlp", "weight_norm_effective",
    "Optimizer", "OptimState", "sgd_step", "adam_step",
    "write_container", "read_container", "save_mlp", "load_mlp",
]
