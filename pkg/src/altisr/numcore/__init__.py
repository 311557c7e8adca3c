"""Minimal f64 tensor arithmetic with reverse-mode gradients and ADAM."""

from .tensor import (
    NumericError,
    Tensor,
    activation,
    add,
    backward,
    conv2d,
    dense,
    depthwise_conv2d,
    l1_loss,
    mul,
    relu,
    reshape,
    sigmoid,
    tensor_sum,
)
from .params import ParamSet
from .optim import AdamState, adam_step
from .checkpoint import load_params, save_params

__all__ = [
    "NumericError",
    "Tensor",
    "ParamSet",
    "AdamState",
    "activation",
    "add",
    "adam_step",
    "backward",
    "conv2d",
    "dense",
    "depthwise_conv2d",
    "l1_loss",
    "load_params",
    "mul",
    "relu",
    "reshape",
    "save_params",
    "sigmoid",
    "tensor_sum",
]
