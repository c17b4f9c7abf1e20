"""Minimal differentiable kernel: tensors, ops, optimizers, checkpoints."""

from .tensor import Tensor, as_tensor, backward, no_grad
from .ops import (
    GRU_PARAM_NAMES,
    add,
    concat,
    conv2d,
    cross_entropy,
    dense,
    dropout,
    features_to_sequence,
    flatten,
    gru_cell,
    gru_sequence,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh_op,
)
from .optim import OptimizerState, init_state, rmsprop_step, sgd_step, step

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad", "GRU_PARAM_NAMES", "add", "concat",
    "conv2d", "cross_entropy", "dense", "dropout", "features_to_sequence", "flatten",
    "gru_cell", "gru_sequence", "matmul", "maxpool2d", "mul", "relu", "reshape",
    "sigmoid", "softmax", "tanh_op", "OptimizerState", "init_state", "rmsprop_step",
    "sgd_step", "step",
]
