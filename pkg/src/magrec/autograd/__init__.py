"""Minimal reverse-mode automatic differentiation over dense fp64 arrays."""

from magrec.autograd.functional import (
    add,
    bce_loss,
    concat,
    elementwise,
    gather_rows,
    leaky_relu,
    matmul,
    mul,
    relu,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax_rows,
    sub,
    tanh,
)
from magrec.autograd.optim import Adam, AdamState, adam_step
from magrec.autograd.tensor import Tape, Tensor, as_tensor, backward, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "bce_loss",
    "concat",
    "elementwise",
    "gather_rows",
    "leaky_relu",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "segment_softmax",
    "segment_sum",
    "sigmoid",
    "softmax_rows",
    "sub",
    "tanh",
]
