"""Numpy-backed tensors with a reverse-mode gradient tape."""

from .core import DEFAULT_DTYPE, Node, Tape, Tensor, active_tape, as_tensor
from .functional import (
    add,
    concat,
    conv1d_tf,
    conv2d,
    cross_entropy,
    dropout,
    exp,
    fully_connected,
    log,
    log_softmax,
    lrn,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    resolve_padding,
    softmax,
    sub,
    sum,
    take,
    take_per_row,
    transpose,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error

__all__ = [
    "DEFAULT_DTYPE", "Node", "Tape", "Tensor", "active_tape", "as_tensor",
    "add", "concat", "conv1d_tf", "conv2d", "cross_entropy", "dropout", "exp",
    "fully_connected", "log", "log_softmax", "lrn", "matmul", "maxpool2d",
    "mean", "mul", "relu", "reshape", "resolve_padding", "softmax", "sub", "sum",
    "take", "take_per_row", "transpose",
    "check_gradients", "numerical_gradient", "relative_error",
]
