"""Minimal reverse-mode autodiff over numpy float32 arrays."""

from . import ops
from .gradcheck import finite_difference_grad, gradcheck
from .ops import (
    add,
    concat,
    conv2d,
    div,
    exp,
    group_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    softmax,
    square,
    stop_gradient,
    straight_through,
    sub,
    swish,
    take_rows,
    transpose,
    upsample2x,
)
from .ops import sum as tsum
from .tensor import Tensor, as_tensor, backward, detect_anomaly, is_grad_enabled, no_grad

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "detect_anomaly",
    "div",
    "exp",
    "finite_difference_grad",
    "gradcheck",
    "group_norm",
    "is_grad_enabled",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "ops",
    "reshape",
    "sigmoid",
    "softmax",
    "square",
    "stop_gradient",
    "straight_through",
    "sub",
    "swish",
    "take_rows",
    "transpose",
    "tsum",
    "upsample2x",
]
