"""Minimal CPU tensor library with reverse-mode autodiff."""

from .conv import col2im, conv2d, conv_output_size, im2col
from .gradcheck import gradcheck, max_relative_error, numerical_grad
from .ops import (
    add,
    div,
    dropout,
    exp,
    global_avg_pool,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    one_hot,
    pad2d,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    standardize_rows,
    sub,
    sum,
    transpose,
)
from .tensor import Tape, Tensor, as_tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "col2im",
    "conv2d",
    "conv_output_size",
    "div",
    "dropout",
    "exp",
    "global_avg_pool",
    "gradcheck",
    "im2col",
    "is_grad_enabled",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "max_relative_error",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numerical_grad",
    "one_hot",
    "pad2d",
    "relu",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "standardize_rows",
    "sub",
    "sum",
    "transpose",
]
