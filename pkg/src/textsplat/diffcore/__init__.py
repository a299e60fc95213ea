"""Reverse-mode autodiff tensor engine, parameter store, Adam, gradcheck."""

from .tensor import (
    GraphConsumedError,
    ShapeError,
    Tensor,
    activation,
    add,
    backward,
    clip,
    concat,
    conv2d_3x3,
    div,
    exp,
    from_op,
    getitem,
    grid_sample_bilinear,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    powc,
    reshape,
    sigmoid,
    silu,
    softmax_lastdim,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    transpose,
    upsample2x_bilinear,
    where_const,
)
from .params import OPT_PREFIX, ParameterStore, read_checkpoint
from .optim import MissingGradientError, adam_step
from .fdcheck import gradcheck, numeric_grad

__all__ = [
    "GraphConsumedError", "ShapeError", "Tensor", "activation", "add", "backward",
    "clip", "concat", "conv2d_3x3", "div", "exp", "from_op", "getitem",
    "grid_sample_bilinear", "layer_norm", "log", "matmul", "mean", "mul", "neg",
    "powc", "reshape", "sigmoid", "silu", "softmax_lastdim", "sqrt", "stack",
    "sub", "sum_", "take", "transpose", "upsample2x_bilinear", "where_const",
    "OPT_PREFIX", "ParameterStore", "read_checkpoint",
    "MissingGradientError", "adam_step", "gradcheck", "numeric_grad",
]
