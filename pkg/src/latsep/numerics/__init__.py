"""Minimal differentiable tensor toolkit backing the separation blocks."""

from .tensor import Tensor, Parameter, no_grad, grad_enabled, as_tensor
from . import ops
from .ops import (
    add, sub, mul, div, neg, sqrt, exp, relu, softmax, sum_, sum_canonical,
    mean, reshape, moveaxis, concat, stack, pad2d, crop2d, take_rows, matmul,
    linear, conv2d, transposed_conv2d, batch_norm, RunningStats, latent_mix,
)
from .gradcheck import grad_check, GradCheckReport, ParamCheck

__all__ = [
    "Tensor", "Parameter", "no_grad", "grad_enabled", "as_tensor", "ops",
    "add", "sub", "mul", "div", "neg", "sqrt", "exp", "relu", "softmax",
    "sum_", "sum_canonical", "mean", "reshape", "moveaxis", "concat", "stack",
    "pad2d", "crop2d", "take_rows", "matmul", "linear", "conv2d",
    "transposed_conv2d", "batch_norm", "RunningStats", "latent_mix",
    "grad_check", "GradCheckReport", "ParamCheck",
]
