"""Minimal dense tensor library with reverse-mode differentiation."""
from . import ops
from .gradcheck import GradCheckResult, check_gradients, leaf64
from .ops import (
    conv1d,
    conv2d,
    softmax_lastdim,
    swish,
    transposed_conv1d,
    transposed_conv2d,
)
from .tensor import Tensor, backward, grad_enabled, gradients, no_grad

__all__ = [
    "Tensor", "backward", "gradients", "no_grad", "grad_enabled", "ops",
    "conv1d", "transposed_conv1d", "conv2d", "transposed_conv2d",
    "softmax_lastdim", "swish",
    "GradCheckResult", "check_gradients", "leaf64",
]
