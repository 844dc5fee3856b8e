"""Minimal dense tensors with exact reverse-mode gradients."""

from . import ops, snapshot
from .gradcheck import GradCheckReport, check_gradients, numerical_grad
from .kernels import BACKEND
from .ops import (
    adaptive_avg_pool2d,
    add,
    batchnorm2d,
    concat,
    conv2d,
    euclidean_distance,
    global_avg_pool,
    index,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    pairwise_distance,
    relu,
    reshape,
    scale,
    shift,
    softmax,
    sub,
    transpose,
)
from .tensor import Tape, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "BACKEND", "GradCheckReport", "Tape", "Tensor", "adaptive_avg_pool2d", "add", "as_tensor",
    "batchnorm2d", "check_gradients", "concat", "conv2d", "euclidean_distance", "global_avg_pool",
    "index", "is_grad_enabled", "l2_normalize", "linear", "log_softmax", "matmul", "mean", "mul",
    "no_grad", "numerical_grad", "ops", "pairwise_distance", "relu", "reshape", "scale", "shift",
    "snapshot", "softmax", "sub", "transpose",
]
