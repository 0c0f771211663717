"""Minimal float64 tensor engine with reverse-mode gradients."""

from .tensor import (
    Tensor, add, bce_with_logits, channel_affine, concat, conv2d, grad_enabled, linear,
    max_over_points, mean_all, mul, no_grad, relu, reshape, scale, scatter_cells, sigmoid,
    slice_axis0, smooth_l1, sub, sum_all, tanh,
)
from .nn import (
    SGD, ChannelAffine, Conv2d, ConvBlock, Linear, Module, apply_filter_factor,
    load_checkpoint, save_checkpoint, sgd_step,
)
from .gradcheck import check_gradients, numeric_grad, relative_error

__all__ = [
    "Tensor", "add", "bce_with_logits", "channel_affine", "concat", "conv2d", "grad_enabled",
    "linear", "max_over_points", "mean_all", "mul", "no_grad", "relu", "reshape", "scale",
    "scatter_cells", "sigmoid", "slice_axis0", "smooth_l1", "sub", "sum_all", "tanh",
    "SGD", "ChannelAffine", "Conv2d", "ConvBlock", "Linear", "Module", "apply_filter_factor",
    "load_checkpoint", "save_checkpoint", "sgd_step",
    "check_gradients", "numeric_grad", "relative_error",
]
