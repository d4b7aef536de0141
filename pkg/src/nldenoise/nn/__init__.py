"""Minimal numpy tensor engine: layer forward/backward, weights I/O, complexity."""

from .functional import (
    add,
    batchnorm,
    batchnorm_backward,
    concat_channels,
    concat_backward,
    conv2d,
    conv2d_backward,
    deconv2x2,
    deconv2x2_backward,
    depthwise_conv2d,
    depthwise_conv2d_backward,
    dwsep_conv,
    dwsep_conv_backward,
    l1_loss,
    relu,
    relu_backward,
)
from .params import WeightFileError, load_weights, save_weights
from .complexity import FlopsReport, count_flops, count_params

__all__ = [
    "add", "batchnorm", "batchnorm_backward", "concat_channels", "concat_backward",
    "conv2d", "conv2d_backward", "deconv2x2", "deconv2x2_backward",
    "depthwise_conv2d", "depthwise_conv2d_backward", "dwsep_conv", "dwsep_conv_backward",
    "l1_loss", "relu", "relu_backward",
    "WeightFileError", "load_weights", "save_weights",
    "FlopsReport", "count_flops", "count_params",
]
