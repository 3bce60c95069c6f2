from .blocks import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    MBConv,
    SeparableConvBlock,
    SqueezeExcite,
    dense_param_count,
    depthwise_separable_conv,
    separable_param_count,
)
from .module import Module, Parameter, he_uniform, param

__all__ = [
    "BatchNorm2d", "Conv2d", "DepthwiseConv2d", "MBConv", "Module", "Parameter",
    "SeparableConvBlock", "SqueezeExcite", "dense_param_count", "depthwise_separable_conv",
    "he_uniform", "param", "separable_param_count",
]
