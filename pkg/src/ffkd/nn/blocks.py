"""Backbone building blocks: depthwise-separable conv, SE, MBConv."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import Tensor, functional as F, get_dtype
from .module import Module, he_uniform, param


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.weight = param(he_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int = 3, stride: int = 1, bias: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.weight = param(he_uniform(rng, (channels, k, k), k * k))
        self.bias = param(np.zeros(channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


def depthwise_separable_conv(x: Tensor, dw_weight, pw_weight, stride: int = 1,
                             dw_bias=None, pw_bias=None) -> Tensor:
    """Per-channel k x k conv followed by a 1 x 1 channel-mixing conv.

    ``dw_weight`` is (C, k, k); ``pw_weight`` is (C', C, 1, 1).
    """
    dw_weight = dw_weight if isinstance(dw_weight, Tensor) else Tensor(dw_weight)
    pw_weight = pw_weight if isinstance(pw_weight, Tensor) else Tensor(pw_weight)
    if x.shape[1] != dw_weight.shape[0] or pw_weight.shape[1] != dw_weight.shape[0]:
        raise ValueError(
            f"depthwise_separable_conv: channel mismatch, input {x.shape}, "
            f"depthwise {dw_weight.shape}, pointwise {pw_weight.shape}")
    h = F.depthwise_conv2d(x, dw_weight, dw_bias, stride=stride)
    return F.conv2d(h, pw_weight, pw_bias)


def dense_param_count(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k


def separable_param_count(cin: int, cout: int, k: int) -> int:
    return cin * k * k + cout * cin


class SeparableConvBlock(Module):
    """Depthwise k x k -> BN -> hard-swish -> pointwise -> BN [-> hard-swish]."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, act_out: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dw = DepthwiseConv2d(cin, k, stride, rng=rng)
        self.bn1 = BatchNorm2d(cin)
        self.pw = Conv2d(cin, cout, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.act_out = act_out

    def forward(self, x: Tensor) -> Tensor:
        h = F.hard_swish(self.bn1(self.dw(x)))
        h = self.bn2(self.pw(h))
        return F.hard_swish(h) if self.act_out else h


class SqueezeExcite(Module):
    """Channel gate: x * sigmoid(W2 relu(W1 mean_hw(x) + b1) + b2)."""

    def __init__(self, channels: int, reduction: int = 4, width: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        r = max(1, channels // reduction) if width is None else width
        if r < 1:
            raise ValueError(f"SE reduction width must be >= 1, got {r}")
        if r > channels:
            raise ValueError(f"SE reduction width {r} exceeds channel count {channels}")
        self.channels = channels
        self.width = r
        self.w1 = param(he_uniform(rng, (channels, r), channels))
        self.b1 = param(np.zeros(r))
        self.w2 = param(he_uniform(rng, (r, channels), r))
        self.b2 = param(np.zeros(channels))

    def gate(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)
        z = F.relu(F.add(F.matmul(s, self.w1), self.b1))
        return F.sigmoid(F.add(F.matmul(z, self.w2), self.b2))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gate(x)
        n, c = g.shape
        return F.mul(x, F.reshape(g, (n, c, 1, 1)))


class MBConv(Module):
    """Inverted residual: expand 1x1 -> depthwise -> SE -> project 1x1 (+ skip).

    The skip applies only for stride 1 with matching channel counts.
    """

    def __init__(self, cin: int, cout: int, expand: int = 4, k: int = 3, stride: int = 1,
                 se: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if expand < 1:
            raise ValueError(f"expansion ratio must be >= 1, got {expand}")
        rng = rng or np.random.default_rng(0)
        mid = cin * expand
        self.stride = stride
        self.use_skip = stride == 1 and cin == cout
        if expand > 1:
            self.expand_conv = Conv2d(cin, mid, 1, bias=False, rng=rng)
            self.expand_bn = BatchNorm2d(mid)
        else:
            self.expand_conv = None
            self.expand_bn = None
        self.dw = DepthwiseConv2d(mid, k, stride, rng=rng)
        self.dw_bn = BatchNorm2d(mid)
        self.se = SqueezeExcite(mid, rng=rng) if se else None
        self.project = Conv2d(mid, cout, 1, bias=False, rng=rng)
        self.project_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self.expand_conv is not None:
            h = F.hard_swish(self.expand_bn(self.expand_conv(h)))
        h = F.hard_swish(self.dw_bn(self.dw(h)))
        if self.se is not None:
            h = self.se(h)
        h = self.project_bn(self.project(h))
        return F.add(h, x) if self.use_skip else h
