"""Layer building blocks shared by all networks: conv layers with optional
activation, residual blocks with residual scaling, and seeded He-style
parameter initialization."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Parameter collections are name -> Tensor, in deterministic insertion order.
ModelParams = "OrderedDict[str, Tensor]"

INIT_SCHEME = "he-fan-in-normal"


def he_conv_weight(rng: np.random.Generator, out_c: int, in_c: int, k: int, gain: float = 2.0) -> Tensor:
    """He fan-in scaled normal init for a conv weight, float32.

    gain 2 is the relu default; activation-free layers use gain 1 so deep
    linear stacks keep unit variance.
    """
    fan_in = in_c * k * k
    std = math.sqrt(gain / fan_in)
    w = rng.standard_normal((out_c, in_c, k, k)) * std
    return Tensor(w.astype(np.float32), requires_grad=True)


def zero_bias(out_c: int) -> Tensor:
    return Tensor(np.zeros(out_c, dtype=np.float32), requires_grad=True)


class ConvLayer:
    """3x3 (or any odd-k) convolution with same-padding and optional activation."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_c: int,
        out_c: int,
        k: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        activation: str = "none",
        lrelu_slope: float = 0.2,
    ):
        if k % 2 == 0:
            raise ValueError(f"ConvLayer kernel size must be odd, got {k}")
        if activation not in ("none", "relu", "lrelu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = he_conv_weight(rng, out_c, in_c, k, gain=2.0 if activation != "none" else 1.0)
        self.bias = zero_bias(out_c)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.activation = activation
        self.lrelu_slope = lrelu_slope

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.activation == "relu":
            y = T.relu(y)
        elif self.activation == "lrelu":
            y = T.leaky_relu(y, self.lrelu_slope)
        return y

    def parameters(self, prefix: str) -> "OrderedDict[str, Tensor]":
        return OrderedDict([(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)])


class ResidualBlock:
    """x + scale * conv(relu(conv(x))), shape preserving."""

    def __init__(self, rng: np.random.Generator, width: int, residual_scale: float = 1.0, k: int = 3):
        if not (0.0 <= residual_scale <= 1.0):
            raise ValueError(f"residual_scale must lie in [0, 1], got {residual_scale}")
        self.conv1 = ConvLayer(rng, width, width, k=k, activation="relu")
        self.conv2 = ConvLayer(rng, width, width, k=k, activation="none")
        self.residual_scale = residual_scale
        self.width = width

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.width:
            raise ValueError(
                f"ResidualBlock of width {self.width} got input with {x.shape[1]} channels"
            )
        body = self.conv2(self.conv1(x))
        return x + body * self.residual_scale

    def parameters(self, prefix: str) -> "OrderedDict[str, Tensor]":
        p = OrderedDict()
        p.update(self.conv1.parameters(f"{prefix}.conv1"))
        p.update(self.conv2.parameters(f"{prefix}.conv2"))
        return p
