"""The four networks: degradation G (HR -> LR), reconstruction R (LR -> HR),
the LR-domain discriminator D, and the frozen perceptual feature extractor P."""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import ConvLayer, ResidualBlock
from .tensor import Tensor


class Network:
    """Base: ordered named parameters plus an architecture descriptor."""

    name = "net"

    def parameters(self) -> "OrderedDict[str, Tensor]":
        raise NotImplementedError

    def arch(self) -> dict:
        raise NotImplementedError

    def load_parameters(self, values: "dict[str, np.ndarray]"):
        params = self.parameters()
        for name, tensor in params.items():
            if name not in values:
                raise ValueError(f"{self.name}: missing parameter {name!r} in checkpoint")
            arr = values[name]
            if tuple(arr.shape) != tensor.shape:
                raise ValueError(
                    f"{self.name}: shape mismatch for {name!r}: "
                    f"checkpoint {tuple(arr.shape)} vs model {tensor.shape}"
                )
            tensor.data = arr.astype(np.float32)


class DegradationNet(Network):
    """Learned HR -> LR mapping; downsampling via a stride-scale convolution."""

    name = "G"

    def __init__(self, scale: int, width: int = 32, blocks: int = 8, seed: int = 0):
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        rng = np.random.default_rng(seed)
        self.scale = scale
        self.width = width
        self.n_blocks = blocks
        self.head = ConvLayer(rng, 3, width, activation="relu")
        self.blocks = [ResidualBlock(rng, width) for _ in range(blocks)]
        self.down = ConvLayer(rng, width, width, stride=scale, activation="relu")
        self.tail = ConvLayer(rng, width, 3, activation="none")

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % self.scale or w % self.scale:
            raise ValueError(
                f"G input spatial size {h}x{w} must be a multiple of scale {self.scale}"
            )
        y = self.head(x)
        for blk in self.blocks:
            y = blk(y)
        y = self.down(y)
        return self.tail(y)

    def parameters(self):
        p = OrderedDict()
        p.update(self.head.parameters("head"))
        for i, blk in enumerate(self.blocks):
            p.update(blk.parameters(f"block{i}"))
        p.update(self.down.parameters("down"))
        p.update(self.tail.parameters("tail"))
        return p

    def arch(self):
        return {"type": "degradation", "scale": self.scale, "width": self.width, "blocks": self.n_blocks}


class ReconstructionNet(Network):
    """LR -> HR super-resolution net with sub-pixel (pixel shuffle) upsampling."""

    name = "R"

    def __init__(
        self,
        scale: int,
        width: Optional[int] = None,
        blocks: int = 16,
        residual_scale: Optional[float] = None,
        seed: int = 0,
    ):
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        if width is None:
            width = 64 if scale == 2 else 256
        if residual_scale is None:
            residual_scale = 1.0 if scale == 2 else 0.1
        rng = np.random.default_rng(seed)
        self.scale = scale
        self.width = width
        self.n_blocks = blocks
        self.residual_scale = residual_scale
        self.head = ConvLayer(rng, 3, width, activation="none")
        self.blocks = [ResidualBlock(rng, width, residual_scale) for _ in range(blocks)]
        self.body_tail = ConvLayer(rng, width, width, activation="none")
        self.upsample = []
        stages = {2: 1, 4: 2}[scale]
        for _ in range(stages):
            self.upsample.append(ConvLayer(rng, width, width * 4, activation="none"))
        self.tail = ConvLayer(rng, width, 3, activation="none")

    def __call__(self, y: Tensor) -> Tensor:
        feat = self.head(y)
        body = feat
        for blk in self.blocks:
            body = blk(body)
        body = self.body_tail(body) + feat
        up = body
        for conv in self.upsample:
            up = T.pixel_shuffle(conv(up), 2)
        return self.tail(up)

    def parameters(self):
        p = OrderedDict()
        p.update(self.head.parameters("head"))
        for i, blk in enumerate(self.blocks):
            p.update(blk.parameters(f"block{i}"))
        p.update(self.body_tail.parameters("body_tail"))
        for i, conv in enumerate(self.upsample):
            p.update(conv.parameters(f"up{i}"))
        p.update(self.tail.parameters("tail"))
        return p

    def arch(self):
        return {
            "type": "reconstruction",
            "scale": self.scale,
            "width": self.width,
            "blocks": self.n_blocks,
            "residual_scale": self.residual_scale,
        }


class Discriminator(Network):
    """LR-domain real/fake classifier: 4 strided convs, global pool, sigmoid."""

    name = "D"
    widths = (32, 64, 128, 256)

    def __init__(self, input_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_size = input_size
        self.convs = []
        in_c = 3
        for w in self.widths:
            self.convs.append(ConvLayer(rng, in_c, w, stride=2, activation="lrelu"))
            in_c = w
        self.fc = ConvLayer(rng, in_c, 1, k=1, activation="none")

    def __call__(self, y: Tensor) -> Tensor:
        n, c, h, w = y.shape
        if (h, w) != (self.input_size, self.input_size):
            raise ValueError(
                f"D expects {self.input_size}x{self.input_size} inputs, got {h}x{w}"
            )
        f = y
        for conv in self.convs:
            f = conv(f)
        pooled = T.mean(f, axis=(2, 3), keepdims=True)
        return T.sigmoid(self.fc(pooled))  # (N, 1, 1, 1), strictly inside (0, 1)

    def parameters(self):
        p = OrderedDict()
        for i, conv in enumerate(self.convs):
            p.update(conv.parameters(f"conv{i}"))
        p.update(self.fc.parameters("fc"))
        return p

    def arch(self):
        return {"type": "discriminator", "input_size": self.input_size, "widths": list(self.widths)}


# VGG19 layer plan up to the 4th conv of the 4th stage ("M" = 2x2 maxpool).
_VGG19_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512)


class FeatureExtractor(Network):
    """Frozen VGG19-topology feature stack ending at the 4th conv before the
    4th maxpool. Weights are seeded random by default; real weights can be
    loaded through the checkpoint format. Parameters never receive gradients.
    """

    name = "P"

    def __init__(self, seed: int = 0, width_scale: float = 1.0, input_size: int = 224):
        rng = np.random.default_rng(seed)
        self.width_scale = width_scale
        self.input_size = input_size
        self.plan = []
        self.convs = []
        in_c = 3
        for item in _VGG19_PLAN:
            if item == "M":
                self.plan.append("M")
                continue
            out_c = max(1, round(item * width_scale))
            conv = ConvLayer(rng, in_c, out_c, activation="relu")
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            self.convs.append(conv)
            self.plan.append(out_c)
            in_c = out_c
        self.out_channels = in_c

    def __call__(self, img: Tensor) -> Tensor:
        n, c, h, w = img.shape
        if c != 3 or (h, w) != (self.input_size, self.input_size):
            raise ValueError(
                f"P expects Nx3x{self.input_size}x{self.input_size} inputs, got {img.shape}"
            )
        f = img
        it = iter(self.convs)
        for item in self.plan:
            if item == "M":
                f = T.maxpool2d(f, 2)
            else:
                f = next(it)(f)
        return f

    def parameters(self):
        p = OrderedDict()
        for i, conv in enumerate(self.convs):
            p.update(conv.parameters(f"conv{i}"))
        return p

    def arch(self):
        return {
            "type": "feature_extractor",
            "width_scale": self.width_scale,
            "input_size": self.input_size,
            "plan": [x if x == "M" else int(x) for x in self.plan],
        }
