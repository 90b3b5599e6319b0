"""Tiny convolutional backbone, FPN neck and the semantic segmentation branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Conv2d, Module, ModuleList, ops
from .diffcore.tensor import Tensor

LINEAR_GAIN = float(np.sqrt(0.5))
LEVEL_NAMES = ("P2", "P3", "P4", "P5")
LEVEL_STRIDES = (4, 8, 16, 32)
SEMANTIC_STRIDE = 8


@dataclass
class FeaturePyramid:
    levels: dict  # name -> Tensor [N, C, H/stride, W/stride]
    channels: int

    def as_list(self) -> list:
        return [self.levels[k] for k in LEVEL_NAMES]

    @property
    def strides(self) -> tuple:
        return LEVEL_STRIDES


@dataclass
class SemanticFeatureMap:
    features: Tensor  # [N, C, H/8, W/8]
    logits: Tensor  # [N, S, H/8, W/8]


class ConvStage(Module):
    def __init__(self, in_ch, out_ch, rng, first_stride=1, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=first_stride, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, dtype=dtype)

    def forward(self, x):
        x = ops.relu(self.conv1(x))
        x = ops.relu(self.conv2(x))
        return ops.maxpool2d(x, 2, 2)


class Backbone(Module):
    """Four conv stages + FPN.  Outputs P2..P5 at strides 4, 8, 16, 32.

    The first convolution has stride 2 so that the four 2x max-pools land on
    the pyramid strides.
    """

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 64), channels: int = 32, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.stages = ModuleList()
        in_ch = 3
        for i, w in enumerate(widths):
            self.stages.append(ConvStage(in_ch, w, rng, first_stride=2 if i == 0 else 1, dtype=dtype))
            in_ch = w
        self.lateral = ModuleList([Conv2d(w, channels, 1, rng, dtype=dtype, gain=LINEAR_GAIN) for w in widths])
        self.smooth = ModuleList([Conv2d(channels, channels, 3, rng, dtype=dtype, gain=LINEAR_GAIN) for _ in widths])

    def forward(self, image: Tensor) -> FeaturePyramid:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"backbone input size must be divisible by 32, got {h}x{w}")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        top = laterals[-1]
        merged = [top]
        for lat in reversed(laterals[:-1]):
            top = ops.add(lat, ops.bilinear_resize(top, lat.shape[2], lat.shape[3]))
            merged.append(top)
        merged.reverse()
        outs = [sm(m) for sm, m in zip(self.smooth, merged)]
        return FeaturePyramid(dict(zip(LEVEL_NAMES, outs)), self.channels)


class SemanticBranch(Module):
    """Fuse all pyramid levels at stride 8, refine with four 3x3 convs, predict stuff logits."""

    def __init__(self, rng: np.random.Generator, channels: int = 32, num_classes: int = 4, num_convs: int = 4, dtype=np.float32):
        super().__init__()
        self.align = ModuleList([Conv2d(channels, channels, 1, rng, dtype=dtype, gain=0.5 * LINEAR_GAIN) for _ in LEVEL_NAMES])
        self.convs = ModuleList([Conv2d(channels, channels, 3, rng, dtype=dtype) for _ in range(num_convs)])
        self.logits = Conv2d(channels, num_classes, 1, rng, dtype=dtype, init_std=0.01)

    def forward(self, pyr: FeaturePyramid) -> SemanticFeatureMap:
        ref = pyr.levels["P3"]
        th, tw = ref.shape[2], ref.shape[3]
        fused = None
        for conv, feat in zip(self.align, pyr.as_list()):
            x = ops.bilinear_resize(conv(feat), th, tw)
            fused = x if fused is None else ops.add(fused, x)
        x = fused
        for conv in self.convs:
            x = ops.relu(conv(x))
        return SemanticFeatureMap(features=x, logits=self.logits(x))
