"""Convolutional feature extractor producing 1/8, 1/16 and 1/32 scale maps.

Five stages of [conv3x3 stride 2, relu, conv3x3 stride 1, relu] with
channel schedule 16, 32, C, C, C; the last three stage outputs are the
multi-scale features. No pretraining, no residuals, no normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d


@dataclass
class MultiScaleFeatures:
    """Feature maps at strides 8, 16 and 32, all with C channels."""

    f8: Tensor
    f16: Tensor
    f32: Tensor


class Backbone:
    def __init__(self, rng: np.random.Generator, channels: int):
        self.channels = channels
        widths = [3, 16, 32, channels, channels, channels]
        self.stages = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.stages.append(
                (
                    Conv2d(rng, cin, cout, 3, stride=2, padding=1),
                    Conv2d(rng, cout, cout, 3, stride=1, padding=1),
                )
            )

    def forward(self, image: Tensor) -> MultiScaleFeatures:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected image [3,H,W], got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % 32 or w % 32:
            raise ValueError(f"image extents must be divisible by 32, got {h}x{w}")
        x = image
        taps = []
        for down, keep in self.stages:
            x = ad.relu(down(x))
            x = ad.relu(keep(x))
            taps.append(x)
        return MultiScaleFeatures(f8=taps[2], f16=taps[3], f32=taps[4])

    def params(self, prefix: str = "backbone") -> dict:
        out = {}
        for i, (down, keep) in enumerate(self.stages):
            out.update(down.params(f"{prefix}.s{i}.down"))
            out.update(keep.params(f"{prefix}.s{i}.keep"))
        return out
