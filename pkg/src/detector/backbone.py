"""
Backbone Module
Small strided convolution stack producing a single feature level
"""

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn


class ConfigError(ValueError):
    """Invalid detector or training configuration"""


@dataclass
class FeatureMap:
    """B x F x H' x W' features and the input pixels per feature cell"""
    values: torch.Tensor
    stride: int


class ConvBackbone(nn.Module):
    """Conv + ReLU stages; the product of stage strides is the output stride"""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64),
                 strides: Sequence[int] = (2, 2, 2, 1), in_channels: int = 3):
        super().__init__()
        if len(channels) != len(strides):
            raise ConfigError("backbone channels and strides must have equal length")

        layers = []
        prev = in_channels
        for out, stride in zip(channels, strides):
            layers += [nn.Conv2d(prev, out, kernel_size=3, stride=stride, padding=1), nn.ReLU(inplace=True)]
            prev = out
        self.body = nn.Sequential(*layers)
        self.out_channels = prev
        self.stride = 1
        for s in strides:
            self.stride *= s

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor) -> FeatureMap:
        height, width = images.shape[-2:]
        if height % self.stride or width % self.stride:
            raise ConfigError(
                f"Image size {height}x{width} is not divisible by backbone stride {self.stride}"
            )
        return FeatureMap(self.body(images), self.stride)
