"""Convolutional encoders and the multi-scale value map."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    channels: tuple = (16, 16, 32, 32, 64, 64, 128, 128, 256, 256)
    strides: tuple = (1, 1, 2, 1, 2, 1, 2, 1, 2, 1)
    kernel_size: int = 3
    padding: int = 1
    negative_slope: float = 0.2

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")

    @property
    def downsample(self):
        out = 1
        for s in self.strides:
            out *= s
        return out

    @property
    def value_dim(self):
        return sum(self.channels)


class Encoder(nn.Module):
    """Plain Conv + LeakyReLU stack returning every intermediate activation."""

    def __init__(self, config=EncoderConfig()):
        super().__init__()
        self.config = config
        layers = []
        c_in = config.in_channels
        for c_out, stride in zip(config.channels, config.strides):
            layers.append(nn.Conv2d(c_in, c_out, config.kernel_size, stride, config.padding))
            c_in = c_out
        self.convs = nn.ModuleList(layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if x.shape[-1] % self.config.downsample or x.shape[-2] % self.config.downsample:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {self.config.downsample}"
            )
        pyramid = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.config.negative_slope)
            pyramid.append(x)
        return pyramid


def encode(image, encoder):
    return encoder(image)


def build_value_map(pyramid):
    """Average-pool every activation to the deepest map's size and stack.

    Returns a (B, d_v, h*w) tensor whose column i is the feature of region i
    (row-major over the bottleneck grid).
    """
    h, w = pyramid[-1].shape[-2:]
    pooled = []
    for f in pyramid[:-1]:
        fh, fw = f.shape[-2:]
        if fh % h or fw % w:
            raise ValueError(f"activation {fh}x{fw} does not pool evenly to {h}x{w}")
        pooled.append(F.avg_pool2d(f, (fh // h, fw // w)) if (fh, fw) != (h, w) else f)
    pooled.append(pyramid[-1])
    v = torch.cat(pooled, dim=1)
    return v.flatten(2)
