"""Colorization generator: twin encoders, SCFT, residual blocks, U-Net decoder."""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import SCFT
from .encoder import Encoder, EncoderConfig, build_value_map

# Indices (0-based) into the sketch pyramid used as decoder skips, coarse to fine.
SKIP_LAYERS = (7, 5, 3, 1)
DECODER_CHANNELS = (128, 64, 32, 16)
BOTTLENECK_CHANNELS = 256
NUM_RESBLOCKS = 4


def conv3x3(c_in, c_out):
    return nn.Conv2d(c_in, c_out, 3, 1, 1, padding_mode="reflect")


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(channels, channels),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            conv3x3(channels, channels),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class UpStage(nn.Module):
    """Nearest x2 upsample, concatenate the batch-normalized skip, conv + BN + ReLU.

    Encoder activations carry no normalization and their scale varies by
    orders of magnitude across depth, so skips are normalized before the merge.
    """

    def __init__(self, c_in, c_skip, c_out, normalize_skip=True):
        super().__init__()
        self.skip_norm = nn.BatchNorm2d(c_skip) if normalize_skip else nn.Identity()
        self.conv = conv3x3(c_in + c_skip, c_out)
        self.norm = nn.BatchNorm2d(c_out)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, self.skip_norm(skip)], dim=1)
        return F.relu(self.norm(self.conv(x)))


class Decoder(nn.Module):
    def __init__(self, c_in=BOTTLENECK_CHANNELS, skip_channels=(128, 64, 32, 16),
                 channels=DECODER_CHANNELS):
        super().__init__()
        stages = []
        for c_skip, c_out in zip(skip_channels, channels):
            stages.append(UpStage(c_in, c_skip, c_out))
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.to_rgb = conv3x3(c_in, 3)

    def forward(self, x, skips):
        for stage, skip in zip(self.stages, skips):
            x = stage(x, skip)
        return torch.tanh(self.to_rgb(x))


@dataclass
class GeneratorOutput:
    image: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    attention: Optional[torch.Tensor]  # (B, hw, hw), None for add/adain
    sketch_values: torch.Tensor  # (B, d_v, hw)
    reference_values: torch.Tensor  # (B, d_v, hw)


class Generator(nn.Module):
    def __init__(self, aggregation="scft", encoder_config=EncoderConfig()):
        super().__init__()
        self.sketch_encoder = Encoder(EncoderConfig(**{**encoder_config.__dict__, "in_channels": 1}))
        self.reference_encoder = Encoder(EncoderConfig(**{**encoder_config.__dict__, "in_channels": 3}))
        dim = encoder_config.value_dim
        self.scft = SCFT(dim, aggregation)
        self.entry = nn.Conv2d(dim, BOTTLENECK_CHANNELS, 1)
        self.resblocks = nn.Sequential(*[ResBlock(BOTTLENECK_CHANNELS) for _ in range(NUM_RESBLOCKS)])
        skip_channels = tuple(encoder_config.channels[i] for i in SKIP_LAYERS)
        self.decoder = Decoder(BOTTLENECK_CHANNELS, skip_channels)

    def decode(self, context, skips):
        """context: (B, d_v, h, w) fused map; skips: sketch activations coarse to fine."""
        x = self.resblocks(self.entry(context))
        return self.decoder(x, skips)

    def forward(self, sketch, reference):
        if sketch.shape[0] != reference.shape[0] or sketch.shape[-2:] != reference.shape[-2:]:
            raise ValueError(
                f"sketch {tuple(sketch.shape)} and reference {tuple(reference.shape)} differ in size"
            )
        fs = self.sketch_encoder(sketch)
        fr = self.reference_encoder(reference)
        vs = build_value_map(fs)
        vr = build_value_map(fr)
        context, attn = self.scft(vs, vr)
        h, w = fs[-1].shape[-2:]
        context = context.view(context.shape[0], context.shape[1], h, w)
        image = self.decode(context, [fs[i] for i in SKIP_LAYERS])
        return GeneratorOutput(image, attn, vs, vr)


def generate(generator, sketch, reference):
    return generator(sketch, reference)
