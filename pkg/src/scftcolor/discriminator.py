"""Conditional 70x70 PatchGAN over (image, sketch) pairs."""

import torch
import torch.nn as nn


class PatchDiscriminator(nn.Module):
    def __init__(self, image_channels=3, cond_channels=1, channels=(64, 128, 256, 512)):
        super().__init__()
        self.in_channels = image_channels + cond_channels
        layers = [nn.Conv2d(self.in_channels, channels[0], 4, 2, 1), nn.LeakyReLU(0.2, True)]
        c_in = channels[0]
        for i, c_out in enumerate(channels[1:], start=1):
            stride = 2 if i < len(channels) - 1 else 1
            layers += [
                nn.Conv2d(c_in, c_out, 4, stride, 1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2, True),
            ]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, image, sketch):
        if image.shape[0] != sketch.shape[0] or image.shape[-2:] != sketch.shape[-2:]:
            raise ValueError(f"image {tuple(image.shape)} and sketch {tuple(sketch.shape)} differ")
        x = torch.cat([image, sketch], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.net(x)


def discriminate(disc, image, sketch):
    return disc(image, sketch)
