"""Pyramid pooling plus UPer-style top-down fusion producing the global map."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def resize(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel=1, padding=0):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, padding=padding, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


@dataclass(frozen=True)
class PPMConfig:
    pooling_bins: tuple = (1, 2, 3, 6)
    fused_channels: int = 128

    def __post_init__(self):
        bins = self.pooling_bins
        if not bins or any(b <= a for a, b in zip(bins, bins[1:])):
            raise ValueError(f"pooling bins must be strictly ascending: {bins}")


class PyramidPooling(nn.Module):
    """Adaptive average pools at several bin sizes, fused with the identity path.

    Branch convs carry a bias instead of BatchNorm so that 1x1 pooled maps
    train with any batch size.
    """

    def __init__(self, in_channels, cfg=PPMConfig()):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(in_channels, cfg.fused_channels, 1), nn.ReLU(inplace=True))
            for b in cfg.pooling_bins
        )
        self.bottleneck = ConvBNReLU(in_channels + len(cfg.pooling_bins) * cfg.fused_channels, cfg.fused_channels, 3, 1)

    def branch_outputs(self, x):
        size = x.shape[-2:]
        if max(self.cfg.pooling_bins) > min(size):
            raise ValueError(f"pooling bin {max(self.cfg.pooling_bins)} exceeds feature size {tuple(size)}")
        return [resize(branch(x), size) for branch in self.branches]

    def forward(self, x):
        return self.bottleneck(torch.cat([x, *self.branch_outputs(x)], dim=1))


class UPerDecoder(nn.Module):
    """Top-down fusion of the PPM output with the encoder pyramid.

    ``forward`` returns the 1/4-resolution logit map; ``fuse`` exposes the
    four smoothed per-level maps.
    """

    def __init__(self, in_channels, channels=128, ppm=None):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.channels = channels
        self.ppm = PyramidPooling(in_channels[-1], ppm or PPMConfig(fused_channels=channels))
        if self.ppm.cfg.fused_channels != channels:
            raise ValueError("PPM width must equal the fusion width")
        self.lateral_convs = nn.ModuleList(ConvBNReLU(c, channels) for c in in_channels[:-1])
        self.fpn_convs = nn.ModuleList(ConvBNReLU(channels, channels, 3, 1) for _ in in_channels[:-1])
        self.fpn_bottleneck = ConvBNReLU(len(in_channels) * channels, channels, 3, 1)
        self.classifier = nn.Conv2d(channels, 1, 1)

    def fuse(self, feats, ppm_out=None):
        if len(feats) != len(self.in_channels):
            raise ValueError(f"expected {len(self.in_channels)} feature maps, got {len(feats)}")
        for f, c in zip(feats, self.in_channels):
            if f.shape[1] != c:
                raise ValueError(f"channel mismatch: got {f.shape[1]}, expected {c}")
        if ppm_out is None:
            ppm_out = self.ppm(feats[-1])
        laterals = [conv(f) for conv, f in zip(self.lateral_convs, feats)] + [ppm_out]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + resize(laterals[i], laterals[i - 1].shape[-2:])
        outs = [conv(l) for conv, l in zip(self.fpn_convs, laterals)] + [laterals[-1]]
        return outs

    def predict_global(self, fused):
        size = fused[0].shape[-2:]
        x = torch.cat([fused[0]] + [resize(f, size) for f in fused[1:]], dim=1)
        return self.classifier(self.fpn_bottleneck(x))

    def forward(self, feats):
        return self.predict_global(self.fuse(feats))
