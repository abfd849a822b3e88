"""Plain convolutional 3D U-Net, the supervised-only comparison row."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .unetr import ConvBlock


class UNet3D(nn.Module):
    """Encoder-decoder with ``depth`` x2 poolings; widths f, 2f, 4f, ..."""

    def __init__(self, feature_size: int = 8, depth: int = 3, out_channels: int = 2):
        super().__init__()
        if depth < 1:
            raise ConfigError("U-Net depth must be >= 1")
        self.feature_size = feature_size
        self.depth = depth
        widths = [feature_size * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = 1
        for w in widths[:-1]:
            self.down.append(nn.Sequential(ConvBlock(cin, w), ConvBlock(w, w)))
            cin = w
        self.pool = nn.MaxPool3d(2)
        self.bottom = nn.Sequential(ConvBlock(cin, widths[-1]), ConvBlock(widths[-1], widths[-1]))
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for w_deep, w in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(nn.ConvTranspose3d(w_deep, w, 2, stride=2))
            self.fuse.append(nn.Sequential(ConvBlock(2 * w, w), ConvBlock(w, w)))
        self.out = nn.Conv3d(widths[0], out_channels, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, X, Y, Z) -> (B, 2, X, Y, Z) logits."""
        k = 2**self.depth
        if any(n % k for n in images.shape[1:]):
            raise ShapeError(f"U-Net of depth {self.depth} needs sides divisible by {k}, got {tuple(images.shape[1:])}")
        x = images[:, None]
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            x = fuse(torch.cat([up(x), skip], dim=1))
        return self.out(x)
