"""Latent codec: a small convolutional autoencoder with 4x spatial downsampling.

Trained once on the synthetic corpus with a pixel reconstruction loss, then
frozen before diffusion training.  Images cross the codec boundary in signed
range; unit-range inputs are converted automatically.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_util import group_norm
from .types import ImageTensor, ShapeError


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.norm1 = group_norm(c)
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.norm2 = group_norm(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class LatentCodec(nn.Module):
    """encode: signed (3, H, W) image -> (C_lat, H/4, W/4) latent; decode inverts."""

    downsample = 4

    def __init__(self, latent_channels: int = 8, base: int = 48):
        super().__init__()
        self.latent_channels = latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, base, 3, padding=1),
            _ResBlock(base),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            _ResBlock(base * 2),
            nn.Conv2d(base * 2, base * 2, 3, stride=2, padding=1),
            _ResBlock(base * 2),
            nn.Conv2d(base * 2, latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, base * 2, 3, padding=1),
            _ResBlock(base * 2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base * 2, base * 2, 3, padding=1),
            _ResBlock(base * 2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base * 2, base, 3, padding=1),
            _ResBlock(base),
            nn.Conv2d(base, 3, 3, padding=1),
        )

    def _check_dims(self, h: int, w: int):
        if h % self.downsample or w % self.downsample:
            raise ShapeError(
                f"image dims ({h}, {w}) not divisible by codec downsample {self.downsample}"
            )

    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Encode a signed-range (B, 3, H, W) batch."""
        self._check_dims(x.shape[-2], x.shape[-1])
        return self.enc(x)

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        """Decode to a signed-range (B, 3, H, W) batch (tanh-bounded)."""
        return torch.tanh(self.dec(z))

    def encode(self, img: ImageTensor) -> torch.Tensor:
        x = img.to_signed().data
        return self.encode_batch(x[None])[0]

    def decode(self, z: torch.Tensor) -> ImageTensor:
        if z.ndim == 3:
            z = z[None]
        x = self.decode_batch(z)[0]
        return ImageTensor(x, "signed")
