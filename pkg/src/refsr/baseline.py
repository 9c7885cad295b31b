"""Naive-concatenation regression SR baseline.

Concatenates the bicubic-upsampled LR image with the reference and regresses
the HR image with a plain conv-residual stack and a pixel loss.  It serves
two roles: the initializer for the trajectory-shortened sampler, and the
regression arm in evaluation reports.  Bicubic upsampling is available as a
model-free fallback.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import ImageTensor, ShapeError


def bicubic_upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Deterministic bicubic upsample of a (B, 3, h, w) or (3, h, w) batch."""
    squeeze = lr.ndim == 3
    if squeeze:
        lr = lr[None]
    out = F.interpolate(lr, scale_factor=scale, mode="bicubic", align_corners=False)
    return out[0] if squeeze else out


class _Block(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(x)))


class BaselineSR(nn.Module):
    """Residual refinement of the upsampled LR, conditioned on the reference."""

    def __init__(self, width: int = 48, depth: int = 6, scale: int = 10):
        super().__init__()
        self.scale = scale
        self.head = nn.Conv2d(6, width, 3, padding=1)
        self.body = nn.Sequential(*[_Block(width) for _ in range(depth)])
        self.tail = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, lr_up: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        """Signed-range inputs at HR resolution; returns a signed-range estimate."""
        if lr_up.shape != ref.shape:
            raise ShapeError("upsampled LR and reference must share shape")
        h = self.head(torch.cat([lr_up, ref], dim=1))
        return lr_up + self.tail(self.body(h))

    def superresolve(self, lr: ImageTensor, ref: ImageTensor) -> ImageTensor:
        lr_up = bicubic_upsample(lr.to_signed().data, self.scale)
        if lr_up.shape[-2:] != ref.data.shape[-2:]:
            raise ShapeError(
                f"LR x scale {tuple(lr_up.shape[-2:])} != reference "
                f"{tuple(ref.data.shape[-2:])}")
        with torch.no_grad():
            out = self.forward(lr_up[None], ref.to_signed().data[None])[0]
        return ImageTensor(out.clamp(-1.0, 1.0), "signed")
