"""Shared value types and error classes.

Images move through the system as (3, H, W) float tensors with an explicit
value-range tag: "unit" ([0, 1], the on-disk convention) or "signed"
([-1, 1], the codec-boundary convention).  Latents are plain float tensors
with layout (C, h, w) or (B, C, h, w); no wrapper type is used for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class ShapeError(ValueError):
    """Tensor shape or resolution mismatch."""


class ParameterError(ValueError):
    """Out-of-range or inconsistent parameter."""


class ConfigurationError(ValueError):
    """Model components wired together with incompatible configs."""


_RANGE_TOL = 1e-6


@dataclass
class ImageTensor:
    """A single RGB image with a declared value range."""

    data: torch.Tensor
    vrange: str = "unit"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeError(f"image must be (3, H, W), got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ShapeError("image spatial dims must be positive")
        if self.vrange not in ("unit", "signed"):
            raise ParameterError(f"unknown value range {self.vrange!r}")
        if not torch.isfinite(self.data).all():
            raise ParameterError("image contains non-finite values")
        lo, hi = (0.0, 1.0) if self.vrange == "unit" else (-1.0, 1.0)
        dmin = float(self.data.min())
        dmax = float(self.data.max())
        if dmin < lo - _RANGE_TOL or dmax > hi + _RANGE_TOL:
            raise ParameterError(
                f"values [{dmin:.4g}, {dmax:.4g}] violate declared {self.vrange} range"
            )

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_unit(self) -> "ImageTensor":
        if self.vrange == "unit":
            return self
        return ImageTensor((self.data + 1.0) * 0.5, "unit")

    def to_signed(self) -> "ImageTensor":
        if self.vrange == "signed":
            return self
        return ImageTensor(self.data * 2.0 - 1.0, "signed")

    def clamped(self) -> "ImageTensor":
        lo, hi = (0.0, 1.0) if self.vrange == "unit" else (-1.0, 1.0)
        return ImageTensor(self.data.clamp(lo, hi), self.vrange)


def validate_latent(z: torch.Tensor) -> torch.Tensor:
    """Check a latent tensor is (C, h, w) or (B, C, h, w) with finite entries."""
    if z.ndim not in (3, 4):
        raise ShapeError(f"latent must be (C, h, w) or (B, C, h, w), got {tuple(z.shape)}")
    if z.shape[-1] < 1 or z.shape[-2] < 1:
        raise ShapeError("latent spatial dims must be positive")
    if not torch.isfinite(z).all():
        raise ParameterError("latent contains non-finite values")
    return z
