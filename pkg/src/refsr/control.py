"""Reference strength control: scalar s and optional spatial mask m.

The scalar scales every reference-injection pathway; the mask modulates it
spatially.  Masks are authored at HR resolution and resampled (area average,
clamped to [0, 1]) to whatever resolution a consumer needs: per-scale fusion
gates for the local branch, or the global encoder's token grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .types import ParameterError, ShapeError


def resample_mask(mask: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Area-average an (H, W) mask to (h, w), clamped to [0, 1]."""
    if mask.ndim != 2:
        raise ShapeError(f"mask must be (H, W), got {tuple(mask.shape)}")
    out = F.adaptive_avg_pool2d(mask[None, None].float(), hw)[0, 0]
    return out.clamp(0.0, 1.0)


@dataclass
class ControlSpec:
    """User-facing reference strength control for one request."""

    s: float = 1.0
    mask: Optional[torch.Tensor] = None  # (H, W) in [0, 1] at HR resolution

    def __post_init__(self):
        if not (0.0 <= self.s <= 1.0):
            raise ParameterError(f"s must lie in [0, 1], got {self.s}")
        if self.mask is not None:
            if self.mask.ndim != 2:
                raise ShapeError(f"mask must be (H, W), got {tuple(self.mask.shape)}")
            if float(self.mask.min()) < -1e-6 or float(self.mask.max()) > 1.0 + 1e-6:
                raise ParameterError("mask values must lie in [0, 1]")
            self.mask = self.mask.clamp(0.0, 1.0)

    @property
    def fully_excluded(self) -> bool:
        """True when no reference information may flow at all."""
        if self.s == 0.0:
            return True
        return self.mask is not None and float(self.mask.max()) == 0.0

    def gate(self, hw: tuple[int, int]):
        """Combined multiplier s*m at resolution (h, w).

        Returns the plain float s when no mask is set (keeps the s=0 collapse
        exact), otherwise a (1, 1, h, w) tensor.
        """
        if self.mask is None:
            return self.s
        m = resample_mask(self.mask, hw)
        return (self.s * m)[None, None]

    def token_mask(self, grid: tuple[int, int]) -> Optional[torch.Tensor]:
        """Mask over the global encoder's (gh, gw) token grid, flattened to (M,).

        None when no spatial mask is set (all tokens retained).
        """
        if self.mask is None:
            return None
        return resample_mask(self.mask, grid).reshape(-1)


def batch_gate(s: torch.Tensor, mask: Optional[torch.Tensor], hw: tuple[int, int]):
    """Training-side gate: per-sample scalars s (B,) with optional (B, H, W) masks.

    Returns (B, 1, 1, 1) when mask is None, else (B, 1, h, w).
    """
    if s.ndim != 1:
        raise ShapeError("batch s must be one-dimensional")
    if mask is None:
        return s.view(-1, 1, 1, 1)
    m = F.adaptive_avg_pool2d(mask[:, None].float(), hw).clamp(0.0, 1.0)
    return s.view(-1, 1, 1, 1) * m
