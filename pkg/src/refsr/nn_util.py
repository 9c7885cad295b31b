"""Small shared nn helpers."""

from __future__ import annotations

import torch.nn as nn


def group_norm(channels: int, max_groups: int = 8) -> nn.GroupNorm:
    """GroupNorm with the largest group count <= max_groups dividing channels.

    Groups keep at least two channels each so normalization stays well-defined
    even on 1x1 feature maps (the deepest UNet level on small latents).
    """
    g = min(max_groups, max(channels // 2, 1))
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)
