"""Local texture branch: dual-branch encoder with change-aware fusion.

Each fusion block combines two sub-modules operating on an (LR, reference)
feature pair at one scale:

  mask attention      out_ma  = M_ma * ref_c + (1 - M_ma) * lr_c,
                      M_ma    = sigmoid(conv([lr_c, ref_c]))
  local cross-attn    out_lca = M_lca * F_ca + (1 - M_lca) * f_lr,
                      M_lca   = per-position cosine(f_lr, f_ref),
                      F_ca    = windowed cross-attention (queries from LR,
                                keys/values from the reference)

and sums them.  Strength control multiplies both maps by s*m before the
blend, so a zeroed gate collapses the block to its two LR-only arms exactly
(conv(f_lr) + f_lr) with no reference leakage.

The adapter turns the fused tensor into one feature map per denoiser level,
halving resolution per level, with zero-initialized output convolutions so
injection starts as a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_util import group_norm
from .types import ParameterError, ShapeError


def unfold_windows(f: torch.Tensor, win: tuple[int, int]) -> torch.Tensor:
    """Partition (..., C, H, W) into non-overlapping (h, w) windows.

    Returns (..., n_windows, C, h, w) with windows ordered row-major.
    Dims must be divisible by the window (use pad_to_window first).
    """
    h, w = win
    if h < 1 or w < 1:
        raise ParameterError(f"window must be positive, got {win}")
    *lead, C, H, W = f.shape
    if H % h or W % w:
        raise ShapeError(f"dims ({H}, {W}) not divisible by window ({h}, {w})")
    x = f.reshape(*lead, C, H // h, h, W // w, w)
    x = x.movedim((-4, -2), (-5, -4))  # (..., H/h, W/w, C, h, w)
    return x.reshape(*lead, (H // h) * (W // w), C, h, w)


def fold_windows(wins: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Inverse of unfold_windows for the given (H, W)."""
    H, W = size
    *lead, n, C, h, w = wins.shape
    if n != (H // h) * (W // w) or H % h or W % w:
        raise ShapeError(f"{n} windows of ({h}, {w}) do not tile ({H}, {W})")
    x = wins.reshape(*lead, H // h, W // w, C, h, w)
    x = x.movedim((-5, -4), (-4, -2))
    return x.reshape(*lead, C, H, W)


def pad_to_window(f: torch.Tensor, win: tuple[int, int]):
    """Reflect-pad the last two dims up to window divisibility.

    Returns (padded, (H, W)) where (H, W) is the original size for cropping
    after fold.
    """
    h, w = win
    H, W = f.shape[-2:]
    ph = (-H) % h
    pw = (-W) % w
    if ph == 0 and pw == 0:
        return f, (H, W)
    return F.pad(f, (0, pw, 0, ph), mode="reflect"), (H, W)


def windowed_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                       win: tuple[int, int]) -> torch.Tensor:
    """Scaled dot-product attention restricted to non-overlapping windows.

    q, k, v: (B, C, H, W) with channels as the head dim; each output position
    attends over the k/v positions of its own window only.
    """
    B, C, H, W = q.shape
    if C < 1:
        raise ParameterError("attention head dim must be positive")
    qw = unfold_windows(q, win).flatten(-2)   # (B, n, C, h*w)
    kw = unfold_windows(k, win).flatten(-2)
    vw = unfold_windows(v, win).flatten(-2)
    attn = torch.softmax(qw.transpose(-2, -1) @ kw / math.sqrt(C), dim=-1)
    out = (vw @ attn.transpose(-2, -1))       # (B, n, C, h*w)
    h, w = win
    return fold_windows(out.reshape(B, -1, C, h, w), (H, W))


@dataclass
class AttentionMaps:
    """Post-control fusion maps for one scale, kept for inspection/export."""

    m_ma: torch.Tensor   # (B, 1, H, W) in [0, 1]
    m_lca: torch.Tensor  # (B, 1, H, W) in [-1, 1]


def _apply_gate(m: torch.Tensor, gate) -> torch.Tensor:
    if gate is None:
        return m
    return m * gate  # float scalar or broadcastable tensor


class MaskAttention(nn.Module):
    """Learned sigmoid blend of the two branches."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_lr = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_ref = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_mask = nn.Conv2d(2 * channels, 1, 3, padding=1)

    def forward(self, f_lr, f_ref, gate=None):
        lr_c = self.conv_lr(f_lr)
        ref_c = self.conv_ref(f_ref)
        m = torch.sigmoid(self.conv_mask(torch.cat([lr_c, ref_c], dim=1)))
        m = _apply_gate(m, gate)
        out = m * ref_c + (1.0 - m) * lr_c
        return out, m, lr_c


def cosine_map(f_lr: torch.Tensor, f_ref: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-position cosine similarity between channel vectors, (B, 1, H, W)."""
    num = (f_lr * f_ref).sum(dim=1, keepdim=True)
    den = f_lr.norm(dim=1, keepdim=True) * f_ref.norm(dim=1, keepdim=True)
    return (num / den.clamp_min(eps)).clamp(-1.0, 1.0)


class LocalCrossAttention(nn.Module):
    """Windowed cross-attention gated by the cosine similarity mask."""

    def __init__(self, channels: int, window: tuple[int, int] = (8, 8)):
        super().__init__()
        self.window = window
        self.norm_lr = nn.GroupNorm(1, channels)
        self.norm_ref = nn.GroupNorm(1, channels)
        self.w_q = nn.Conv2d(channels, channels, 1)
        self.w_k = nn.Conv2d(channels, channels, 1)
        self.w_v = nn.Conv2d(channels, channels, 1)

    def qkv(self, f_lr, f_ref):
        q = self.w_q(self.norm_lr(f_lr))
        k = self.w_k(self.norm_ref(f_ref))
        v = self.w_v(self.norm_ref(f_ref))
        return q, k, v

    def forward(self, f_lr, f_ref, gate=None):
        q, k, v = self.qkv(f_lr, f_ref)
        q, size = pad_to_window(q, self.window)
        k, _ = pad_to_window(k, self.window)
        v, _ = pad_to_window(v, self.window)
        f_ca = windowed_attention(q, k, v, self.window)[..., :size[0], :size[1]]
        m = cosine_map(f_lr, f_ref)
        m = _apply_gate(m, gate)
        out = m * f_ca + (1.0 - m) * f_lr
        return out, m


class CAABlock(nn.Module):
    """Change-aware fusion of one feature pair: mask attention + local cross-attention."""

    def __init__(self, channels: int, window: tuple[int, int] = (8, 8)):
        super().__init__()
        self.mask_attn = MaskAttention(channels)
        self.cross_attn = LocalCrossAttention(channels, window)

    def forward(self, f_lr, f_ref, gate=None):
        if f_lr.shape != f_ref.shape:
            raise ShapeError(
                f"feature pair shapes differ: {tuple(f_lr.shape)} vs {tuple(f_ref.shape)}"
            )
        out_ma, m_ma, _ = self.mask_attn(f_lr, f_ref, gate)
        out_lca, m_lca = self.cross_attn(f_lr, f_ref, gate)
        return out_ma + out_lca, AttentionMaps(m_ma=m_ma, m_lca=m_lca)


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = F.silu(self.norm(self.conv1(x)))
        return self.skip(x) + self.conv2(h)


class LocalTextureEncoder(nn.Module):
    """Dual-branch multi-scale encoder fusing LR and reference features.

    Expects the LR image pre-upsampled to HR resolution so both branches share
    spatial dims at every scale.  The fused output of each scale feeds the LR
    branch of the next; the final fused tensor sits at HR/2^(S-1), which the
    default S=3 puts at latent resolution (HR/4).
    """

    def __init__(self, widths: tuple[int, ...] = (64, 128, 256),
                 window: tuple[int, int] = (8, 8)):
        super().__init__()
        self.widths = tuple(widths)
        self.stem_lr = nn.Conv2d(3, widths[0], 3, padding=1)
        self.stem_ref = nn.Conv2d(3, widths[0], 3, padding=1)
        self.lr_blocks = nn.ModuleList()
        self.ref_blocks = nn.ModuleList()
        self.fusions = nn.ModuleList()
        self.down_lr = nn.ModuleList()
        self.down_ref = nn.ModuleList()
        for i, c in enumerate(widths):
            self.lr_blocks.append(_ConvBlock(c, c))
            self.ref_blocks.append(_ConvBlock(c, c))
            self.fusions.append(CAABlock(c, window))
            if i + 1 < len(widths):
                self.down_lr.append(nn.Conv2d(c, widths[i + 1], 3, stride=2, padding=1))
                self.down_ref.append(nn.Conv2d(c, widths[i + 1], 3, stride=2, padding=1))

    @property
    def num_scales(self) -> int:
        return len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def forward(self, lr_up: torch.Tensor, ref: torch.Tensor, gates=None):
        """gates: per-scale control multipliers (list of scalars/tensors) or a
        single scalar applied at every scale; None disables control."""
        if lr_up.shape != ref.shape:
            raise ShapeError(
                f"branch resolutions differ after upsampling: "
                f"{tuple(lr_up.shape)} vs {tuple(ref.shape)}"
            )
        x_lr = self.stem_lr(lr_up)
        x_ref = self.stem_ref(ref)
        maps = []
        fused = x_lr
        for i in range(self.num_scales):
            g = gates[i] if isinstance(gates, (list, tuple)) else gates
            f_lr = self.lr_blocks[i](x_lr)
            f_ref = self.ref_blocks[i](x_ref)
            fused, scale_maps = self.fusions[i](f_lr, f_ref, g)
            maps.append(scale_maps)
            if i + 1 < self.num_scales:
                x_lr = self.down_lr[i](fused)
                x_ref = self.down_ref[i](f_ref)
        return fused, maps


class Adapter(nn.Module):
    """Turn the fused tensor into per-level injection features, coarse-to-fine.

    Level k output matches the denoiser's level-k channel count and halves the
    spatial dims of the previous level.  Each level's final conv starts at
    zero so injection is initially inert.
    """

    def __init__(self, in_channels: int, level_channels: tuple[int, ...]):
        super().__init__()
        self.level_channels = tuple(level_channels)
        self.blocks = nn.ModuleList()
        self.outs = nn.ModuleList()
        prev = in_channels
        for i, c in enumerate(level_channels):
            stride = 1 if i == 0 else 2
            self.blocks.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=stride, padding=1),
                _ConvBlock(c, c),
            ))
            out = nn.Conv2d(c, c, 1)
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
            self.outs.append(out)
            prev = c

    def forward(self, f_local: torch.Tensor) -> list[torch.Tensor]:
        levels = []
        h = f_local
        for block, out in zip(self.blocks, self.outs):
            h = block(h)
            levels.append(out(h))
        return levels
