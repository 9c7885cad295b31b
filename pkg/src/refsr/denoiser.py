"""Toy latent UNet with adapter injection and semantic-token cross-attention.

Topology mirrors the conditioning scheme of the full-scale system at desk
scale: K resolution levels, adapter features added at both the encoding and
decoding path of every level, and cross-attention against the aggregated
reference tokens at the coarsest levels plus the bottleneck.  The attention
residual is scaled by the per-request strength factor s, so s = 0 removes
every reference pathway from the computation exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .global_fusion import multihead_masked_attention
from .local_fusion import AttentionMaps
from .nn_util import group_norm
from .types import ConfigurationError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 4
    channels: tuple[int, ...] = (64, 128, 256, 256)
    heads: int = 4
    context_dim: int = 256
    time_dim: int = 256
    latent_channels: int = 8
    attn_levels: tuple[int, ...] = (2, 3)  # plus the bottleneck, always

    def __post_init__(self):
        if len(self.channels) != self.levels:
            raise ConfigurationError("channels must list one width per level")
        if any(c < 1 for c in self.channels) or self.context_dim < 1:
            raise ConfigurationError("sizes must be positive")
        for i in self.attn_levels:
            if self.channels[i] % self.heads:
                raise ConfigurationError(
                    f"level {i} width {self.channels[i]} not divisible by {self.heads} heads")


@dataclass
class ConditioningBundle:
    """Everything the denoiser consumes beyond (z_t, t)."""

    local: list[torch.Tensor]                      # K levels, (B, c_i, h_i, w_i)
    tokens: Optional[torch.Tensor]                 # (B, N, context_dim) or None
    s: float | torch.Tensor = 1.0                  # scalar or per-sample (B,)
    maps: Optional[list[AttentionMaps]] = None     # fusion diagnostics
    excluded: bool = False                         # reference fully excluded

    def latent_hw(self) -> tuple[int, int]:
        return tuple(self.local[0].shape[-2:])

    def s_factor(self, batch: int) -> torch.Tensor | float:
        if isinstance(self.s, torch.Tensor):
            return self.s.view(batch, 1, 1)
        return self.s


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embeddings; injective over integer t in [0, max_period)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TokenCrossAttention(nn.Module):
    """h <- h + s * W_o Attn(W_q h, W_k tokens, W_v tokens)."""

    def __init__(self, channels, context_dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = group_norm(channels)
        self.w_q = nn.Linear(channels, channels)
        self.w_k = nn.Linear(context_dim, channels)
        self.w_v = nn.Linear(context_dim, channels)
        self.w_o = nn.Linear(channels, channels)

    def forward(self, h, tokens, s):
        if tokens is None:
            return h
        B, C, H, W = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)      # (B, HW, C)
        term = multihead_masked_attention(
            self.w_q(x), self.w_k(tokens), self.w_v(tokens), self.heads)
        term = self.w_o(term)
        if isinstance(s, torch.Tensor) or s != 1.0:
            term = s * term
        return h + term.transpose(1, 2).reshape(B, C, H, W)


class ToyUNet(nn.Module):
    """Noise predictor epsilon_hat(z_t, t, conditioning)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.time_mlp = nn.Sequential(
            nn.Linear(ch[0], cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i in range(cfg.levels):
            self.enc_blocks.append(ResBlock(prev, ch[i], cfg.time_dim))
            self.enc_attn.append(
                TokenCrossAttention(ch[i], cfg.context_dim, cfg.heads)
                if i in cfg.attn_levels else None)
            prev = ch[i]
            if i + 1 < cfg.levels:
                self.downs.append(nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1))
                prev = ch[i + 1]

        self.mid_block1 = ResBlock(ch[-1], ch[-1], cfg.time_dim)
        self.mid_attn = TokenCrossAttention(ch[-1], cfg.context_dim, cfg.heads)
        self.mid_block2 = ResBlock(ch[-1], ch[-1], cfg.time_dim)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            in_ch = ch[i] + (ch[-1] if i == cfg.levels - 1 else ch[i])
            self.dec_blocks.append(ResBlock(in_ch, ch[i], cfg.time_dim))
            self.dec_attn.append(
                TokenCrossAttention(ch[i], cfg.context_dim, cfg.heads)
                if i in cfg.attn_levels else None)
            if i > 0:
                self.ups.append(nn.Conv2d(ch[i], ch[i - 1], 3, padding=1))

        self.norm_out = group_norm(ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def validate_bundle(self, cond: ConditioningBundle):
        cfg = self.cfg
        if len(cond.local) != cfg.levels:
            raise ConfigurationError(
                f"bundle has {len(cond.local)} levels, denoiser expects {cfg.levels}")
        h0, w0 = cond.latent_hw()
        for i, f in enumerate(cond.local):
            if f.shape[-3] != cfg.channels[i]:
                raise ConfigurationError(
                    f"level {i} has {f.shape[-3]} channels, expected {cfg.channels[i]}")
            expect = (max(h0 >> i, 1), max(w0 >> i, 1))
            if tuple(f.shape[-2:]) != expect:
                raise ShapeError(f"level {i} spatial dims {tuple(f.shape[-2:])} != {expect}")
        if cond.tokens is not None and cond.tokens.shape[-1] != cfg.context_dim:
            raise ConfigurationError(
                f"token dim {cond.tokens.shape[-1]} != context dim {cfg.context_dim}")

    def predict_noise(self, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = z_t[None]
        B = z_t.shape[0]
        self.validate_bundle(cond)
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t), dtype=torch.long)
        temb = self.time_mlp(
            timestep_embedding(t, self.cfg.channels[0]).to(z_t.dtype))
        s = cond.s_factor(B)
        tokens = None if cond.excluded else cond.tokens

        h = self.conv_in(z_t)
        skips = []
        for i in range(self.cfg.levels):
            h = self.enc_blocks[i](h, temb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h, tokens, s)
            h = h + cond.local[i]
            skips.append(h)
            if i + 1 < self.cfg.levels:
                h = self.downs[i](h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, tokens, s)
        h = self.mid_block2(h, temb)

        for j, i in enumerate(reversed(range(self.cfg.levels))):
            h = torch.cat([h, skips[i]], dim=1)
            h = self.dec_blocks[j](h, temb)
            if self.dec_attn[j] is not None:
                h = self.dec_attn[j](h, tokens, s)
            h = h + cond.local[i]
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[0] if squeeze else out
