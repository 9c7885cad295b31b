"""Global semantic branch: frozen reference encoder, projection, token aggregation.

A pluggable frozen vision encoder turns the reference image into a grid of
tokens (M = gh*gw, patch 16 by default, so a 480x480 input yields 900).  Two
linear layers project them to the denoiser's context width, and a learnable
query block (self-attention -> cross-attention -> FFN) compresses them to a
fixed set of N semantic tokens, independent of M.

masked_cross_attention is the shared attention primitive: an additive
log-mask excludes keys before the softmax, the result is scaled by the
strength factor s and added residually to the queries.  All-zero masks fall
back to "reference fully excluded": the attention term is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import ParameterError, ShapeError

_NEG_INF = -1e9


@dataclass
class GlobalFeatures:
    """Encoder token grid with spatial provenance."""

    tokens: torch.Tensor        # (M, C_enc) or (B, M, C_enc)
    grid: tuple[int, int]

    def __post_init__(self):
        m = self.tokens.shape[-2]
        if m < 1:
            raise ShapeError("token count must be >= 1")
        if self.grid[0] * self.grid[1] != m:
            raise ShapeError(f"grid {self.grid} does not cover {m} tokens")


def log_mask(mask: torch.Tensor) -> torch.Tensor:
    """Additive pre-softmax term: log(m), floored at -1e9 for m = 0."""
    neg = torch.full_like(mask, _NEG_INF)
    return torch.where(mask > 0, torch.log(mask.clamp_min(1e-300)), neg)


def masked_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                           mask: Optional[torch.Tensor] = None,
                           s: float = 1.0) -> torch.Tensor:
    """out = Q + s * Softmax(Q K^T / sqrt(d_k) + log m) V.

    q: (..., L, C); k, v: (..., M, C); mask: (M,) in [0, 1] or None (all ones).
    An all-zero mask zeroes the attention term entirely (output = Q).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("q/k/v widths inconsistent")
    d_k = q.shape[-1]
    if d_k < 1:
        raise ParameterError("d_k must be positive")
    if mask is not None and float(mask.max()) == 0.0:
        return q
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if mask is not None:
        if mask.shape[-1] != k.shape[-2]:
            raise ShapeError(f"mask length {mask.shape[-1]} != key count {k.shape[-2]}")
        scores = scores + log_mask(mask.to(scores.dtype))
    attn = torch.softmax(scores, dim=-1)
    return q + s * (attn @ v)


def _heads_split(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, L, C = x.shape
    return x.reshape(*lead, L, heads, C // heads).transpose(-3, -2)


def _heads_merge(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-3, -2)
    *lead, L, h, d = x.shape
    return x.reshape(*lead, L, h * d)


def multihead_masked_attention(q, k, v, heads: int,
                               mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Multi-head variant of the masked softmax core (no residual, no scaling).

    Returns the bare attention term; callers own projections and residuals.
    All-zero masks yield an exactly-zero term.
    """
    if q.shape[-1] % heads:
        raise ParameterError(f"width {q.shape[-1]} not divisible by {heads} heads")
    if mask is not None and float(mask.max()) == 0.0:
        return torch.zeros_like(q)
    qh, kh, vh = (_heads_split(t, heads) for t in (q, k, v))
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(qh.shape[-1])
    if mask is not None:
        scores = scores + log_mask(mask.to(scores.dtype))
    return _heads_merge(torch.softmax(scores, dim=-1) @ vh)


class PatchConvEncoder(nn.Module):
    """Default frozen reference encoder: conv stack with total stride 16.

    Fully convolutional, so any input divisible by 16 yields a (H/16, W/16)
    token grid.  Pretrained on the synthetic corpus with a reconstruction
    head (discarded afterward), then frozen.
    """

    patch = 16

    def __init__(self, out_dim: int = 192, base: int = 32):
        super().__init__()
        chans = [base, base * 2, base * 4, out_dim]
        layers = []
        prev = 3
        for c in chans:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.SiLU(),
                       nn.Conv2d(c, c, 3, padding=1), nn.SiLU()]
            prev = c
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, img: torch.Tensor) -> GlobalFeatures:
        if img.ndim == 3:
            img = img[None]
        H, W = img.shape[-2:]
        if H % self.patch or W % self.patch:
            raise ShapeError(f"input dims ({H}, {W}) not divisible by patch {self.patch}")
        feat = self.net(img)                      # (B, C, gh, gw)
        gh, gw = feat.shape[-2:]
        tokens = feat.flatten(-2).transpose(-2, -1)
        if tokens.shape[0] == 1:
            tokens = tokens[0]
        return GlobalFeatures(tokens=tokens, grid=(gh, gw))


ENCODERS: dict[str, Callable[..., nn.Module]] = {
    "patch_conv": PatchConvEncoder,
}


def register_encoder(name: str, factory: Callable[..., nn.Module]):
    """Encoder plug-in contract: factory() -> module mapping a (3, H, W) image
    to GlobalFeatures (tokens (M, C_enc) + grid dims)."""
    ENCODERS[name] = factory


def build_encoder(name: str, **kwargs) -> nn.Module:
    if name not in ENCODERS:
        raise ParameterError(f"unknown encoder {name!r}; registered: {sorted(ENCODERS)}")
    return ENCODERS[name](**kwargs)


def extract_global(ref_img: torch.Tensor, encoder: nn.Module) -> GlobalFeatures:
    """Run the frozen encoder on a signed-range reference image."""
    with torch.no_grad():
        return encoder(ref_img)


class GlobalProjector(nn.Module):
    """Two affine maps with a nonlinearity between, onto the context width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(tokens)))


class SemanticTokenAggregator(nn.Module):
    """Compress M projected tokens into N semantic tokens via learnable queries.

    One block: query self-attention, cross-attention from queries to the
    projected features (optionally key-masked by the spatial control), and a
    feed-forward network.  No positional terms touch the M axis, so the
    output is invariant to permutations of the input tokens.
    """

    def __init__(self, dim: int = 256, num_queries: int = 96, heads: int = 4):
        super().__init__()
        self.num_queries = num_queries
        self.heads = heads
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.02)
        self.norm_sa = nn.LayerNorm(dim)
        self.sa_qkv = nn.Linear(dim, dim * 3)
        self.sa_out = nn.Linear(dim, dim)
        self.norm_ca_q = nn.LayerNorm(dim)
        self.norm_ca_kv = nn.LayerNorm(dim)
        self.ca_q = nn.Linear(dim, dim)
        self.ca_k = nn.Linear(dim, dim)
        self.ca_v = nn.Linear(dim, dim)
        self.ca_out = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, f_proj: torch.Tensor,
                key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if f_proj.shape[-2] < 1:
            raise ShapeError("need at least one input token")
        batched = f_proj.ndim == 3
        x = self.queries
        if batched:
            x = x.expand(f_proj.shape[0], -1, -1)
        h = self.norm_sa(x)
        qq, kk, vv = self.sa_qkv(h).chunk(3, dim=-1)
        x = x + self.sa_out(multihead_masked_attention(qq, kk, vv, self.heads))
        hq = self.norm_ca_q(x)
        hkv = self.norm_ca_kv(f_proj)
        term = multihead_masked_attention(
            self.ca_q(hq), self.ca_k(hkv), self.ca_v(hkv), self.heads, mask=key_mask)
        x = x + self.ca_out(term)
        x = x + self.ffn(self.norm_ffn(x))
        return x


def flops_cross_attention(B: int, H: int, N_q: int, N_k: int, d_h: int) -> int:
    """Cross-attention cost model: B * H * N_q * N_k * (4 d_h + 5)."""
    if min(B, H, N_q, d_h) < 1 or N_k < 0:
        raise ParameterError("all arguments must be positive (N_k may be 0)")
    return B * H * N_q * N_k * (4 * d_h + 5)
