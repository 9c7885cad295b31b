"""Independent oracles used by the test suite.

These implement the checked quantities by brute force (loops, finite
differences, direct accumulation) on purpose: they must stay independent of
the library code paths they verify.
"""

import math

import numpy as np
import torch


def fd_grad(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn at x, coordinate by coordinate."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Global relative L2 error between two gradient tensors."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-30)
    return num / den


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def window_attention_oracle(q, k, v, win):
    """Per-window dense attention computed with explicit loops.

    q, k, v: (B, C, H, W) arrays; windows tile the spatial dims exactly.
    """
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    B, C, H, W = q.shape
    h, w = win
    out = np.zeros_like(q)
    for b in range(B):
        for wy in range(H // h):
            for wx in range(W // w):
                ys = slice(wy * h, (wy + 1) * h)
                xs = slice(wx * w, (wx + 1) * w)
                qw = q[b, :, ys, xs].reshape(C, -1).T      # (hw, C)
                kw = k[b, :, ys, xs].reshape(C, -1).T
                vw = v[b, :, ys, xs].reshape(C, -1).T
                attn = softmax_rows(qw @ kw.T / math.sqrt(C))
                out[b, :, ys, xs] = (attn @ vw).T.reshape(C, h, w)
    return out


def masked_attention_oracle(q, k, v, mask, s=1.0):
    """Dense attention over retained keys only (columns with mask > 0 kept)."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    mask = np.asarray(mask, dtype=np.float64)
    keep = mask > 0
    if not keep.any():
        return q.copy()
    kk = k[keep]
    vv = v[keep]
    scores = q @ kk.T / math.sqrt(q.shape[-1]) + np.log(mask[keep])[None, :]
    return q + s * softmax_rows(scores) @ vv


def psnr_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR via explicit per-pixel accumulation."""
    total = 0.0
    n = 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        total += (float(x) - float(y)) ** 2
        n += 1
    if total == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / (total / n))
