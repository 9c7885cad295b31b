"""Fidelity metrics on the luma channel, perceptual proxy, and report generation.

PSNR and SSIM are computed on full-range BT.601 luma (Y = 0.299 R + 0.587 G +
0.114 B) of unit-range images, matching the evaluation convention used across
the repo.  SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with
C1 = 0.01^2, C2 = 0.03^2, averaged over valid window positions only.

Learned perceptual metrics are not bundled; ``register_perceptual`` exposes a
plug-in slot, and the default proxy is a multi-scale SSIM distance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.signal import convolve2d

from .types import ParameterError, ShapeError

_Y_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _as_chw(img) -> np.ndarray:
    arr = np.asarray(img.data if hasattr(img, "data") else img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {arr.shape}")
    return arr


def to_y(img) -> np.ndarray:
    """Full-range BT.601 luma of a unit-range (3, H, W) image."""
    arr = _as_chw(img)
    return np.tensordot(_Y_WEIGHTS, arr, axes=1)


def psnr_y(a, b) -> float:
    """10 log10(1 / MSE_Y); +inf for identical inputs."""
    ya, yb = to_y(a), to_y(b)
    if ya.shape != yb.shape:
        raise ShapeError(f"shape mismatch {ya.shape} vs {yb.shape}")
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_KERNEL = _gaussian_kernel()
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def ssim_y(a, b, window: int = 11) -> float:
    """Standard single-scale SSIM on luma, valid window positions only."""
    ya, yb = to_y(a), to_y(b)
    if ya.shape != yb.shape:
        raise ShapeError(f"shape mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) < window:
        raise ParameterError(f"image dims {ya.shape} smaller than window {window}")
    k = _SSIM_KERNEL

    def filt(x):
        return convolve2d(x, k, mode="valid")

    mu_a = filt(ya)
    mu_b = filt(yb)
    var_a = filt(ya * ya) - mu_a * mu_a
    var_b = filt(yb * yb) - mu_b * mu_b
    cov = filt(ya * yb) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def ms_ssim_y(a, b, levels: int = 3) -> float:
    """Multi-scale SSIM proxy: mean single-scale SSIM over dyadic scales."""
    arr_a = _as_chw(a)
    arr_b = _as_chw(b)
    vals = []
    for lvl in range(levels):
        if min(arr_a.shape[1:]) < 11:
            break
        vals.append(ssim_y(arr_a, arr_b))
        h, w = arr_a.shape[1] // 2 * 2, arr_a.shape[2] // 2 * 2
        arr_a = arr_a[:, :h, :w].reshape(3, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        arr_b = arr_b[:, :h, :w].reshape(3, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    if not vals:
        raise ParameterError("image too small for any SSIM scale")
    return float(np.mean(vals))


def proxy_distance(a, b) -> float:
    """Default hand-crafted perceptual distance: 1 - multi-scale SSIM (>= 0)."""
    return max(1.0 - ms_ssim_y(a, b), 0.0)


PERCEPTUAL: dict[str, Callable] = {"msssim_distance": proxy_distance}


def register_perceptual(name: str, fn: Callable):
    """Plug-in slot for learned perceptual metrics (none bundled)."""
    PERCEPTUAL[name] = fn


@dataclass
class EvalRecord:
    sample_id: str
    psnr_y: float
    ssim_y: float
    proxy: float
    stratum: str = "unassigned"


def _aggregate(records: list[EvalRecord]) -> dict:
    def stats(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}

    return {
        "psnr_y": stats([r.psnr_y for r in records]),
        "ssim_y": stats([r.ssim_y for r in records]),
        "proxy": stats([r.proxy for r in records]),
    }


def evaluate(manifest: dict, outputs_dir, split: str = "test",
             proxy: Optional[Callable] = None, root=None) -> dict:
    """Score every output image against its HR target, stratified.

    Every manifest sample must have an output at {outputs_dir}/{id}.png; all
    missing outputs are listed before failing.
    """
    from .data import load_png  # local import to avoid a cycle

    outputs_dir = Path(outputs_dir)
    proxy = proxy or proxy_distance
    samples = manifest["splits"][split]
    missing = [s["id"] for s in samples if not (outputs_dir / f"{s['id']}.png").exists()]
    if missing:
        raise FileNotFoundError(f"missing {len(missing)} outputs: {missing}")
    root = Path(root) if root is not None else Path(manifest["root"])

    records = []
    for s in samples:
        hr = load_png(root / s["files"]["hr"])
        out = load_png(outputs_dir / f"{s['id']}.png")
        if hr.shape != out.shape:
            raise ShapeError(f"{s['id']}: output shape {out.shape} != HR {hr.shape}")
        records.append(EvalRecord(
            sample_id=s["id"],
            psnr_y=psnr_y(out, hr),
            ssim_y=ssim_y(out, hr),
            proxy=float(proxy(out, hr)),
            stratum=s.get("meta", {}).get("stratum", "unassigned"),
        ))

    strata = {}
    for name in sorted({r.stratum for r in records}):
        strata[name] = _aggregate([r for r in records if r.stratum == name])
    report = {
        "split": split,
        "records": [asdict(r) for r in records],
        "strata": strata,
        "overall": _aggregate(records),
    }
    return report


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2))


def format_report(report: dict) -> str:
    lines = [f"split: {report['split']}  (n={report['overall']['psnr_y']['n']})"]
    rows = [("overall", report["overall"])] + sorted(report["strata"].items())
    lines.append(f"{'stratum':<12} {'psnr_y':>16} {'ssim_y':>16} {'proxy':>16}")
    for name, agg in rows:
        lines.append(
            f"{name:<12} "
            f"{agg['psnr_y']['mean']:>8.3f} ±{agg['psnr_y']['std']:>6.3f} "
            f"{agg['ssim_y']['mean']:>8.4f} ±{agg['ssim_y']['std']:>6.4f} "
            f"{agg['proxy']['mean']:>8.4f} ±{agg['proxy']['std']:>6.4f}")
    return "\n".join(lines)
