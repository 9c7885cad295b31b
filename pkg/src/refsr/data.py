"""Procedural Ref/LR/HR triplet generation, dataset manifests, and splits.

Scenes are land-cover style composites: a textured field background, Voronoi
parcels of forest/water, a road network, and building clusters.  The
"historical" reference is the same scene with a seeded amount of object-level
change plus a global style shift (per-channel affine), and the LR image is a
cross-sensor style degradation (blur, area downsample, sensor noise, color
shift).  Everything is a pure function of (config, seed): rebuilding a
dataset with the same master seed is byte-identical.

Directory layout: {root}/{split}/{id}/(hr|ref|lr|change_mask).png, one
line-delimited metadata record per sample in {root}/{split}/metadata.jsonl,
and a single {root}/manifest.json with relative paths and checksums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .types import ParameterError, ShapeError

_SPLIT_SEED_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class SceneSpec:
    size: int = 160
    densities: dict = field(default_factory=lambda: {
        "forest": 1.0, "water": 1.0, "road": 1.0, "building": 1.0})

    def __post_init__(self):
        if self.size < 16:
            raise ParameterError("scene size must be >= 16")
        if any(v < 0 for v in self.densities.values()):
            raise ParameterError("densities must be >= 0")


@dataclass(frozen=True)
class DegradeConfig:
    blur_sigma: tuple[float, float] = (1.4, 2.6)
    noise_sigma: tuple[float, float] = (0.004, 0.015)
    color_gain: float = 0.04
    color_offset: float = 0.015


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 160
    scale: int = 10
    change_rate: tuple[float, float] = (0.0, 0.35)
    degrade: DegradeConfig = DegradeConfig()

    def to_dict(self) -> dict:
        return asdict(self)


def config_digest(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# drawing helpers (all operate on (3, H, W) float arrays in [0, 1])


def _smooth_noise(rng, size, cells, amp=1.0):
    coarse = rng.random((cells, cells))
    reps = int(np.ceil(size / cells))
    fine = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    return gaussian_filter(fine, sigma=reps / 2.0, mode="reflect") * amp


def _field_texture(rng, size):
    base = np.array([0.38, 0.46, 0.26])[:, None, None]
    tint = np.array([0.52, 0.44, 0.30])[:, None, None]
    mix = _smooth_noise(rng, size, 8)[None]
    img = base * (1.0 - mix) + tint * mix
    img = img + rng.normal(0.0, 0.015, (3, size, size))
    return np.clip(img, 0.0, 1.0)


def _blob_mask(rng, size, radius):
    cy, cx = rng.uniform(0, size, 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ang = np.arctan2(yy - cy, xx - cx)
    lobes = int(rng.integers(3, 7))
    phase = rng.uniform(0, 2 * np.pi)
    wobble = 1.0 + 0.35 * np.sin(lobes * ang + phase)
    dist = np.hypot(yy - cy, xx - cx)
    return dist <= radius * wobble


def _paint(img, mask, color, rng, noise=0.02):
    tex = np.asarray(color)[:, None] + rng.normal(0.0, noise, (3, int(mask.sum())))
    img[:, mask] = np.clip(tex, 0.0, 1.0)


def _segment_mask(size, p0, p1, width):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.array(p1) - np.array(p0)
    norm2 = float(d @ d) or 1.0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / norm2, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return dist <= width / 2.0


def _draw_road(img, rng, size):
    edges = [(0.0, rng.uniform(0, size)), (size - 1.0, rng.uniform(0, size)),
             (rng.uniform(0, size), 0.0), (rng.uniform(0, size), size - 1.0)]
    i, j = rng.choice(4, size=2, replace=False)
    width = rng.uniform(0.015, 0.03) * size + 1.5
    mask = _segment_mask(size, edges[i], edges[j], width)
    _paint(img, mask, [0.42, 0.42, 0.44], rng, noise=0.015)
    return mask


def _draw_building_cluster(img, rng, size):
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
    n = int(rng.integers(2, 6))
    palette = [[0.72, 0.70, 0.68], [0.55, 0.35, 0.28], [0.30, 0.30, 0.34], [0.62, 0.58, 0.48]]
    total = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        h = int(rng.integers(max(3, size // 20), max(5, size // 9)))
        w = int(rng.integers(max(3, size // 20), max(5, size // 9)))
        y = int(np.clip(cy + rng.normal(0, size / 10), 0, size - h - 1))
        x = int(np.clip(cx + rng.normal(0, size / 10), 0, size - w - 1))
        border = np.zeros((size, size), dtype=bool)
        border[y:y + h, x:x + w] = True
        inner = np.zeros((size, size), dtype=bool)
        inner[y + 1:y + h - 1, x + 1:x + w - 1] = True
        _paint(img, border, [0.18, 0.17, 0.16], rng, noise=0.01)
        _paint(img, inner, palette[int(rng.integers(len(palette)))], rng, noise=0.02)
        total |= border
    return total


def generate_scene(spec: SceneSpec, seed: int) -> np.ndarray:
    """Deterministic procedural HR scene, (3, size, size) float in [0, 1]."""
    rng = np.random.default_rng(seed)
    size = spec.size
    img = _field_texture(rng, size)
    area_scale = (size / 160.0) ** 2

    n_forest = int(round(spec.densities.get("forest", 0.0) * 3 * max(area_scale, 0.25)))
    for _ in range(n_forest):
        mask = _blob_mask(rng, size, rng.uniform(0.08, 0.18) * size)
        _paint(img, mask, [0.13, 0.30, 0.14], rng, noise=0.03)

    n_water = int(round(spec.densities.get("water", 0.0) * 1.5 * max(area_scale, 0.25)))
    for _ in range(n_water):
        mask = _blob_mask(rng, size, rng.uniform(0.07, 0.15) * size)
        _paint(img, mask, [0.15, 0.25, 0.42], rng, noise=0.008)

    n_road = int(round(spec.densities.get("road", 0.0) * 2 * max(np.sqrt(area_scale), 0.5)))
    for _ in range(n_road):
        _draw_road(img, rng, size)

    n_build = int(round(spec.densities.get("building", 0.0) * 3 * max(area_scale, 0.25)))
    for _ in range(n_build):
        _draw_building_cluster(img, rng, size)

    return img.astype(np.float64)


def scene_kind(spec: SceneSpec, seed: int) -> str:
    """Coarse scene label derived from the seeded composition."""
    rng = np.random.default_rng(seed + 17)
    return str(rng.choice(["residential", "industrial", "farmland", "mixed"]))


# ---------------------------------------------------------------------------
# change injection and degradation


def style_shift(img: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Global per-channel affine emulating temporal imaging differences."""
    return np.clip(img * gain[:, None, None] + offset[:, None, None], 0.0, 1.0)


def apply_change(scene: np.ndarray, change_rate: float, seed: int):
    """Historical reference: seeded object changes + style shift.

    Returns (ref, change_mask, info).  The mask is exactly the pixel set where
    the pre-style-shift reference differs from the scene; its area lands
    within +-20% of change_rate relative.  Outside the mask, ref equals the
    style-shifted scene pixel for pixel.
    """
    if not (0.0 <= change_rate <= 1.0):
        raise ParameterError(f"change_rate must lie in [0, 1], got {change_rate}")
    rng = np.random.default_rng(seed)
    size = scene.shape[-1]
    ref = scene.copy()
    target = change_rate * scene.shape[-1] * scene.shape[-2]

    if target > 0:
        palette = {
            "building": None,   # painter draws its own colors
            "field": [0.40, 0.46, 0.28],
            "forest": [0.13, 0.30, 0.14],
            "water": [0.15, 0.25, 0.42],
        }
        # add objects one at a time, rejecting any that would overshoot the
        # +-20% relative band around the target changed area
        for _ in range(400):
            area = float((ref != scene).any(axis=0).sum())
            if area >= target * 0.85:
                break
            deficit = target - area
            kind = str(rng.choice(list(palette)))
            nominal = min(deficit * 1.02, 0.05 * size * size)
            trial = ref.copy()
            if kind == "building":
                _draw_building_cluster(trial, rng, size)
            else:
                side = max(2.0, np.sqrt(nominal))
                if rng.random() < 0.5:
                    mask = _blob_mask(rng, size, np.sqrt(nominal / np.pi))
                else:
                    h = int(np.clip(side * rng.uniform(0.7, 1.4), 2, size))
                    w = max(2, min(int(nominal / h), size))
                    y = int(rng.integers(0, max(size - h, 1)))
                    x = int(rng.integers(0, max(size - w, 1)))
                    mask = np.zeros((size, size), dtype=bool)
                    mask[y:y + h, x:x + w] = True
                _paint(trial, mask, palette[kind], rng, noise=0.02)
            if float((trial != scene).any(axis=0).sum()) <= target * 1.15:
                ref = trial

    change_mask = (ref != scene).any(axis=0)
    gain = 1.0 + rng.uniform(-0.12, 0.12, 3)
    offset = rng.uniform(-0.05, 0.05, 3)
    ref = style_shift(ref, gain, offset)
    info = {"style_gain": gain.tolist(), "style_offset": offset.tolist(),
            "change_area": float(change_mask.mean())}
    return ref, change_mask, info


def degrade(i_hr: np.ndarray, scale: int, seed: int,
            cfg: DegradeConfig = DegradeConfig()):
    """Cross-sensor style LR synthesis: blur, area downsample, noise, color shift."""
    _, h, w = i_hr.shape
    if h % scale or w % scale:
        raise ShapeError(f"HR dims ({h}, {w}) not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(*cfg.blur_sigma)
    blurred = gaussian_filter(i_hr, sigma=(0, sigma, sigma), mode="reflect")
    lr = blurred.reshape(3, h // scale, scale, w // scale, scale).mean(axis=(2, 4))
    noise_sigma = rng.uniform(*cfg.noise_sigma)
    if noise_sigma > 0:
        lr = lr + rng.normal(0.0, noise_sigma, lr.shape)
    gain = 1.0 + rng.uniform(-cfg.color_gain, cfg.color_gain, 3)
    offset = rng.uniform(-cfg.color_offset, cfg.color_offset, 3)
    lr = lr * gain[:, None, None] + offset[:, None, None]
    info = {"blur_sigma": float(sigma), "noise_sigma": float(noise_sigma)}
    return np.clip(lr, 0.0, 1.0), info


# ---------------------------------------------------------------------------
# PNG and manifest IO


def save_png(path, arr: np.ndarray) -> None:
    """Save a (3, H, W) unit image or an (H, W) mask as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3:
        Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        Image.fromarray(data, mode="L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Load a PNG back to float64 unit range, (3, H, W) or (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)
    return arr


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sample_seed(master_seed: int, split: str, index: int) -> int:
    return master_seed + _SPLIT_SEED_OFFSETS[split] + index


def build_dataset(n_train: int, n_val: int, n_test: int, config: DatasetConfig,
                  seed: int, out_dir, force: bool = False) -> dict:
    """Write triplet files plus a manifest; splits use disjoint seed ranges."""
    if min(n_train, n_val, n_test) < 1:
        raise ParameterError("split counts must be >= 1")
    if config.size % config.scale:
        raise ParameterError(f"size {config.size} not divisible by scale {config.scale}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"{out_dir} exists and is not empty (use force)")
        import shutil
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    spec = SceneSpec(size=config.size)
    manifest = {
        "version": 1,
        "master_seed": seed,
        "config": config.to_dict(),
        "config_digest": config_digest(config.to_dict()),
        "root": str(out_dir),
        "splits": {},
    }
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        entries = []
        meta_lines = []
        for i in range(count):
            s = sample_seed(seed, split, i)
            sid = f"{split}_{i:05d}"
            rng = np.random.default_rng(s + 500_000)
            rate = float(rng.uniform(*config.change_rate))
            hr = generate_scene(spec, s)
            ref, mask, change_info = apply_change(hr, rate, s + 1)
            lr, degrade_info = degrade(hr, config.scale, s + 2, config.degrade)
            rel = Path(split) / sid
            files = {"hr": str(rel / "hr.png"), "ref": str(rel / "ref.png"),
                     "lr": str(rel / "lr.png"), "change_mask": str(rel / "change_mask.png")}
            save_png(out_dir / files["hr"], hr)
            save_png(out_dir / files["ref"], ref)
            save_png(out_dir / files["lr"], lr)
            save_png(out_dir / files["change_mask"], mask.astype(np.float64))
            meta = {"seed": s, "change_rate": rate, "scene_kind": scene_kind(spec, s),
                    **change_info, **degrade_info}
            entry = {"id": sid, "files": files,
                     "sha256": {k: _sha256(out_dir / v) for k, v in files.items()},
                     "meta": meta}
            entries.append(entry)
            meta_lines.append(json.dumps({"id": sid, **meta}, sort_keys=True))
        (out_dir / split / "metadata.jsonl").write_text("\n".join(meta_lines) + "\n")
        manifest["splits"][split] = entries

    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_triplet(manifest: dict, split: str, sample_id: str) -> dict:
    root = Path(manifest["root"])
    entry = next(s for s in manifest["splits"][split] if s["id"] == sample_id)
    out = {k: load_png(root / v) for k, v in entry["files"].items()}
    out["meta"] = entry["meta"]
    return out


# ---------------------------------------------------------------------------
# similarity stratification


def split_by_similarity(manifest: dict, metric: Optional[Callable] = None,
                        split: str = "test", n_strata: int = 4,
                        log: Optional[list] = None) -> dict:
    """Assign L1..Ln strata by increasing ref->HR perceptual distance.

    Strata are equal-size (len // n_strata each, sorted order, ties broken by
    sample id); assignments are written into the manifest entries' meta.
    Samples whose metric fails are excluded with a logged reason.
    """
    from .metrics import proxy_distance

    metric = metric or proxy_distance
    samples = manifest["splits"][split]
    if len(samples) < n_strata:
        raise ParameterError(f"need >= {n_strata} samples, have {len(samples)}")
    root = Path(manifest["root"])
    scored = []
    for s in samples:
        try:
            ref = load_png(root / s["files"]["ref"])
            hr = load_png(root / s["files"]["hr"])
            scored.append((float(metric(ref, hr)), s["id"], s))
        except Exception as exc:  # noqa: BLE001 - excluded with reason, per contract
            if log is not None:
                log.append(f"{s['id']}: excluded ({exc})")
    scored.sort(key=lambda t: (t[0], t[1]))
    per = len(scored) // n_strata
    strata = {}
    for k in range(n_strata):
        name = f"L{k + 1}"
        block = scored[k * per:(k + 1) * per]
        strata[name] = [sid for _, sid, _ in block]
        for dist, _, entry in block:
            entry.setdefault("meta", {})["stratum"] = name
            entry["meta"]["similarity_distance"] = dist
    return strata
