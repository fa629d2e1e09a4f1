"""Synthetic underwater degradation and paired dataset generation.

The corruption model is a per-channel attenuation/backscatter blend

    out_c = clean_c * exp(-beta_c * d) + ambient_c * (1 - exp(-beta_c * d))

followed by contrast compression toward the per-channel image mean,
additive Gaussian sensor noise and clamping to [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import image_io

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationParams:
    beta: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ambient: tuple[float, float, float] = (0.0, 0.0, 0.0)
    depth_scale: float = 1.0
    contrast_loss: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.beta) != 3 or len(self.ambient) != 3:
            raise DegradationError("beta and ambient need exactly three (R, G, B) entries")
        if any(not math.isfinite(b) or b < 0 for b in self.beta):
            raise DegradationError(f"beta must be finite and >= 0, got {self.beta}")
        if any(not 0.0 <= a <= 1.0 for a in self.ambient):
            raise DegradationError(f"ambient must lie in [0, 1], got {self.ambient}")
        if not (math.isfinite(self.depth_scale) and self.depth_scale > 0):
            raise DegradationError(f"depth_scale must be > 0, got {self.depth_scale}")
        if not 0.0 <= self.contrast_loss <= 1.0:
            raise DegradationError(f"contrast_loss must lie in [0, 1], got {self.contrast_loss}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise DegradationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["beta"] = list(self.beta)
        d["ambient"] = list(self.ambient)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DegradationParams":
        return cls(
            beta=tuple(float(v) for v in d["beta"]),
            ambient=tuple(float(v) for v in d["ambient"]),
            depth_scale=float(d["depth_scale"]),
            contrast_loss=float(d["contrast_loss"]),
            noise_sigma=float(d["noise_sigma"]),
            seed=int(d.get("seed", 0)),
        )


def degrade(clean: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Apply the corruption model to a (N, 3, H, W) image batch in [0, 1]."""
    clean = np.asarray(clean)
    if clean.ndim != 4 or clean.shape[1] != 3:
        raise DegradationError(f"expected (N, 3, H, W) input, got {clean.shape}")
    if clean.size and (clean.min() < 0 or clean.max() > 1):
        raise DegradationError("clean image values must lie in [0, 1]")
    x = clean.astype(np.float64)
    beta = np.asarray(params.beta, dtype=np.float64)[None, :, None, None]
    ambient = np.asarray(params.ambient, dtype=np.float64)[None, :, None, None]
    if np.any(beta > 0):
        t = np.exp(-beta * params.depth_scale)
        x = x * t + ambient * (1.0 - t)
    if params.contrast_loss > 0:
        mean = x.mean(axis=(2, 3), keepdims=True)
        x = mean + (1.0 - params.contrast_loss) * (x - mean)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(clean.dtype if np.issubdtype(clean.dtype, np.floating) else np.float32)


# -- parameter presets -----------------------------------------------------------------

# (low, high) per field; beta/ambient ranges are per channel R, G, B
PRESETS: dict[str, dict] = {
    "greenish": {
        "beta": ((0.6, 1.2), (0.05, 0.25), (0.2, 0.5)),
        "ambient": ((0.0, 0.15), (0.35, 0.6), (0.25, 0.45)),
        "depth_scale": (0.6, 1.4),
        "contrast_loss": (0.1, 0.35),
        "noise_sigma": (0.0, 0.02),
    },
    "bluish": {
        "beta": ((0.6, 1.2), (0.2, 0.45), (0.02, 0.2)),
        "ambient": ((0.0, 0.12), (0.25, 0.45), (0.45, 0.7)),
        "depth_scale": (0.6, 1.4),
        "contrast_loss": (0.1, 0.35),
        "noise_sigma": (0.0, 0.02),
    },
    "turbid": {
        "beta": ((0.4, 0.9), (0.3, 0.6), (0.35, 0.7)),
        "ambient": ((0.25, 0.45), (0.4, 0.55), (0.35, 0.5)),
        "depth_scale": (0.8, 1.6),
        "contrast_loss": (0.3, 0.55),
        "noise_sigma": (0.0, 0.03),
    },
}
PRESET_NAMES = ("greenish", "bluish", "turbid", "mixed")


def preset_ranges(preset: str) -> dict:
    """Declared sampling ranges; ``mixed`` is the envelope of the other presets."""
    if preset in PRESETS:
        return PRESETS[preset]
    if preset != "mixed":
        raise DegradationError(f"unknown preset {preset!r}; choose from {PRESET_NAMES}")
    env = {}
    for key in ("depth_scale", "contrast_loss", "noise_sigma"):
        env[key] = (min(p[key][0] for p in PRESETS.values()), max(p[key][1] for p in PRESETS.values()))
    for key in ("beta", "ambient"):
        env[key] = tuple(
            (min(p[key][c][0] for p in PRESETS.values()), max(p[key][c][1] for p in PRESETS.values()))
            for c in range(3)
        )
    return env


def sample_params(rng_seed: int | np.random.SeedSequence, preset: str = "mixed") -> DegradationParams:
    """Draw parameters uniformly from ``preset``'s ranges; deterministic per seed."""
    if preset not in PRESET_NAMES:
        raise DegradationError(f"unknown preset {preset!r}; choose from {PRESET_NAMES}")
    rng = np.random.default_rng(rng_seed)
    if preset == "mixed":
        preset = ("greenish", "bluish", "turbid")[int(rng.integers(3))]
    r = PRESETS[preset]

    def u(lo_hi):
        return float(rng.uniform(*lo_hi))

    return DegradationParams(
        beta=tuple(u(r["beta"][c]) for c in range(3)),
        ambient=tuple(u(r["ambient"][c]) for c in range(3)),
        depth_scale=u(r["depth_scale"]),
        contrast_loss=u(r["contrast_loss"]),
        noise_sigma=u(r["noise_sigma"]),
        seed=int(rng.integers(2**31)),
    )


# -- resizing -----------------------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages source interval [i * n_in / n_out, (i + 1) * n_in / n_out)."""
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / scale


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_out <= n_in:
        return _area_matrix(n_in, n_out)
    return _bilinear_matrix(n_in, n_out)


def resize_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average downscale of (..., H, W); axes that grow fall back to bilinear."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return img.copy()
    rh = _resample_matrix(h, out_h)
    rw = _resample_matrix(w, out_w)
    out = rh @ img.astype(np.float64) @ rw.T
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


# -- procedural clean scenes ---------------------------------------------------------------


def procedural_scene(seed: int | np.random.SeedSequence, size: int = 64) -> np.ndarray:
    """A colourful (1, 3, size, size) test scene: gradient backdrop, blobs, a checker patch, smooth grain."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        color = rng.uniform(0, 1, 3)
        mask = np.clip((r - np.hypot(yy - cy, xx - cx)) * size / 2.0, 0, 1)
        img = img * (1 - mask) + color[:, None, None] * mask

    period = int(rng.integers(3, 9))
    y0, x0 = rng.integers(0, max(size // 2, 1), 2)
    ext = int(rng.integers(size // 4, size // 2 + 1))
    checker = ((np.arange(ext)[:, None] // period + np.arange(ext)[None, :] // period) % 2).astype(float)
    ca, cb = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    patch = ca[:, None, None] * checker + cb[:, None, None] * (1 - checker)
    img[:, y0 : y0 + ext, x0 : x0 + ext] = patch[:, : size - y0, : size - x0]

    # band-limited grain: white noise at quarter resolution, upsampled. Per-pixel noise
    # in a clean target is unpredictable from a noisy input and would cap any restorer.
    coarse = max(size // 4, 1)
    up = _bilinear_matrix(coarse, size)
    grain = up @ rng.normal(0, 0.03, (3, coarse, coarse)) @ up.T
    return np.clip(img + grain, 0, 1)[None].astype(np.float32)


# -- datasets ---------------------------------------------------------------------------


@dataclass
class ImagePair:
    clean: np.ndarray
    distorted: np.ndarray
    params: DegradationParams | None
    identifier: str

    def __post_init__(self):
        if self.clean.shape != self.distorted.shape:
            raise ValueError(f"pair {self.identifier}: shapes {self.clean.shape} != {self.distorted.shape}")


@dataclass
class DatasetManifest:
    seed: int
    preset: str
    size: int
    entries: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "seed": self.seed,
            "preset": self.preset,
            "size": self.size,
            "entries": self.entries,
            "skipped": self.skipped,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        return cls(doc["seed"], doc["preset"], doc["size"], doc["entries"], doc.get("skipped", []), doc["version"])

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.entries if split is None or e["split"] == split]


def split_for(identifier: str) -> str:
    """80/10/10 train/val/test assignment from a stable hash of the id."""
    bucket = int.from_bytes(hashlib.sha256(identifier.encode()).digest()[:8], "big") % 100
    if bucket < 80:
        return "train"
    if bucket < 90:
        return "val"
    return "test"


def make_pair(clean: np.ndarray, params: DegradationParams, identifier: str) -> ImagePair:
    return ImagePair(clean, degrade(clean, params), params, identifier)


def build_dataset(
    clean_dir,
    out_dir,
    count: int,
    size: int = 64,
    preset: str = "mixed",
    seed: int = 0,
) -> DatasetManifest:
    """Write ``count`` clean/distorted PNG pairs plus ``manifest.json`` to ``out_dir``.

    Source images from ``clean_dir`` are cycled in sorted order and resized to
    ``size`` x ``size``. With ``clean_dir=None`` each clean image is a
    procedural scene seeded from ``seed`` and the pair index.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if preset not in PRESET_NAMES:
        raise DegradationError(f"unknown preset {preset!r}; choose from {PRESET_NAMES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(seed=seed, preset=preset, size=size)

    sources: list[tuple[str, np.ndarray]] = []
    if clean_dir is not None:
        for path in image_io.list_images(clean_dir):
            try:
                sources.append((path.name, image_io.read_image(path)))
            except image_io.ImageFormatError as exc:
                log.warning("skipping unreadable image %s: %s", path.name, exc)
                manifest.skipped.append({"source": path.name, "reason": str(exc)})
        if not sources:
            raise DegradationError(f"no decodable images in {clean_dir}")

    children = np.random.SeedSequence(seed).spawn(count)
    for i, child in enumerate(children):
        scene_seed, param_seed = child.spawn(2)
        identifier = f"{i:05d}"
        if sources:
            name, img = sources[i % len(sources)]
            clean = resize_area(img, size, size)
        else:
            name, clean = "procedural", procedural_scene(scene_seed, size)
        clean = np.clip(clean, 0, 1)
        params = sample_params(param_seed, preset)
        pair = make_pair(clean, params, identifier)
        image_io.write_image(out_dir / f"{identifier}_clean.png", pair.clean)
        image_io.write_image(out_dir / f"{identifier}_distorted.png", pair.distorted)
        manifest.entries.append(
            {"id": identifier, "split": split_for(identifier), "source": name, "params": params.to_json()}
        )

    (out_dir / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def load_pairs(data_dir, split: str | None = None) -> list[ImagePair]:
    """Read the pairs listed in ``data_dir/manifest.json``, optionally one split only."""
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / MANIFEST_NAME)
    pairs = []
    for e in manifest.entries:
        if split is not None and e["split"] != split:
            continue
        pairs.append(
            ImagePair(
                image_io.read_image(data_dir / f"{e['id']}_clean.png"),
                image_io.read_image(data_dir / f"{e['id']}_distorted.png"),
                DegradationParams.from_json(e["params"]),
                e["id"],
            )
        )
    return pairs
