"""Paired-test-set metrics, forward-pass throughput, and batch restoration."""
from __future__ import annotations

import csv
import gc
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import image_io, metrics, model
from .degrade import ImagePair
from .engine import ShapeError
from .model import ModelWeights

log = logging.getLogger(__name__)

Restorer = Union[ModelWeights, Callable[[np.ndarray], np.ndarray]]

# published GPU-era figures, kept as context only; nothing compares against them
REFERENCE = {
    "published_scores": {"mse": 0.0028, "ssim": 0.9653, "ms_ssim_l1": 0.0753},
    "seconds_per_image_512": 0.01601,
    "fps_512": 62.45,
    "seconds_per_image_256": 0.0043,
    "fps_256": 230.67,
}


def _runner(restorer: Restorer) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(restorer, ModelWeights):
        return lambda x: model.forward(restorer, x)
    return restorer


def identity_restorer(x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class MetricsReport:
    rows: list[dict]
    checkpoint_id: str
    image_size: tuple[int, int] | None
    alpha: float = 0.80
    skipped: list[dict] = field(default_factory=list)
    seconds_per_image: float | None = None

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {"mse": float("nan"), "ssim": float("nan"), "ms_ssim_l1": float("nan")}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in ("mse", "ssim", "ms_ssim_l1")}

    @property
    def fps(self) -> float | None:
        return None if not self.seconds_per_image else 1.0 / self.seconds_per_image

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "checkpoint": self.checkpoint_id,
            "image_size": list(self.image_size) if self.image_size else None,
            "count": self.count,
            "aggregate": self.aggregate,
            "rows": self.rows,
            "skipped": self.skipped,
            "metadata": {
                "ms_ssim_l1": f"alpha * (1 - MS-SSIM) + (1 - alpha) * L1 with alpha={self.alpha}",
                "ssim": "11x11 Gaussian window (sigma 1.5), valid region, per-channel mean",
            },
        }
        if include_timing:
            d["timing"] = {"seconds_per_image": self.seconds_per_image, "fps": self.fps, "scope": "forward pass only"}
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "mse", "ssim", "ms_ssim_l1"])
        for r in self.rows:
            w.writerow([r["id"], repr(r["mse"]), repr(r["ssim"]), repr(r["ms_ssim_l1"])])
        return buf.getvalue()

    def write(self, prefix) -> tuple[Path, Path]:
        """Write ``<prefix>.json`` and ``<prefix>.csv``; timing stays out so reruns are byte-identical."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        jp, cp = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def evaluate(
    restorer: Restorer,
    test_pairs: Sequence[ImagePair],
    checkpoint_id: str = "",
    alpha: float = 0.80,
) -> MetricsReport:
    """Restore every distorted image and score it against its clean twin."""
    if not test_pairs:
        raise ValueError("evaluate needs a non-empty paired test set")
    run = _runner(restorer)
    loss_cfg = metrics.LossConfig(alpha)
    rows, skipped, elapsed = [], [], 0.0
    sizes = set()
    for pair in test_pairs:
        try:
            t0 = time.perf_counter()
            out = run(pair.distorted)
            elapsed += time.perf_counter() - t0
        except ShapeError as exc:
            log.warning("skipping %s: %s", pair.identifier, exc)
            skipped.append({"id": pair.identifier, "reason": str(exc)})
            continue
        sizes.add(tuple(pair.clean.shape[-2:]))
        rows.append(
            {
                "id": pair.identifier,
                "mse": metrics.mse(out, pair.clean),
                "ssim": metrics.ssim(out, pair.clean),
                "ms_ssim_l1": metrics.ms_ssim_l1(out, pair.clean, loss_cfg),
            }
        )
    size = next(iter(sizes)) if len(sizes) == 1 else None
    spi = elapsed / len(rows) if rows else None
    return MetricsReport(rows, checkpoint_id, size, alpha, skipped, spi)


# -- throughput --------------------------------------------------------------------------


@dataclass
class BenchStats:
    image_size: tuple[int, int]
    timings: list[list[float]]  # seconds per forward, one list per repeat
    hardware: str = ""

    @property
    def all_timings(self) -> list[float]:
        return [t for run in self.timings for t in run]

    @property
    def timed_forwards(self) -> int:
        return len(self.all_timings)

    @property
    def mean_seconds(self) -> float:
        return statistics.fmean(self.all_timings)

    @property
    def median_seconds(self) -> float:
        return statistics.median(self.all_timings)

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_seconds

    @property
    def run_means(self) -> list[float]:
        return [statistics.fmean(r) for r in self.timings]

    @property
    def coefficient_of_variation(self) -> float:
        """Std / mean of the per-repeat mean seconds per image."""
        means = self.run_means
        if len(means) < 2:
            return 0.0
        return statistics.stdev(means) / statistics.fmean(means)

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "timed_forwards": self.timed_forwards,
            "mean_seconds_per_image": self.mean_seconds,
            "median_seconds_per_image": self.median_seconds,
            "fps": self.fps,
            "run_mean_seconds": self.run_means,
            "coefficient_of_variation": self.coefficient_of_variation,
            "hardware": self.hardware,
            "scope": "forward pass only; excludes decoding and disk I/O",
            "reference_gpu": REFERENCE,
        }


def bench_throughput(
    restorer: Restorer,
    images: Sequence[np.ndarray],
    warmup_count: int = 2,
    repeat: int = 3,
    hardware: str = "",
) -> BenchStats:
    """Time single-image forwards: ``warmup_count`` untimed passes, then ``repeat`` sweeps over ``images``."""
    if not images:
        raise ValueError("bench_throughput needs at least one image")
    if repeat < 3:
        raise ValueError(f"repeat must be >= 3, got {repeat}")
    run = _runner(restorer)
    for i in range(warmup_count):
        run(images[i % len(images)])
    timings = []
    # same policy as timeit: no collector pauses inside the timed region
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeat):
            sweep = []
            for img in images:
                t0 = time.perf_counter()
                run(img)
                sweep.append(time.perf_counter() - t0)
            timings.append(sweep)
    finally:
        if gc_was_enabled:
            gc.enable()
    return BenchStats(tuple(images[0].shape[-2:]), timings, hardware)


# -- batch restoration --------------------------------------------------------------------


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right edges up to the next multiple; returns the original size."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return x, (h, w)


def restore_image(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    padded, (h, w) = pad_to_multiple(x, weights.config.size_multiple)
    return model.forward(weights, padded)[..., :h, :w]


def restore_batch(weights: ModelWeights, input_dir, output_dir) -> int:
    """Restore every readable image in ``input_dir`` into ``output_dir`` as PNG, plus ``index.json``."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    index = {"inputs": [], "outputs": [], "skipped": []}
    for path in image_io.list_images(input_dir):
        try:
            x = image_io.read_image(path)
        except image_io.ImageFormatError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            index["skipped"].append({"input": path.name, "reason": str(exc)})
            continue
        out_name = f"{path.stem}.png"
        image_io.write_image(output_dir / out_name, restore_image(weights, x))
        index["inputs"].append(path.name)
        index["outputs"].append(out_name)
    (output_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return len(index["outputs"])
