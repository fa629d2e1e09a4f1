"""Adam training loop for the composite MS-SSIM + L1 objective."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, model
from .degrade import ImagePair
from .model import ModelWeights

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    alpha: float = 0.80
    seed: int = 0
    checkpoint_every: int = 0
    image_size: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        metrics.LossConfig(self.alpha)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class LossHistory:
    # one row per optimizer step; val_loss only on the last step of each epoch
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, step: int, train_loss: float, val_loss: float | None = None):
        self.rows.append({"epoch": epoch, "step": step, "train_loss": train_loss, "val_loss": val_loss})

    @property
    def step_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    def epoch_summary(self) -> list[dict]:
        out: dict[int, dict] = {}
        for r in self.rows:
            e = out.setdefault(r["epoch"], {"epoch": r["epoch"], "losses": [], "val_loss": None})
            e["losses"].append(r["train_loss"])
            if r["val_loss"] is not None:
                e["val_loss"] = r["val_loss"]
        return [
            {"epoch": e["epoch"], "train_loss": float(np.mean(e["losses"])), "val_loss": e["val_loss"]}
            for e in out.values()
        ]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "train_loss", "val_loss"])
            for r in self.rows:
                val = "" if r["val_loss"] is None else repr(r["val_loss"])
                w.writerow([r["epoch"], r["step"], repr(r["train_loss"]), val])

    @classmethod
    def read_csv(cls, path) -> "LossHistory":
        h = cls()
        with Path(path).open() as fh:
            for r in csv.DictReader(fh):
                h.add(int(r["epoch"]), int(r["step"]), float(r["train_loss"]), float(r["val_loss"]) if r["val_loss"] else None)
        return h


def block_means(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Means over consecutive non-overlapping ``window``-step blocks (trailing partial block dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def _stack(pairs: Sequence[ImagePair], which: str) -> np.ndarray:
    return np.concatenate([getattr(p, which) for p in pairs], axis=0).astype(np.float32)


def _layer_norms(weights: ModelWeights) -> str:
    return ", ".join(f"{i}:{float(np.linalg.norm(l.weights)):.3g}" for i, l in enumerate(weights.layers))


def validation_loss(weights: ModelWeights, pairs: Sequence[ImagePair], cfg: TrainConfig) -> float | None:
    if not pairs:
        return None
    loss_cfg = metrics.LossConfig(cfg.alpha)
    total, n = 0.0, 0
    for i in range(0, len(pairs), cfg.batch_size):
        chunk = pairs[i : i + cfg.batch_size]
        out = model.forward(weights, _stack(chunk, "distorted"))
        total += metrics.ms_ssim_l1(out, _stack(chunk, "clean"), loss_cfg) * len(chunk)
        n += len(chunk)
    return total / n


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for ``epoch``, a pure function of (seed, epoch) so resumed runs match."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def save_training_state(path, weights: ModelWeights, state: AdamState, epoch: int) -> None:
    """Checkpoint file plus a sibling ``.state.npz`` holding the optimizer moments."""
    path = Path(path)
    model.save_weights(weights, path)
    arrays = {f"m{i}": m for i, m in enumerate(state.m)}
    arrays.update({f"v{i}": v for i, v in enumerate(state.v)})
    with open(path.with_suffix(".state.npz"), "wb") as fh:
        np.savez(fh, t=np.int64(state.t), epoch=np.int64(epoch), **arrays)


def load_training_state(path) -> tuple[ModelWeights, AdamState, int]:
    path = Path(path)
    weights = model.load_weights(path)
    with np.load(path.with_suffix(".state.npz")) as z:
        k = len(weights.parameters())
        state = AdamState([z[f"m{i}"] for i in range(k)], [z[f"v{i}"] for i in range(k)], int(z["t"]))
        epoch = int(z["epoch"])
    return weights, state, epoch


def train(
    weights: ModelWeights,
    train_pairs: Sequence[ImagePair],
    cfg: TrainConfig,
    val_pairs: Sequence[ImagePair] = (),
    checkpoint_dir=None,
    optimizer_state: AdamState | None = None,
    start_epoch: int = 0,
    steps: int | None = None,
) -> tuple[ModelWeights, LossHistory]:
    """Minimize the composite loss of restored distorted images against their clean twins.

    Trains a copy of ``weights`` for epochs ``start_epoch + 1 .. cfg.epochs``.
    ``steps`` optionally caps the total number of optimizer steps.
    """
    if not train_pairs:
        raise TrainingError("training set is empty")
    weights = weights.copy()
    history = LossHistory()
    if cfg.epochs <= start_epoch or steps == 0:
        return weights, history

    m = weights.config.size_multiple
    for p in train_pairs:
        h, w = p.distorted.shape[-2:]
        if h % m or w % m:
            raise TrainingError(f"pair {p.identifier} is {h}x{w}, not divisible by {m}")

    params = weights.parameters()
    state = optimizer_state if optimizer_state is not None else AdamState.zeros_like(params)
    loss_cfg = metrics.LossConfig(cfg.alpha)
    step = state.t
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = epoch_order(len(train_pairs), cfg.seed, epoch)
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[b : b + cfg.batch_size]]
            out, tape = model.forward(weights, _stack(batch, "distorted"), record_tape=True)
            loss, grad = metrics.composite_loss(out, _stack(batch, "clean"), loss_cfg)
            step += 1
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}); layer norms {_layer_norms(weights)}")
            grads = model.backward(weights, tape, grad)
            adam_step(params, grads, state, cfg)
            history.add(epoch, step, float(loss))
            if steps is not None and len(history.rows) >= steps:
                break
        val = validation_loss(weights, val_pairs, cfg)
        history.rows[-1]["val_loss"] = val
        log.info(
            "epoch %d step %d train %.5f val %s",
            epoch, step, np.mean([r["train_loss"] for r in history.rows if r["epoch"] == epoch]),
            "n/a" if val is None else f"{val:.5f}",
        )
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_training_state(Path(checkpoint_dir) / f"epoch_{epoch:04d}.udae", weights, state, epoch)
        if steps is not None and len(history.rows) >= steps:
            break
    return weights, history
