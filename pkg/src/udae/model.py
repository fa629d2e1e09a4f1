"""U-Net denoising autoencoder built from the ``engine`` primitives."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .engine import ConvLayer, ShapeError

MAGIC = b"UDAE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH4I")
_TRAILER = struct.Struct("<I")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        for name in ("depth", "base_channels", "in_channels", "out_channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

    def stage_channels(self, stage: int) -> int:
        """Feature maps of encoder stage ``stage`` (1-indexed); ``depth + 1`` is the bottleneck."""
        return self.base_channels * 2 ** (stage - 1)

    @property
    def size_multiple(self) -> int:
        return 2**self.depth


def layer_plan(config: UNetConfig) -> list[tuple[str, int, int]]:
    """Ordered ``(kind, in_ch, out_ch)`` steps; kind is conv, pool, upconv or conv1x1.

    Pool steps carry no parameters; every other step owns one ``ConvLayer``.
    """
    plan: list[tuple[str, int, int]] = []
    prev = config.in_channels
    for s in range(1, config.depth + 1):
        c = config.stage_channels(s)
        plan += [("conv", prev, c), ("conv", c, c), ("pool", c, c)]
        prev = c
    c = config.stage_channels(config.depth + 1)
    plan += [("conv", prev, c), ("conv", c, c)]
    prev = c
    for s in range(config.depth, 0, -1):
        c = config.stage_channels(s)
        plan += [("upconv", prev, c), ("conv", 2 * c, c), ("conv", c, c), ("conv", c, c)]
        prev = c
    plan.append(("conv1x1", prev, config.out_channels))
    return plan


def parameter_count(config: UNetConfig) -> int:
    """Closed-form number of learnable scalars for ``config``."""
    b, d = config.base_channels, config.depth
    cin, cout = config.in_channels, config.out_channels
    total = 0
    prev = cin
    for s in range(1, d + 2):
        c = b * 2 ** (s - 1)
        total += 9 * (prev * c + c * c) + 2 * c
        prev = c
    for s in range(1, d + 1):
        c = b * 2 ** (s - 1)
        # upconv 2c -> c, then 2c -> c and two c -> c convs
        total += 4 * 2 * c * c + c
        total += 9 * (2 * c * c + 2 * c * c) + 3 * c
    total += b * cout + cout
    return total


@dataclass
class ModelWeights:
    config: UNetConfig
    layers: list[ConvLayer]
    version: int = FORMAT_VERSION

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, [l.astype(dtype) for l in self.layers], self.version)

    def copy(self) -> "ModelWeights":
        return self.astype(self.layers[0].weights.dtype)


def build_model(config: UNetConfig, seed: int = 0) -> ModelWeights:
    """He-normal weights and zero biases, drawn in build order from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for kind, cin, cout in layer_plan(config):
        if kind == "pool":
            continue
        if kind == "conv":
            k, fan_in, stride, pad = 3, cin * 9, 1, 1
        elif kind == "upconv":
            # each output pixel receives exactly one tap per input channel
            k, fan_in, stride, pad = 2, cin, 2, 0
        else:
            k, fan_in, stride, pad = 1, cin, 1, 0
        w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(w.astype(np.float32), np.zeros(cout, np.float32), stride, pad))
    return ModelWeights(config, layers)


# -- forward / backward ----------------------------------------------------------


@dataclass
class Tape:
    """Executed ops in order. Each entry reads and writes integer value slots."""

    entries: list[tuple] = field(default_factory=list)
    input_slot: int = 0
    output_slot: int = -1


class _Runner:
    def __init__(self, record: bool):
        self.record = record
        self.tape = Tape()
        self._next = 1

    def _slot(self) -> int:
        s = self._next
        self._next += 1
        return s

    def push(self, op, inputs, value, **ctx):
        slot = self._slot()
        if self.record:
            self.tape.entries.append((op, inputs, slot, ctx))
        return slot, value


def forward(weights: ModelWeights, x: np.ndarray, record_tape: bool = False):
    """Restore ``x`` (N, 3, H, W). Returns the output, plus the tape if requested."""
    cfg = weights.config
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    m = cfg.size_multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(f"spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by {m} for depth {cfg.depth}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)

    run = _Runner(record_tape)
    layers = iter(enumerate(weights.layers))

    def conv(slot, v, act=True):
        i, layer = next(layers)
        slot, v2 = run.push("conv", (slot,), engine.conv2d_forward(v, layer), layer=i, x=v)
        if act:
            slot, v2 = run.push("relu", (slot,), engine.relu(v2), x=v2)
        return slot, v2

    slot, v = 0, x
    skips = []
    for _ in range(cfg.depth):
        slot, v = conv(slot, v)
        slot, v = conv(slot, v)
        skips.append((slot, v))
        pooled, idx = engine.maxpool2x2_forward(v)
        slot, v = run.push("pool", (slot,), pooled, argmax=idx)
    slot, v = conv(slot, v)
    slot, v = conv(slot, v)
    for skip_slot, skip in reversed(skips):
        i, layer = next(layers)
        slot, v = run.push("upconv", (slot,), engine.upconv2x2_forward(v, layer), layer=i, x=v)
        slot, v = run.push("concat", (skip_slot, slot), engine.concat_channels(skip, v), split=skip.shape[1])
        for _ in range(3):
            slot, v = conv(slot, v)
    slot, v = conv(slot, v, act=False)
    out = engine.sigmoid(v)
    slot, out = run.push("sigmoid", (slot,), out, out=out)
    run.tape.output_slot = slot
    return (out, run.tape) if record_tape else out


def backward(weights: ModelWeights, tape: Tape | None, grad_output: np.ndarray, return_input_grad: bool = False):
    """Gradients for every parameter, ordered like ``weights.parameters()``."""
    if tape is None or not tape.entries:
        raise ValueError("backward needs a tape recorded by forward(..., record_tape=True)")
    grads: dict[int, np.ndarray] = {tape.output_slot: np.asarray(grad_output)}
    pgrads: list[np.ndarray | None] = [None] * (2 * len(weights.layers))

    def acc(slot, g):
        if slot in grads:
            grads[slot] = grads[slot] + g
        else:
            grads[slot] = g

    for op, inputs, out_slot, ctx in reversed(tape.entries):
        g = grads.pop(out_slot, None)
        if g is None:
            continue
        if op == "sigmoid":
            acc(inputs[0], engine.sigmoid_backward(ctx["out"], g))
        elif op == "relu":
            acc(inputs[0], engine.relu_backward(ctx["x"], g))
        elif op == "conv":
            i = ctx["layer"]
            gx, gw, gb = engine.conv2d_backward(ctx["x"], weights.layers[i], g)
            pgrads[2 * i], pgrads[2 * i + 1] = gw, gb
            acc(inputs[0], gx)
        elif op == "upconv":
            i = ctx["layer"]
            gx, gw, gb = engine.upconv2x2_backward(ctx["x"], weights.layers[i], g)
            pgrads[2 * i], pgrads[2 * i + 1] = gw, gb
            acc(inputs[0], gx)
        elif op == "pool":
            acc(inputs[0], engine.maxpool2x2_backward(ctx["argmax"], g))
        elif op == "concat":
            ga, gb_ = engine.concat_channels_backward(ctx["split"], g)
            acc(inputs[0], ga)
            acc(inputs[1], gb_)
        else:
            raise ValueError(f"unknown tape op {op!r}")

    params = weights.parameters()
    out = [np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False) for p, g in zip(params, pgrads)]
    if return_input_grad:
        return out, grads.get(tape.input_slot)
    return out


def kink_signature(tape: Tape) -> bytes:
    """ReLU on/off masks and pool argmaxes recorded on ``tape``, packed to bytes."""
    parts = []
    for op, _, _, ctx in tape.entries:
        if op == "relu":
            parts.append(np.packbits(ctx["x"] > 0).tobytes())
        elif op == "pool":
            parts.append(ctx["argmax"].tobytes())
    return b"".join(parts)


# -- checkpoints -----------------------------------------------------------------


def checkpoint_size(config: UNetConfig) -> int:
    return _HEADER.size + 4 * parameter_count(config) + _TRAILER.size


def to_bytes(weights: ModelWeights) -> bytes:
    cfg = weights.config
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, cfg.depth, cfg.base_channels, cfg.in_channels, cfg.out_channels)]
    for p in weights.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _TRAILER.pack(zlib.crc32(body))


def from_bytes(blob: bytes) -> ModelWeights:
    if len(blob) < _HEADER.size + _TRAILER.size:
        raise CheckpointError(f"truncated checkpoint ({len(blob)} bytes)")
    magic, version, depth, base, cin, cout = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}, not a UDAE checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        cfg = UNetConfig(depth, base, cin, cout)
    except ConfigError as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    if len(blob) != checkpoint_size(cfg):
        raise CheckpointError(f"checkpoint is {len(blob)} bytes, expected {checkpoint_size(cfg)} for {cfg}")
    body, (crc,) = blob[: -_TRAILER.size], _TRAILER.unpack_from(blob, len(blob) - _TRAILER.size)
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch, checkpoint is corrupted")

    template = build_model(cfg, seed=0)
    offset = _HEADER.size
    layers = []
    for layer in template.layers:
        arrays = []
        for p in (layer.weights, layer.bias):
            n = p.size
            arrays.append(np.frombuffer(blob, "<f4", n, offset).astype(np.float32).reshape(p.shape))
            offset += 4 * n
        layers.append(ConvLayer(arrays[0], arrays[1], layer.stride, layer.padding))
    return ModelWeights(cfg, layers, version)


def save_weights(weights: ModelWeights, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(weights))


def load_weights(path) -> ModelWeights:
    return from_bytes(Path(path).read_bytes())
