"""Layer primitives with hand-written forward/backward passes.

Tensors are plain rank-4 numpy arrays laid out as (batch, channels, height,
width). Storage is float32 during training and inference; every primitive
preserves the dtype of its input, so the gradient checker can run the same
code paths in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Coerce ``x`` into a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    if len(shape) != 4 or any(int(s) < 0 for s in shape):
        raise ShapeError(f"invalid tensor shape {tuple(shape)}")
    return np.zeros(tuple(int(s) for s in shape), dtype=dtype)


@dataclass
class ConvLayer:
    """Learnable filter bank.

    ``weights`` is (out_channels, in_channels, kH, kW) for both ordinary and
    transposed convolutions.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.stride, self.padding)


# -- convolution ---------------------------------------------------------------


def _conv_out_dims(h: int, w: int, layer: ConvLayer) -> tuple[int, int]:
    kh, kw = layer.kernel_size
    p, s = layer.padding, layer.stride
    num_h, num_w = h + 2 * p - kh, w + 2 * p - kw
    if num_h < 0 or num_w < 0:
        raise ShapeError(
            f"non-positive output dimension: input {h}x{w}, kernel {kh}x{kw}, padding {p}"
        )
    return num_h // s + 1, num_w // s + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold into a (C*kh*kw, N*Ho*Wo) matrix, copied along the contiguous axis."""
    n, c = x.shape[:2]
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _gemm_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    n = x.shape[0]
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))
        return out.transpose(1, 0, 2, 3)
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    return out.transpose(1, 0, 2, 3)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Cross-correlation of ``x`` with ``layer.weights`` plus bias."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv2d input shape {x.shape} incompatible with weights {layer.weights.shape}"
        )
    _conv_out_dims(x.shape[2], x.shape[3], layer)
    w = layer.weights.astype(x.dtype, copy=False)
    out = _gemm_conv(x, w, layer.stride, layer.padding)
    out = out + layer.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for ``conv2d_forward``."""
    n, c, h, w_in = x.shape
    kh, kw = layer.kernel_size
    ho, wo = _conv_out_dims(h, w_in, layer)
    o = layer.out_channels
    expected = (n, o, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    w = layer.weights.astype(x.dtype, copy=False)
    g = grad_out.astype(x.dtype, copy=False)
    grad_b = g.sum(axis=(0, 2, 3))
    p, s = layer.padding, layer.stride

    g_mat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    if kh == 1 and kw == 1 and s == 1 and p == 0:
        grad_w = (g_mat @ x.transpose(1, 0, 2, 3).reshape(c, -1).T).reshape(o, c, 1, 1)
    else:
        cols, _, _ = _im2col(x, kh, kw, s, p)
        grad_w = (g_mat @ cols.T).reshape(o, c, kh, kw)

    if s == 1 and p <= kh - 1 and p <= kw - 1 and kh == kw:
        # stride 1: input gradient is a full correlation with the flipped, transposed kernel
        w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = _gemm_conv(g, w_t, 1, kh - 1 - p)
    else:
        dcols = (w.reshape(o, -1).T @ g_mat).reshape(c, kh, kw, n, ho, wo)
        grad_xp = np.zeros((n, c, h + 2 * p, w_in + 2 * p), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j].transpose(1, 0, 2, 3)
        grad_x = grad_xp[:, :, p : p + h, p : p + w_in]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def upconv2x2_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Transposed convolution with a 2x2 kernel and stride 2 (non-overlapping)."""
    if layer.kernel_size != (2, 2) or layer.stride != 2:
        raise ShapeError(f"up-convolution needs a 2x2 kernel with stride 2, got {layer.weights.shape}")
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"upconv input shape {x.shape} incompatible with weights {layer.weights.shape}"
        )
    n, _, h, w_in = x.shape
    w = layer.weights.astype(x.dtype, copy=False)
    out = np.tensordot(x, w, axes=([1], [1]))  # (N, H, W, O, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, layer.out_channels, 2 * h, 2 * w_in)
    out = out + layer.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def upconv2x2_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    n, _, h, w_in = x.shape
    expected = (n, layer.out_channels, 2 * h, 2 * w_in)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    w = layer.weights.astype(x.dtype, copy=False)
    g = grad_out.astype(x.dtype, copy=False).reshape(n, layer.out_channels, h, 2, w_in, 2)
    grad_b = g.sum(axis=(0, 2, 3, 4, 5))
    # g[n, o, i, a, j, b]; x[n, c, i, j]; w[o, c, a, b]
    grad_w = np.tensordot(g, x, axes=([0, 2, 4], [0, 2, 3]))  # (O, a, b, C)
    grad_w = grad_w.transpose(0, 3, 1, 2)
    grad_x = np.tensordot(g, w, axes=([1, 3, 5], [0, 2, 3]))  # (N, H, W, C)
    return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), np.ascontiguousarray(grad_w), grad_b


# -- pooling -------------------------------------------------------------------


def maxpool2x2_forward(x: np.ndarray):
    """2x2 max-pool with stride 2.

    Returns the pooled tensor and the argmax of each window as a local index
    in 0..3 (row-major within the window). Ties resolve to the first index.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != grad_out shape {grad_out.shape}")
    if argmax.size and int(argmax.max()) > 3:
        raise IndexError(f"argmax index {int(argmax.max())} out of range for a 2x2 window")
    n, c, ho, wo = grad_out.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    grad = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(grad)


# -- channel concat --------------------------------------------------------------


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(a_channels: int, grad_out: np.ndarray):
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


# -- activations ---------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through ``sigmoid`` given its forward *output*."""
    return grad_out * out * (1 - out)


# -- finite-difference checker -------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-case ``|a - n| / max(|a| + |n|, floor)`` over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int


def check_gradients(
    forward_fn: Callable[[], tuple],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    ``forward_fn()`` returns ``(loss, grads)`` or ``(loss, grads, signature)``
    where ``grads[i]`` is the analytic gradient for ``params[i]``. ``params``
    are perturbed in place, so pass contiguous float64 arrays.

    ``signature`` is any bytes-like summary of the piecewise branch taken
    (ReLU masks, pool argmaxes, L1 signs). A probe whose +h or -h evaluation
    lands on a different branch straddles a tie point and is skipped.
    ``max_entries`` caps probed entries per parameter, sampled with ``rng``.
    """
    first = forward_fn()
    loss, grads = first[0], first[1]
    base_sig = first[2] if len(first) > 2 else None
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at the evaluation point")
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("parameters must be contiguous so they can be perturbed in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g_flat = np.asarray(g, dtype=np.float64).reshape(-1)
        analytic, numeric = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            plus = forward_fn()
            flat[i] = orig - h
            minus = forward_fn()
            flat[i] = orig
            fp, fm = np.float64(plus[0]), np.float64(minus[0])
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing element {i}")
            if base_sig is not None and (plus[2] != base_sig or minus[2] != base_sig):
                skipped += 1
                continue
            analytic.append(g_flat[i])
            numeric.append((fp - fm) / (2 * h))
        checked += len(analytic)
        if analytic:
            worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    return GradCheckResult(worst, checked, skipped)


def gradient_check(forward_fn, params, h: float = 1e-3, **kwargs) -> float:
    """Worst relative error of ``check_gradients``."""
    return check_gradients(forward_fn, params, h, **kwargs).max_relative_error
