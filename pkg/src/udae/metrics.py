"""Image similarity metrics and the MS-SSIM + L1 training loss.

Everything is computed in float64 on (N, C, H, W) arrays. SSIM statistics
come from an 11x11 Gaussian window over valid positions only; colour images
are scored per channel and averaged. Functions named ``*_with_grad`` also
return the gradient with respect to their *first* argument.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ShapeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# below this a per-scale term is clamped; avoids fractional powers of negatives
_TERM_FLOOR = 1e-6


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    scales: int = 5
    scale_weights: tuple[float, ...] = MS_SSIM_WEIGHTS

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def window(self) -> np.ndarray:
        return gaussian_window(self.window_size, self.sigma)

    def normalized_weights(self, scales: int | None = None) -> np.ndarray:
        w = np.asarray(self.scale_weights[: scales or self.scales], dtype=np.float64)
        return w / w.sum()


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.80

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class MsSsimResult:
    value: float
    scales: int
    weights: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"expected rank-4 (N, C, H, W) images, got {a.shape}")
    return a, b


# -- simple pixel losses -----------------------------------------------------------


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def l1_loss(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def l1_loss_with_grad(a, b):
    a, b = _check_pair(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


# -- windowed statistics ---------------------------------------------------------------


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation over the last two axes."""
    t = sliding_window_view(x, g.size, axis=-1) @ g
    return sliding_window_view(t, g.size, axis=-2) @ g


def _filter_adjoint(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    # full correlation; valid for symmetric taps only
    k = g.size - 1
    return _filter(np.pad(m, ((0, 0), (0, 0), (k, k), (k, k))), g)


class _ScaleStats:
    """SSIM maps for one pyramid level plus what backward needs."""

    def __init__(self, x: np.ndarray, y: np.ndarray, params: SsimParams):
        g = params.window()
        if min(x.shape[-2:]) < g.size:
            raise ShapeError(f"image {x.shape[-2]}x{x.shape[-1]} is smaller than the {g.size}x{g.size} window")
        self.x, self.y, self.g = x, y, g
        c1, c2 = params.c1, params.c2
        mx, my = _filter(x, g), _filter(y, g)
        sxx = _filter(x * x, g) - mx * mx
        syy = _filter(y * y, g) - my * my
        sxy = _filter(x * y, g) - mx * my
        self.mx, self.my = mx, my
        self.a1 = 2 * mx * my + c1
        self.b1 = mx * mx + my * my + c1
        self.a2 = 2 * sxy + c2
        self.b2 = sxx + syy + c2
        self.lum = self.a1 / self.b1
        self.cs_map = self.a2 / self.b2
        self.n_windows = mx.shape[-1] * mx.shape[-2]

    def ssim_nc(self) -> np.ndarray:
        return np.mean(self.lum * self.cs_map, axis=(-2, -1))

    def cs_nc(self) -> np.ndarray:
        return np.mean(self.cs_map, axis=(-2, -1))

    def grad_x(self, coef_ssim: np.ndarray | None, coef_cs: np.ndarray | None) -> np.ndarray:
        """d/dx of sum(coef_ssim * ssim_nc + coef_cs * cs_nc)."""
        mx, my, b1, a2, b2 = self.mx, self.my, self.b1, self.a2, self.b2
        dl_dmx = 2 * my / b1 - self.a1 * 2 * mx / (b1 * b1)
        dcs_dmx = -2 * my / b2 + a2 * 2 * mx / (b2 * b2)
        dcs_dexx = -a2 / (b2 * b2)
        dcs_dexy = 2 / b2

        d_mx = np.zeros_like(mx)
        d_exx = np.zeros_like(mx)
        d_exy = np.zeros_like(mx)
        if coef_ssim is not None:
            c = coef_ssim[..., None, None] / self.n_windows
            d_mx += c * (self.cs_map * dl_dmx + self.lum * dcs_dmx)
            d_exx += c * self.lum * dcs_dexx
            d_exy += c * self.lum * dcs_dexy
        if coef_cs is not None:
            c = coef_cs[..., None, None] / self.n_windows
            d_mx += c * dcs_dmx
            d_exx += c * dcs_dexx
            d_exy += c * dcs_dexy
        g = self.g
        return _filter_adjoint(d_mx, g) + 2 * self.x * _filter_adjoint(d_exx, g) + self.y * _filter_adjoint(d_exy, g)


def ssim(a, b, params: SsimParams | None = None) -> float:
    a, b = _check_pair(a, b)
    stats = _ScaleStats(a.astype(np.float64), b.astype(np.float64), params or SsimParams())
    return float(np.mean(stats.ssim_nc()))


def ssim_with_grad(a, b, params: SsimParams | None = None):
    a, b = _check_pair(a, b)
    stats = _ScaleStats(a.astype(np.float64), b.astype(np.float64), params or SsimParams())
    vals = stats.ssim_nc()
    coef = np.full(vals.shape, 1.0 / vals.size)
    return float(np.mean(vals)), stats.grad_x(coef, None)


# -- multi-scale ------------------------------------------------------------------------


def usable_scales(height: int, width: int, params: SsimParams | None = None) -> int:
    """Largest scale count <= params.scales whose coarsest level still fits the window."""
    params = params or SsimParams()
    m = min(height, width)
    for s in range(params.scales, 0, -1):
        if m >= params.window_size * 2 ** (s - 1):
            return s
    raise ShapeError(f"image {height}x{width} is too small for a single {params.window_size}x{params.window_size} SSIM scale")


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _avgpool2_adjoint(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=g.dtype)
    h, w = 2 * g.shape[-2], 2 * g.shape[-1]
    q = 0.25 * g
    for i in (0, 1):
        for j in (0, 1):
            out[..., i:h:2, j:w:2] = q
    return out


def _ms_ssim(a, b, params: SsimParams, need_grad: bool) -> MsSsimResult:
    a, b = _check_pair(a, b)
    scales = usable_scales(a.shape[2], a.shape[3], params)
    weights = params.normalized_weights(scales)

    xs = [a.astype(np.float64)]
    ys = [b.astype(np.float64)]
    for _ in range(scales - 1):
        xs.append(_avgpool2(xs[-1]))
        ys.append(_avgpool2(ys[-1]))

    stats = [_ScaleStats(x, y, params) for x, y in zip(xs, ys)]
    raw = [s.cs_nc() for s in stats[:-1]] + [stats[-1].ssim_nc()]
    terms = [np.maximum(t, _TERM_FLOOR) for t in raw]
    prod = np.ones_like(terms[0])
    for t, w in zip(terms, weights):
        prod = prod * t**w
    value = float(np.mean(prod))
    if not need_grad:
        return MsSsimResult(value, scales, weights)

    grad = None
    for j in range(scales - 1, -1, -1):
        # d mean(prod) / d term_j, zero where the floor clamped
        d_term = np.where(raw[j] > _TERM_FLOOR, weights[j] * prod / terms[j], 0.0) / prod.size
        if j == scales - 1:
            g_j = stats[j].grad_x(d_term, None)
        else:
            g_j = stats[j].grad_x(None, d_term)
        if grad is not None:
            g_j = g_j + _avgpool2_adjoint(grad, xs[j].shape)
        grad = g_j
    return MsSsimResult(value, scales, weights, grad)


def ms_ssim(a, b, params: SsimParams | None = None) -> float:
    return _ms_ssim(a, b, params or SsimParams(), need_grad=False).value


def ms_ssim_details(a, b, params: SsimParams | None = None) -> MsSsimResult:
    """Value plus the scale count and renormalized weights actually used."""
    return _ms_ssim(a, b, params or SsimParams(), need_grad=False)


def ms_ssim_with_grad(a, b, params: SsimParams | None = None) -> MsSsimResult:
    return _ms_ssim(a, b, params or SsimParams(), need_grad=True)


# -- training loss ---------------------------------------------------------------------


def composite_loss(output, target, cfg: LossConfig | None = None, params: SsimParams | None = None):
    """``alpha * (1 - MS-SSIM) + (1 - alpha) * L1``, zero for identical images.

    Returns ``(loss, grad)`` with ``grad`` shaped and typed like ``output``.
    """
    cfg = cfg or LossConfig()
    output, target = _check_pair(output, target)
    l1, g_l1 = l1_loss_with_grad(output, target)
    if cfg.alpha == 0.0:
        return l1, g_l1.astype(output.dtype)
    ms = ms_ssim_with_grad(output, target, params)
    loss = cfg.alpha * (1.0 - ms.value) + (1.0 - cfg.alpha) * l1
    grad = -cfg.alpha * ms.grad + (1.0 - cfg.alpha) * g_l1
    return loss, grad.astype(output.dtype)


def ms_ssim_l1(a, b, cfg: LossConfig | None = None) -> float:
    """Evaluation form of the composite loss (no gradient)."""
    cfg = cfg or LossConfig()
    l1 = l1_loss(a, b)
    if cfg.alpha == 0.0:
        return l1
    return cfg.alpha * (1.0 - ms_ssim(a, b)) + (1.0 - cfg.alpha) * l1
