"""Masked L1, SSIM and the tracking / mapping objectives, each with its gradient."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Frame, InvalidInputError
from .gradients import Upstream
from .renderer import RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class TrackingWeights:
    alpha: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvalidInputError("tracking weights must be non-negative with a positive sum")


@dataclass(frozen=True)
class MappingWeights:
    rho: float = 0.8
    tau: float = 0.2
    sigma: float = 1.0

    def __post_init__(self):
        if min(self.rho, self.tau, self.sigma) < 0:
            raise InvalidInputError("mapping weights must be non-negative")


def masked_l1(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None):
    """Mean |a - b| over masked pixels (all channels), and its gradient w.r.t. ``b``.

    ``mask`` is H x W and broadcasts over trailing channels. An empty mask
    gives 0 with a zero gradient. A float mask is a per-pixel weight and the
    result is the weighted mean; the weights are treated as constants.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    if mask.shape != a.shape[:2]:
        raise InvalidInputError("mask shape does not match image")
    m = mask.reshape(mask.shape + (1,) * (a.ndim - 2))
    if mask.dtype != bool:
        total = float(mask.sum()) * (a.size // mask.size)
        if total <= 0:
            return 0.0, np.zeros_like(b)
        diff = b - a
        return float((m * np.abs(diff)).sum() / total), m * np.sign(diff) / total
    count = int(mask.sum()) * (a.size // mask.size)
    if count == 0:
        return 0.0, np.zeros_like(b)
    diff = np.where(m, b - a, 0.0)
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


@lru_cache(maxsize=4)
def gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    g.flags.writeable = False
    return g


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    rows = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def _filter_full(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'full' convolution (the adjoint of :func:`_filter_valid`)."""
    k = len(g)
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _filter_valid(np.pad(x, pad), g[::-1].copy())


def _ssim_map_and_grad(a: np.ndarray, b: np.ndarray):
    g = gaussian_kernel_1d()
    k = len(g)
    if a.shape[0] < k or a.shape[1] < k:
        raise InvalidInputError(f"image {a.shape} smaller than the {k}x{k} SSIM window")
    mu_a, mu_b, e_aa, e_bb, e_ab = _filter_valid(np.stack([a, b, a * a, b * b, a * b]), g)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * cov + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    smap = num1 * num2 / (den1 * den2)
    n = smap.size
    # partials of mean(smap) w.r.t. the filtered statistics of b
    d_num1 = num2 / (den1 * den2)
    d_num2 = num1 / (den1 * den2)
    d_den1 = -smap / den1
    d_den2 = -smap / den2
    d_mu_b = d_num1 * 2 * mu_a + d_num2 * (-2 * mu_a) + d_den1 * 2 * mu_b + d_den2 * (-2 * mu_b)
    d_e_bb = d_den2
    d_e_ab = d_num2 * 2
    s_mu, s_bb, s_ab = _filter_full(np.stack([d_mu_b, d_e_bb, d_e_ab]) / n, g)
    grad = s_mu + 2 * b * s_bb + a * s_ab
    return smap, grad


def ssim(a: np.ndarray, b: np.ndarray, per_channel: bool = False):
    """SSIM of ``b`` against ``a`` and its gradient w.r.t. ``b``.

    Color images are reduced to their channel mean unless ``per_channel``
    is set, in which case the per-channel SSIM values are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        smap, grad = _ssim_map_and_grad(a, b)
        return float(smap.mean()), grad
    if not per_channel:
        smap, grad = _ssim_map_and_grad(a.mean(axis=2), b.mean(axis=2))
        return float(smap.mean()), np.repeat(grad[..., None] / a.shape[2], a.shape[2], axis=2)
    vals, grads = [], []
    for c in range(a.shape[2]):
        smap, grad = _ssim_map_and_grad(a[..., c], b[..., c])
        vals.append(smap.mean())
        grads.append(grad / a.shape[2])
    return float(np.mean(vals)), np.stack(grads, axis=2)


def tracking_loss(frame: Frame, render: RenderOutput, mask: np.ndarray, w: TrackingWeights):
    """``alpha * L1(color) + beta * L1(depth)``, both restricted to ``mask``."""
    lc, gc = masked_l1(frame.rgb, render.color, mask)
    ld, gd = masked_l1(frame.depth, render.depth, mask)
    up = Upstream(w.alpha * gc, w.beta * gd, np.zeros(mask.shape))
    return w.alpha * lc + w.beta * ld, up


def mapping_loss(frame: Frame, render: RenderOutput, w: MappingWeights, mask: np.ndarray | None = None,
                 per_channel_ssim: bool = False):
    """``rho * L1(color) + tau * (1 - SSIM) + sigma * L1(depth on valid pixels)``.

    Color terms cover the whole image; only the depth term is masked,
    by default to the frame's valid-depth pixels.
    """
    if mask is None:
        mask = frame.valid_mask
    lc, gc = masked_l1(frame.rgb, render.color)
    total = w.rho * lc
    g_color = w.rho * gc
    if w.tau:
        s, gs = ssim(frame.rgb, render.color, per_channel=per_channel_ssim)
        total += w.tau * (1.0 - s)
        g_color = g_color - w.tau * gs
    ld, gd = masked_l1(frame.depth, render.depth, mask)
    total += w.sigma * ld
    return total, Upstream(g_color, w.sigma * gd, np.zeros(mask.shape))
