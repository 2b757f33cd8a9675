"""Training losses and image quality metrics.

Losses operate on tensors and are differentiable. Metrics take numpy arrays
whose last two axes are spatial (HW, CHW or NCHW) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import lftm, ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor

DEFAULT_LAMBDA = 0.1
DEFAULT_FREQ_LEVELS = 3
PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossReport:
    recon: Tensor
    freq: Tensor
    total: Tensor
    lam: float = DEFAULT_LAMBDA

    def values(self) -> dict:
        return {"recon": self.recon.item(), "freq": self.freq.item(), "total": self.total.item()}


def _pair(pred, gt, what: str) -> tuple:
    p, g = as_tensor(pred), as_tensor(gt)
    if p.shape != g.shape:
        raise DimensionError(f"{what}: prediction {p.shape} and target {g.shape} differ")
    return p, g


def l1_recon(pred, gt) -> Tensor:
    """Mean absolute error over every element."""
    p, g = _pair(pred, gt, "l1_recon")
    return ops.mean(ops.abs(ops.sub(p, g)))


def freq_loss(pred, gt, levels: int = DEFAULT_FREQ_LEVELS) -> Tensor:
    """L1 distance between the Laplacian bands of ``pred`` and ``gt``.

    Absolute band differences are summed over every band of a ``levels``-deep
    pyramid and divided by the total number of band elements.
    """
    p, g = _pair(pred, gt, "freq_loss")
    if levels < 1:
        raise ConfigError(f"freq_loss levels must be >= 1, got {levels}")
    # The transform is linear, so decomposing the difference equals differencing the bands.
    highs, low = lftm.lft_multi(ops.sub(p, g), levels)
    bands = highs + [low]
    total = None
    count = 0
    for band in bands:
        s = ops.sum(ops.abs(band))
        total = s if total is None else ops.add(total, s)
        count += band.size
    return ops.scale(total, 1.0 / count)


def total_loss(pred, gt, lam: float = DEFAULT_LAMBDA,
               levels: int = DEFAULT_FREQ_LEVELS) -> LossReport:
    recon = l1_recon(pred, gt)
    freq = freq_loss(pred, gt, levels)
    total = ops.add(recon, ops.scale(freq, lam))
    return LossReport(recon, freq, total, lam)


# ---------------------------------------------------------------- metrics
def _arrays(pred, gt, what: str) -> tuple:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"{what}: shapes {p.shape} and {g.shape} differ")
    if p.ndim < 2:
        raise DimensionError(f"{what} needs at least two spatial axes, got {p.shape}")
    return np.clip(p, 0.0, 1.0), np.clip(g, 0.0, 1.0)


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB with peak 1; identical inputs give ``PSNR_CAP``."""
    p, g = _arrays(pred, gt, "psnr")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # Correlate along both spatial axes keeping only windows fully inside the image.
    r = (k.size - 1) // 2
    y = correlate1d(x, k, axis=-2, mode="constant")[..., r:x.shape[-2] - r, :]
    return correlate1d(y, k, axis=-1, mode="constant")[..., r:x.shape[-1] - r]


def ssim_map(pred, gt) -> np.ndarray:
    p, g = _arrays(pred, gt, "ssim")
    h, w = p.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    k = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_p = _filter_valid(p, k)
    mu_g = _filter_valid(g, k)
    var_p = _filter_valid(p * p, k) - mu_p ** 2
    var_g = _filter_valid(g * g, k) - mu_g ** 2
    cov = _filter_valid(p * g, k) - mu_p * mu_g
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return num / den


def ssim(pred, gt) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    m = ssim_map(pred, gt)
    per_plane = m.reshape((-1,) + m.shape[-2:]).mean(axis=(1, 2))
    return float(per_plane.mean())
