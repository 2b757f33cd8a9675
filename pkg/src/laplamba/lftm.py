"""Lossless one-level Laplacian split into a half-resolution low band and a residual.

The low band is a 5-tap binomial blur followed by 2x decimation. The high band
is whatever the expanded low band fails to explain, so the inverse is exact
by construction for any blur or any image size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, record

KERNEL_1D = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_R = 2  # kernel radius


@dataclass
class FreqPair:
    low: Tensor
    high: Tensor
    original_size: tuple


def _blur_axis(x: np.ndarray, axis: int, gain: float = 1.0) -> np.ndarray:
    # scipy's "mirror" mode reflects without repeating the edge sample
    k = KERNEL_1D * gain if gain != 1.0 else KERNEL_1D
    return correlate1d(x, k, axis=axis, mode="mirror")


def _blur_axis_adjoint(g: np.ndarray, axis: int, gain: float = 1.0) -> np.ndarray:
    n = g.shape[axis]
    k = KERNEL_1D * gain if gain != 1.0 else KERNEL_1D
    width = [(0, 0)] * g.ndim
    width[axis] = (_R, _R)
    # full correlation with the symmetric kernel, then fold the reflected taps back
    full = correlate1d(np.pad(g, width), k, axis=axis, mode="constant")
    return ops._fold_axis(full, n, _R, _R, axis)


def blur_np(x: np.ndarray, gain: float = 1.0) -> np.ndarray:
    return _blur_axis(_blur_axis(x, x.ndim - 2, gain), x.ndim - 1, gain)


def _blur_adjoint_np(g: np.ndarray, gain: float = 1.0) -> np.ndarray:
    return _blur_axis_adjoint(_blur_axis_adjoint(g, g.ndim - 1, gain), g.ndim - 2, gain)


def blur(x: Tensor) -> Tensor:
    """Separable binomial blur with reflect borders (rows sum to one)."""
    return record("blur", blur_np(x.data), (x,), lambda g: (_blur_adjoint_np(g),))


def _check_spatial(x: Tensor, what: str) -> None:
    if x.ndim < 2:
        raise DimensionError(f"{what} needs a tensor with two spatial axes, got {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"{what} needs H, W >= 2, got {h}x{w}")


@lru_cache(maxsize=256)
def _down_matrix(n: int) -> np.ndarray:
    """(ceil(n/2), n) operator: reflect-border blur along one axis, keep even samples."""
    idx = ops.reflect_index(n, _R, _R)
    m = np.zeros(((n + 1) // 2, n))
    for r in range(m.shape[0]):
        for a, k in enumerate(KERNEL_1D):
            m[r, idx[2 * r + a]] += k
    m.flags.writeable = False
    return m


@lru_cache(maxsize=256)
def _up_matrix(h: int, th: int) -> np.ndarray:
    """(th, h) operator: zero-insert to 2h, reflect-border blur with gain 2, crop to th."""
    idx = ops.reflect_index(2 * h, _R, _R)
    m = np.zeros((th, h))
    for t in range(th):
        for a, k in enumerate(KERNEL_1D):
            src = idx[t + a]
            if src % 2 == 0:
                m[t, src // 2] += 2.0 * k
    m.flags.writeable = False
    return m


def downsample2(x: Tensor) -> Tensor:
    """Blur then keep every second sample; output extent is ceil(n / 2)."""
    _check_spatial(x, "downsample2")
    mh, mw = _down_matrix(x.shape[-2]), _down_matrix(x.shape[-1])
    out = ops._separable(x.data, mh, mw)
    return record("downsample2", out, (x,), lambda g: (ops._separable(g, mh.T, mw.T),))


def upsample2(low: Tensor, size: tuple) -> Tensor:
    """Zero-insert to twice the size, blur with gain 2 per axis, crop to ``size``."""
    h, w = low.shape[-2:]
    th, tw = int(size[0]), int(size[1])
    if (th + 1) // 2 != h or (tw + 1) // 2 != w:
        raise DimensionError(
            f"upsample2: low band {h}x{w} is not the half-size of target {th}x{tw}"
        )
    mh, mw = _up_matrix(h, th), _up_matrix(w, tw)
    out = ops._separable(low.data, mh, mw)
    return record("upsample2", out, (low,), lambda g: (ops._separable(g, mh.T, mw.T),))


def decompose(x: Tensor) -> FreqPair:
    _check_spatial(x, "decompose")
    size = tuple(x.shape[-2:])
    low = downsample2(x)
    high = ops.sub(x, upsample2(low, size))
    return FreqPair(low, high, size)


def reconstruct(fp: FreqPair) -> Tensor:
    size = tuple(fp.original_size)
    if tuple(fp.high.shape[-2:]) != size:
        raise DimensionError(
            f"reconstruct: high band {fp.high.shape[-2:]} does not match size {size}"
        )
    if fp.low.shape[:-2] != fp.high.shape[:-2]:
        raise DimensionError(
            f"reconstruct: low {fp.low.shape} and high {fp.high.shape} disagree on N, C"
        )
    return ops.add(upsample2(fp.low, size), fp.high)


def lft_multi(x: Tensor, levels: int) -> tuple[list, Tensor]:
    """Recursive split of the low band; returns (high bands fine to coarse, final low)."""
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    h, w = x.shape[-2:]
    if min(h, w) < 2 ** levels:
        raise ConfigError(f"{levels} levels need spatial size >= {2 ** levels}, got {h}x{w}")
    highs = []
    cur = x
    for _ in range(levels):
        fp = decompose(cur)
        highs.append(fp.high)
        cur = fp.low
    return highs, cur


def reconstruct_multi(highs: list, low: Tensor) -> Tensor:
    cur = low
    for high in reversed(highs):
        cur = reconstruct(FreqPair(cur, high, tuple(high.shape[-2:])))
    return cur
