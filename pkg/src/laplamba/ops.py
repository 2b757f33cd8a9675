"""Differentiable operations on :class:`~laplamba.tensor.Tensor`.

Elementwise binary operations require identical shapes. The only implicit
broadcast is against a Python number or a 0-d tensor; anything else must go
through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import builtins
import numbers
from collections import Counter
from contextlib import contextmanager
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import kernels
from .errors import ConfigError, DimensionError
from .tensor import Tensor, record

__all__ = [
    "add", "sub", "mul", "scale", "relu", "silu", "sigmoid", "softplus", "exp",
    "count_macs", "abs", "square", "clamp", "concat", "split", "reshape", "transpose",
    "getitem", "broadcast_to", "sum", "mean", "pad2d", "conv2d", "linear",
    "matmul", "layer_norm", "avg_pool2d", "upsample_nearest",
    "upsample_bilinear2x",
]

_MAC_COUNTER: list = []


@contextmanager
def count_macs():
    """Tally executed multiply-accumulates by category (conv, linear, scan)."""
    tally: Counter = Counter()
    _MAC_COUNTER.append(tally)
    try:
        yield tally
    finally:
        _MAC_COUNTER.remove(tally)


def _count_macs(category: str, n: int) -> None:
    for tally in _MAC_COUNTER:
        tally[category] += n


def _is_number(x) -> bool:
    return isinstance(x, numbers.Number) and not isinstance(x, bool)


def _is_scalar_tensor(x) -> bool:
    return isinstance(x, Tensor) and x.ndim == 0


def _shape_error(op: str, a, b) -> DimensionError:
    return DimensionError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


# ---------------------------------------------------------------- binary ops
def add(a, b) -> Tensor:
    if _is_number(a):
        a, b = b, a
    if _is_number(b):
        c = float(b)
        return record("add_const", a.data + c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if _is_scalar_tensor(b) or _is_scalar_tensor(a):
        s, t = (b, a) if _is_scalar_tensor(b) else (a, b)
        out = t.data + s.data

        def grad_fn(g):
            gs = np.asarray(g.sum(), dtype=g.dtype).reshape(())
            return (g, gs) if s is b else (gs, g)

        return record("add_scalar", out, (a, b) if s is b else (a, b), grad_fn)
    raise _shape_error("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    if _is_number(a):
        c = float(a)
        return record("rsub_const", c - b.data, (b,), lambda g: (-g,))
    if _is_number(b):
        c = float(b)
        return record("sub_const", a.data - c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    if _is_scalar_tensor(a) or _is_scalar_tensor(b):
        return add(a, scale(b, -1.0))
    raise _shape_error("sub", a.shape, b.shape)


def mul(a, b) -> Tensor:
    if _is_number(a):
        a, b = b, a
    if _is_number(b):
        return scale(a, float(b))
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _is_scalar_tensor(a) or _is_scalar_tensor(b):
        ad, bd = a.data, b.data

        def grad_fn(g):
            ga = g * bd
            gb = g * ad
            if a.ndim == 0:
                ga = np.asarray(ga.sum(), dtype=g.dtype).reshape(())
            if b.ndim == 0:
                gb = np.asarray(gb.sum(), dtype=g.dtype).reshape(())
            return ga, gb

        return record("mul_scalar", ad * bd, (a, b), grad_fn)
    raise _shape_error("mul", a.shape, b.shape)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------- unary ops
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _softplus_np(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    xd = x.data
    return record("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = _softplus_np(xd)
    return record("softplus", out, (x,), lambda g: (g * _sigmoid_np(xd),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- shape ops
def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise _shape_error("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(g[(slice(None),) * ax + (slice(bounds[i], bounds[i + 1]),)])
            for i in range(len(tensors))
        )

    return record("concat", out, tuple(tensors), grad_fn)


def split(x: Tensor, sections, axis: int = 1) -> list:
    """Split into ``sections`` equal parts (int) or parts of the given sizes."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise ConfigError(f"cannot split extent {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != n:
            raise DimensionError(f"split sizes {sizes} do not sum to {n}")
    parts = []
    start = 0
    for size in sizes:
        index = (slice(None),) * ax + (slice(start, start + size),)
        parts.append(getitem(x, index))
        start += size
    return parts


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record("getitem", out, (x,), grad_fn)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise DimensionError(
            f"broadcast_to needs equal rank, got {x.shape} -> {shape}; reshape first"
        )
    axes = []
    for i, (s, t) in enumerate(zip(x.shape, shape)):
        if s != t:
            if s != 1:
                raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
            axes.append(i)
    axes = tuple(axes)
    out = np.broadcast_to(x.data, shape)
    return record(
        "broadcast_to", np.array(out), (x,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- padding
def reflect_index(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for reflect padding (edge sample not repeated)."""
    pos = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * (n - 1)
    pos = np.mod(pos, period)
    return np.where(pos >= n, period - pos, pos)


def _fold_axis(g: np.ndarray, n: int, before: int, after: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding along one axis."""
    g = np.moveaxis(g, axis, -1)
    idx = reflect_index(n, before, after)
    out = np.array(g[..., before:before + n], copy=True)
    for k in list(range(before)) + list(range(before + n, before + n + after)):
        out[..., idx[k]] += g[..., k]
    return np.moveaxis(out, -1, axis)


def _norm_pads(padding) -> tuple:
    if isinstance(padding, int):
        return (padding,) * 4
    p = tuple(int(v) for v in padding)
    if len(p) == 2:
        return (p[0], p[0], p[1], p[1])
    if len(p) != 4:
        raise ConfigError(f"padding must be int, (ph, pw) or 4-tuple, got {padding}")
    return p


def pad_np(x: np.ndarray, pads: tuple, mode: str) -> np.ndarray:
    top, bottom, left, right = pads
    if top == bottom == left == right == 0:
        return x
    if mode == "zeros":
        h, w = x.shape[-2:]
        out = np.zeros(x.shape[:-2] + (h + top + bottom, w + left + right), dtype=x.dtype)
        out[..., top:top + h, left:left + w] = x
        return out
    if mode == "reflect":
        ih = reflect_index(x.shape[-2], top, bottom)
        iw = reflect_index(x.shape[-1], left, right)
        return x.take(ih, axis=-2).take(iw, axis=-1)
    raise ConfigError(f"unknown padding mode {mode!r}; expected 'zeros' or 'reflect'")


def unpad_np(g: np.ndarray, pads: tuple, mode: str, h: int, w: int) -> np.ndarray:
    top, bottom, left, right = pads
    if top == bottom == left == right == 0:
        return g
    if mode == "zeros":
        return np.ascontiguousarray(g[..., top:top + h, left:left + w])
    g = _fold_axis(g, w, left, right, g.ndim - 1)
    return np.ascontiguousarray(_fold_axis(g, h, top, bottom, g.ndim - 2))


def pad2d(x: Tensor, padding, mode: str = "zeros") -> Tensor:
    if x.ndim < 2:
        raise DimensionError("pad2d needs at least two dimensions")
    pads = _norm_pads(padding)
    h, w = x.shape[-2:]
    out = pad_np(x.data, pads, mode)
    return record("pad2d", out, (x,), lambda g: (unpad_np(g, pads, mode, h, w),))


# ---------------------------------------------------------------- convolution
def _im2col(xp, kh, kw, s, d, oh, ow):
    """Patch matrix (N, C*KH*KW, oh*ow); rows follow the OIHW weight layout."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, ((kh - 1) * d + 1, (kw - 1) * d + 1), axis=(2, 3))
    win = win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s, ::d, ::d]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def _conv_forward(cols, w, groups, oh, ow):
    n, o = cols.shape[0], w.shape[0]
    og, rows = o // groups, cols.shape[1] // groups
    wm = w.reshape(o, -1)
    if groups == 1:
        return np.matmul(wm, cols).reshape(n, o, oh, ow)
    y = np.empty((n, o, oh * ow), dtype=np.result_type(cols, w))
    for grp in range(groups):
        np.matmul(wm[grp * og:(grp + 1) * og], cols[:, grp * rows:(grp + 1) * rows],
                  out=y[:, grp * og:(grp + 1) * og])
    return y.reshape(n, o, oh, ow)


def _conv_backward(g, cols, w, groups, s, d, xshape, need_x):
    o, cg, kh, kw = w.shape
    n = g.shape[0]
    og, rows = o // groups, cols.shape[1] // groups
    g3 = g.reshape(n, o, -1)
    wm = w.reshape(o, -1)
    gw = np.empty_like(wm)
    gcols = np.empty_like(cols) if need_x else None
    for grp in range(groups):
        go, gr = slice(grp * og, (grp + 1) * og), slice(grp * rows, (grp + 1) * rows)
        # per-image GEMMs against the transposed view; no copy of the patch matrix
        acc = gw[go]
        np.matmul(g3[0, go], cols[0, gr].T, out=acc)
        for b in range(1, n):
            acc += g3[b, go] @ cols[b, gr].T
        if need_x:
            np.matmul(wm[go].T, g3[:, go], out=gcols[:, gr])
    gxp = None
    if need_x:
        _, c, hp, wp = xshape
        gxp = kernels.col2im(gcols.reshape(n, -1, *g.shape[2:]), c, kh, kw, s, d, hp, wp)
    return gxp, gw.reshape(w.shape)


def _dw_forward(xp, w, s, d, oh, ow):
    xp = np.ascontiguousarray(xp)
    w2 = np.ascontiguousarray(w[:, 0], xp.dtype)
    if w2.shape[1:] == (3, 3) and s == 1 and d == 1:
        return kernels.dw3_forward(xp, w2, oh, ow)
    return kernels.dw_forward(xp, w2, s, d, oh, ow)


def _dw_backward(g, xp, w, s, d):
    g = np.ascontiguousarray(g, xp.dtype)
    xp = np.ascontiguousarray(xp)
    w2 = np.ascontiguousarray(w[:, 0], xp.dtype)
    if w2.shape[1:] == (3, 3) and s == 1 and d == 1:
        gxp, gw = kernels.dw3_backward(g, xp, w2)
    else:
        gxp, gw = kernels.dw_backward(g, xp, w2, s, d)
    return gxp, gw[:, None]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding=0,
    dilation: int = 1,
    groups: int = 1,
    padding_mode: str = "zeros",
) -> Tensor:
    """2D cross-correlation over NCHW input with OIHW weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide in={c} and out={o} channels")
    if cg * groups != c:
        raise DimensionError(
            f"conv2d: weight expects {cg * groups} input channels, input has {c}"
        )
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or dilation < 1:
        raise ConfigError("stride and dilation must be >= 1")
    pads = _norm_pads(padding)
    xp = pad_np(x.data, pads, padding_mode)
    hp, wp = xp.shape[2:]
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) larger than padded input {hp}x{wp}"
        )
    wd = weight.data
    depthwise = groups == c and cg == 1 and o == c
    if depthwise:
        out = _dw_forward(xp, wd, stride, dilation, oh, ow)
    else:
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
        out = _conv_forward(cols, wd, groups, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]
    _count_macs("conv", n * o * oh * ow * cg * kh * kw)

    def grad_fn(g):
        if depthwise:
            gxp, gw = _dw_backward(g, xp, wd, stride, dilation)
        else:
            gxp, gw = _conv_backward(g, cols, wd, groups, stride, dilation, xp.shape,
                                     x.requires_grad)
        gx = unpad_np(gxp, pads, padding_mode, h, w) if gxp is not None else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, parents, grad_fn)


# ---------------------------------------------------------------- dense algebra
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, axis: int = -1) -> Tensor:
    """Apply ``W @ v + b`` to every vector ``v`` along ``axis`` (default last)."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2D, got {weight.shape}")
    ax = axis % x.ndim
    dout, din = weight.shape
    if x.shape[ax] != din:
        raise DimensionError(
            f"linear: input extent {x.shape[ax]} along axis {ax} != weight in-dim {din}"
        )
    if bias is not None and bias.shape != (dout,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({dout},)")
    wd = weight.data
    xd = x.data
    out_shape = x.shape[:ax] + (dout,) + x.shape[ax + 1:]
    _count_macs("linear", int(np.prod(out_shape)) * din)
    if ax == x.ndim - 1:
        x2 = xd.reshape(-1, din)
        out = x2 @ wd.T
        if bias is not None:
            out += bias.data

        def grad_fn(g):
            g2 = g.reshape(-1, dout)
            gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
            gw = g2.T @ x2
            return (gx, gw, g2.sum(0)) if bias is not None else (gx, gw)
    else:
        lead = int(np.prod(x.shape[:ax], dtype=np.int64))
        x3 = xd.reshape(lead, din, -1)
        out = np.matmul(wd, x3)
        if bias is not None:
            out += bias.data[None, :, None]

        def grad_fn(g):
            g3 = g.reshape(lead, dout, -1)
            gx = np.matmul(wd.T, g3).reshape(x.shape) if x.requires_grad else None
            gw = g3[0] @ x3[0].T
            for k in range(1, lead):
                gw += g3[k] @ x3[k].T
            return (gx, gw, g3.sum(axis=(0, 2))) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", out.reshape(out_shape), parents, grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dimensions follow numpy matmul rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from exc
    _count_macs("linear", out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return record("matmul", out, (a, b), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalize over ``axis`` (the channel axis for NCHW) then apply a per-channel affine."""
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    if eps < 0:
        raise ConfigError("layer_norm eps must be >= 0")
    lead = int(np.prod(x.shape[:ax], dtype=np.int64))
    shape3 = (lead, c, x.data.size // max(lead * c, 1))
    gd = np.ascontiguousarray(gamma.data, x.dtype)
    out, xhat, rstd = kernels.ln_forward(x.data.reshape(shape3), gd,
                                         np.ascontiguousarray(beta.data, x.dtype), float(eps))

    def grad_fn(g):
        gx, gg, gb = kernels.ln_backward(np.ascontiguousarray(g).reshape(shape3), xhat, rstd, gd)
        return gx.reshape(x.shape), gg, gb

    out = out.reshape(x.shape)
    return record("layer_norm", out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------- resampling
def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: size {h}x{w} not divisible by patch {k}")
    inv = 1.0 / (k * k)
    out = (kernels.pool_sum(x.data.reshape(n * c, h, w), k) * inv).reshape(n, c, h // k, w // k)

    def grad_fn(g):
        up = kernels.repeat_nearest(np.ascontiguousarray(g).reshape(n * c, h // k, w // k), k)
        return ((up * inv).reshape(x.shape),)

    return record("avg_pool2d", out, (x,), grad_fn)


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    out = kernels.repeat_nearest(x.data.reshape(n * c, h, w), k).reshape(n, c, h * k, w * k)

    def grad_fn(g):
        return (kernels.pool_sum(np.ascontiguousarray(g).reshape(n * c, h * k, w * k), k)
                .reshape(x.shape),)

    return record("upsample_nearest", out, (x,), grad_fn)


@lru_cache(maxsize=256)
def _bilinear_matrix(n: int, target: int) -> np.ndarray:
    """(target, n) operator: x2 bilinear taps 0.75/0.25 with edge clamp, cropped to ``target``."""
    m = np.zeros((2 * n, n))
    for k in range(n):
        m[2 * k, k] += 0.75
        m[2 * k, max(k - 1, 0)] += 0.25
        m[2 * k + 1, k] += 0.75
        m[2 * k + 1, min(k + 1, n - 1)] += 0.25
    m = np.ascontiguousarray(m[:target])
    m.flags.writeable = False
    return m


def _separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Apply ``mh`` along H and ``mw`` along W of a (..., H, W) array."""
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    t = (x.reshape(-1, w) @ mw.T).reshape(-1, h, mw.shape[0])
    return np.matmul(mh, t).reshape(lead + (mh.shape[0], mw.shape[0]))


def upsample_bilinear2x(x: Tensor, size: Optional[tuple] = None) -> Tensor:
    """Bilinear x2 upsampling (half-pixel centres, edge clamp), optionally cropped."""
    n, c, h, w = x.shape
    th, tw = size if size is not None else (2 * h, 2 * w)
    if th > 2 * h or tw > 2 * w:
        raise DimensionError(f"upsample target {th}x{tw} exceeds 2x of {h}x{w}")
    mh, mw = _bilinear_matrix(h, th), _bilinear_matrix(w, tw)
    out = _separable(x.data, mh, mw)
    return record("upsample_bilinear2x", out, (x,), lambda g: (_separable(g, mh.T, mw.T),))
