"""Composite restoration blocks built from the tensor ops and the vision SSM."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import nn, ops
from .errors import ConfigError, DimensionError
from .ssm2d import VSSM
from .tensor import Tensor


def _same_shape(what: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _const_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full(x.shape, value, dtype=x.dtype))


class ChannelAttention(nn.Module):
    """Per-channel gains in (0, 1) from global average pooling, shape (N, C, 1, 1)."""

    def __init__(self, rng, channels: int, reduction: int = 4):
        hidden = max(channels // reduction, 1)
        # dense maps on the pooled vector; their cost does not scale with H*W
        self.fc1 = nn.Linear(rng, channels, hidden)
        self.fc2 = nn.Linear(rng, hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        pooled = ops.mean(x, axis=(2, 3), keepdims=True)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))

    def apply(self, x: Tensor) -> Tensor:
        return ops.mul(x, ops.broadcast_to(self(x), x.shape))

    def macs(self, n, h, w) -> dict:
        return {"linear": n * 2 * self.fc1.in_dim * self.fc1.out_dim}


class ResGroup(nn.Module):
    """Conv3-ReLU-Conv3 with an identity shortcut."""

    def __init__(self, rng, channels: int):
        self.conv1 = nn.Conv2d(rng, channels, channels, 3)
        self.conv2 = nn.Conv2d(rng, channels, channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(ops.relu(self.conv1(x))))

    def macs(self, n, h, w) -> dict:
        return {"conv": self.conv1.macs(n, h, w) + self.conv2.macs(n, h, w)}


class GFFN(nn.Module):
    """Norm, pointwise expansion, depthwise conv, simple gate, depthwise conv."""

    def __init__(self, rng, channels: int, expansion: int = 2):
        hidden = channels * expansion
        if hidden % 2:
            raise ConfigError(f"gated FFN needs an even hidden width, got {hidden}")
        self.channels = channels
        self.hidden = hidden
        self.norm = nn.LayerNorm(channels)
        self.pw = nn.Linear(rng, channels, hidden)
        self.dw1 = nn.Conv2d(rng, hidden, hidden, 3, groups=hidden)
        self.dw2 = nn.Conv2d(rng, hidden // 2, hidden // 2, 3, groups=hidden // 2)
        self.proj = None if hidden // 2 == channels else nn.Linear(rng, hidden // 2, channels)

    @staticmethod
    def simple_gate(x: Tensor) -> Tensor:
        f1, f2 = ops.split(x, 2, axis=1)
        return ops.mul(f1, f2)

    def forward(self, z: Tensor) -> Tensor:
        y = self.dw1(self.pw(self.norm(z)))
        y = self.dw2(self.simple_gate(y))
        return nn.maybe(self.proj, y)

    def macs(self, n, h, w) -> dict:
        lin = n * h * w * self.channels * self.hidden
        if self.proj is not None:
            lin += n * h * w * self.proj.in_dim * self.proj.out_dim
        return {"linear": lin, "conv": self.dw1.macs(n, h, w) + self.dw2.macs(n, h, w)}


class LSRB(nn.Module):
    """Z = VSSM(LN x) + beta x, out = GFFN(Z) + gamma Z."""

    def __init__(self, rng, channels: int, nstate: int = 8, expand: int = 1,
                 merge: str = "sum", ffn_expansion: int = 2):
        self.norm = nn.LayerNorm(channels)
        self.vssm = VSSM(rng, channels, nstate=nstate, expand=expand, merge=merge)
        self.gffn = GFFN(rng, channels, ffn_expansion)
        self.beta = nn.scalar_parameter(1.0)
        self.gamma = nn.scalar_parameter(1.0)

    def forward(self, x: Tensor) -> Tensor:
        z = ops.add(self.vssm(self.norm(x)), ops.mul(self.beta, x))
        return ops.add(self.gffn(z), ops.mul(self.gamma, z))

    def macs(self, n, h, w) -> dict:
        return _merge(self.vssm.macs(n, h, w), self.gffn.macs(n, h, w))


class MDFM(nn.Module):
    """Convex per-pixel fusion of spatial features F_s and frequency features F_l."""

    def __init__(self, rng, channels: int):
        c = channels
        self.conv_s = nn.Conv2d(rng, c, c, 3)
        self.conv_l = nn.Conv2d(rng, c, c, 5)
        self.squeeze = nn.Conv2d(rng, 2 * c, c, 1)
        self.resg = ResGroup(rng, c)
        self.expand = nn.Conv2d(rng, c, c, 1)
        self.ca = ChannelAttention(rng, c)
        # A float here pins the weight map to that constant.
        self.fusion_stub: Optional[float] = None

    def weight_map(self, f_s: Tensor, f_l: Tensor) -> Tensor:
        if self.fusion_stub is not None:
            return _const_like(f_l, float(self.fusion_stub))
        y1 = ops.relu(self.conv_s(f_s))
        y2 = ops.relu(self.conv_l(f_l))
        t = self.expand(self.resg(self.squeeze(ops.concat([y1, y2], axis=1))))
        return ops.sigmoid(self.ca.apply(t))

    def forward(self, f_s: Tensor, f_l: Tensor) -> Tensor:
        _same_shape("MDFM", f_s, f_l)
        w = self.weight_map(f_s, f_l)
        return ops.add(ops.mul(f_l, w), ops.mul(f_s, ops.sub(1.0, w)))

    def macs(self, n, h, w) -> dict:
        conv = sum(m.macs(n, h, w) for m in (self.conv_s, self.conv_l, self.squeeze, self.expand))
        return _merge({"conv": conv}, self.resg.macs(n, h, w), self.ca.macs(n, h, w))


class PixelAttention(nn.Module):
    """Projection of F gated by a patch-pooled sigmoid map upsampled back to full size."""

    def __init__(self, rng, channels: int, patch: int, reduction: int = 4):
        if patch < 1:
            raise ConfigError(f"patch must be >= 1, got {patch}")
        hidden = max(channels // reduction, 1)
        self.patch = patch
        self.proj = nn.Linear(rng, channels, channels)
        self.fc1 = nn.Conv2d(rng, channels, hidden, 1)
        self.fc2 = nn.Conv2d(rng, hidden, channels, 1)

    def gate(self, f: Tensor) -> Tensor:
        h, w = f.shape[2:]
        p = self.patch
        if h % p or w % p:
            raise DimensionError(f"pixel attention patch {p} does not divide {h}x{w}")
        pooled = ops.avg_pool2d(f, p) if p > 1 else f
        g = ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))
        return ops.upsample_nearest(g, p) if p > 1 else g

    def forward(self, f: Tensor) -> Tensor:
        return ops.mul(self.proj(f), self.gate(f))

    def macs(self, n, h, w) -> dict:
        hp, wp = h // self.patch, w // self.patch
        return {"linear": n * h * w * self.proj.in_dim * self.proj.out_dim,
                "conv": self.fc1.macs(n, hp, wp) + self.fc2.macs(n, hp, wp)}


class HDEB(nn.Module):
    """Refines the high band under attention computed from the upsampled low band."""

    def __init__(self, rng, channels: int, patches=(4, 2), dconv: str = "depthwise",
                 ffn_expansion: int = 2):
        c = channels
        self.guide_conv = self._dconv(rng, c, dconv)
        self.pas = nn.ModuleList(PixelAttention(rng, c, p) for p in patches)
        self.detail_conv = self._dconv(rng, c, dconv)
        self.conv = nn.Conv2d(rng, c, c, 3)
        self.gffn = GFFN(rng, c, ffn_expansion)
        self.gate_stub: Optional[float] = None

    @staticmethod
    def _dconv(rng, c, mode):
        if mode == "depthwise":
            return nn.Conv2d(rng, c, c, 3, groups=c)
        if mode == "dilated":
            return nn.Conv2d(rng, c, c, 3, dilation=2)
        raise ConfigError(f"dconv must be 'depthwise' or 'dilated', got {mode!r}")

    def attention(self, guide: Tensor) -> Tensor:
        if self.gate_stub is not None:
            return _const_like(guide, float(self.gate_stub))
        s = ops.relu(self.guide_conv(guide))
        for pa in self.pas:
            s = ops.add(s, pa(guide))
        return ops.sigmoid(s)

    def forward(self, guide: Tensor, f_h: Tensor) -> Tensor:
        _same_shape("HDEB guide/high band", guide, f_h)
        w = self.attention(guide)
        y = ops.relu(self.detail_conv(ops.mul(w, f_h)))
        return self.gffn(self.conv(y))

    def macs(self, n, h, w) -> dict:
        parts = [{"conv": self.guide_conv.macs(n, h, w) + self.detail_conv.macs(n, h, w)
                  + self.conv.macs(n, h, w)}, self.gffn.macs(n, h, w)]
        parts += [pa.macs(n, h, w) for pa in self.pas]
        return _merge(*parts)


def _merge(*dicts) -> dict:
    out: dict = {}
    for d in dicts:
        for k, v in d.items():
            out[k] = out.get(k, 0) + int(v)
    return out
