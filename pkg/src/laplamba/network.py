"""Seven-level Laplacian-pyramid U-Net assembling the restoration blocks.

Dataflow for an input image ``x`` (levels 1-3 encode, 4 is the bottleneck,
5-7 decode)::

    e1 = intro(x)
    encoder level i:  (F_l, F_h) = split(e_i)
                      F_l  = MDFM(img_i, F_l)      img_i = conv(avgpool(x, 2^i))
                      F_l* = LSRB^M(F_l)
                      F_h* = HDEB^N(up(F_l*), F_h)
                      skip_i = F_h*,  e_{i+1} = T_i(F_l*)
    level 4:          y4 = merge(F_l*, F_h*) from a full level without MDFM
    decoder level j:  d_j = merge(T_j(y_{j-1}), skip_{8-j});  y_j = full level on d_j
    out = outro(y7) + x

``split`` and ``merge`` are the lossless pyramid pair, so the pyramid low band
is the only downsampling and the stored high band is the decoder skip.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lftm, nn, ops
from .blocks import HDEB, LSRB, MDFM, _merge
from .errors import ConfigError, DimensionError, PaddingError
from .tensor import Tensor, no_grad

LEVELS = 7
ENCODER = 3


@dataclass
class NetworkConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64, 128, 64, 32, 16])
    M: list = field(default_factory=lambda: [1, 1, 2, 4, 2, 1, 1])
    N: list = field(default_factory=lambda: [1, 1, 1, 2, 1, 1, 1])
    patch_sizes: list = field(default_factory=lambda: [4, 2])
    nstate: int = 8
    expand: int = 1
    merge_mode: str = "sum"
    dconv: str = "depthwise"
    ffn_expansion: int = 2
    global_residual: bool = True
    in_channels: int = 3

    def validate(self) -> None:
        for name in ("channels", "M", "N"):
            v = getattr(self, name)
            if len(v) != LEVELS:
                raise ConfigError(f"{name} must have {LEVELS} entries, got {len(v)}")
        if any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"channel widths must be positive, got {self.channels}")
        if any(int(m) < 0 for m in list(self.M) + list(self.N)):
            raise ConfigError("block counts must be non-negative")
        if list(self.channels[ENCODER + 1:]) != list(self.channels[:ENCODER][::-1]):
            raise ConfigError(
                f"decoder widths {self.channels[ENCODER + 1:]} must mirror encoder widths "
                f"{self.channels[:ENCODER]} so skips align"
            )
        if not self.patch_sizes or any(int(p) < 1 for p in self.patch_sizes):
            raise ConfigError(f"patch sizes must be positive, got {self.patch_sizes}")
        if self.merge_mode not in ("sum", "mean"):
            raise ConfigError(f"merge_mode must be 'sum' or 'mean', got {self.merge_mode!r}")
        if self.dconv not in ("depthwise", "dilated"):
            raise ConfigError(f"dconv must be 'depthwise' or 'dilated', got {self.dconv!r}")
        if self.nstate < 1 or self.expand < 1 or self.ffn_expansion < 1:
            raise ConfigError("nstate, expand and ffn_expansion must be >= 1")

    @property
    def required_multiple(self) -> int:
        # The deepest high band sits at 1/8 scale and is pooled by the largest patch.
        return 2 ** ENCODER * max(int(p) for p in self.patch_sizes)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        text = repr(sorted(self.to_dict().items())).encode()
        return hashlib.sha256(text).digest()


class PyramidLevel(nn.Module):
    """One U-Net level: split, optional fusion, LSRB stack, HDEB stack."""

    def __init__(self, rng, cfg: NetworkConfig, index: int, fuse: bool):
        c = int(cfg.channels[index])
        self.index = index
        self.channels = c
        self.mdfm = MDFM(rng, c) if fuse else None
        self.lsrbs = nn.ModuleList(
            LSRB(rng, c, cfg.nstate, cfg.expand, cfg.merge_mode, cfg.ffn_expansion)
            for _ in range(int(cfg.M[index]))
        )
        self.hdebs = nn.ModuleList(
            HDEB(rng, c, tuple(cfg.patch_sizes), cfg.dconv, cfg.ffn_expansion)
            for _ in range(int(cfg.N[index]))
        )

    def forward(self, e: Tensor, image_feat: Tensor = None):
        fp = lftm.decompose(e)
        f_l = fp.low
        if self.mdfm is not None:
            f_l = self.mdfm(image_feat, f_l)
        for blk in self.lsrbs:
            f_l = blk(f_l)
        f_h = fp.high
        if len(self.hdebs):
            guide = ops.upsample_bilinear2x(f_l, fp.original_size)
            for blk in self.hdebs:
                f_h = blk(guide, f_h)
        return f_l, f_h, fp.original_size

    def macs(self, n: int, h: int, w: int) -> dict:
        """MACs split by band; ``h, w`` is this level's input (high band) size."""
        hl, wl = (h + 1) // 2, (w + 1) // 2
        low = {}
        if self.mdfm is not None:
            low = _merge(low, self.mdfm.macs(n, hl, wl))
        full_scan = 0
        for blk in self.lsrbs:
            low = _merge(low, blk.macs(n, hl, wl))
            full_scan += blk.vssm.macs(n, h, w)["scan"]
        high = {}
        for blk in self.hdebs:
            high = _merge(high, blk.macs(n, h, w))
        return {"low": low, "high": high, "scan_full_equiv": full_scan}


class PyramidScanNet(nn.Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = [int(c) for c in cfg.channels]
        cin = cfg.in_channels
        self.intro = nn.Conv2d(rng, cin, ch[0], 3)
        self.image_convs = nn.ModuleList(nn.Conv2d(rng, cin, ch[i], 3) for i in range(ENCODER))
        self.levels = nn.ModuleList(
            PyramidLevel(rng, cfg, i, fuse=i < ENCODER) for i in range(LEVELS)
        )
        # Encoder transitions widen the low band for the next level; decoder
        # transitions narrow the previous output to the skip width.
        self.down = nn.ModuleList(nn.Conv2d(rng, ch[i], ch[i + 1], 1) for i in range(ENCODER))
        self.up = nn.ModuleList(
            nn.Conv2d(rng, ch[j - 1], ch[j], 1) for j in range(ENCODER + 1, LEVELS)
        )
        self.outro = nn.Conv2d(rng, ch[-1], cin, 3)

    @property
    def required_multiple(self) -> int:
        return self.cfg.required_multiple

    def check_size(self, h: int, w: int) -> None:
        m = self.required_multiple
        if h % m or w % m or h < m or w < m:
            raise PaddingError(
                f"input {h}x{w} must be a positive multiple of {m} in both dimensions; "
                f"pad to {-(-h // m) * m}x{-(-w // m) * m} (dehaze() does this automatically)"
            )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected (N, {self.cfg.in_channels}, H, W) input, got {x.shape}"
            )
        self.check_size(*x.shape[2:])
        e = self.intro(x)
        skips = []
        for i in range(ENCODER):
            image_feat = self.image_convs[i](ops.avg_pool2d(x, 2 ** (i + 1)))
            f_l, f_h, _ = self.levels[i](e, image_feat)
            skips.append(f_h)
            e = self.down[i](f_l)
        f_l, f_h, size = self.levels[ENCODER](e)
        y = lftm.reconstruct(lftm.FreqPair(f_l, f_h, size))
        for k, j in enumerate(range(ENCODER + 1, LEVELS)):
            skip = skips[ENCODER - 1 - k]
            d = lftm.reconstruct(lftm.FreqPair(self.up[k](y), skip, tuple(skip.shape[2:])))
            f_l, f_h, size = self.levels[j](d)
            y = lftm.reconstruct(lftm.FreqPair(f_l, f_h, size))
        out = self.outro(y)
        if self.cfg.global_residual:
            out = ops.add(out, x)
        return out

    def dehaze(self, image: np.ndarray) -> np.ndarray:
        """Inference on an (N, C, H, W) or (C, H, W) array in [0, 1]: pad, run, crop, clamp."""
        arr = np.asarray(image, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        n, c, h, w = arr.shape
        m = self.required_multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            if ph >= h or pw >= w:
                raise PaddingError(
                    f"image {h}x{w} is too small to reflect-pad to a multiple of {m}; "
                    f"minimum size is {m // 2 + 1}x{m // 2 + 1}"
                )
            arr = ops.pad_np(arr, (0, ph, 0, pw), "reflect")
        with no_grad():
            out = self.forward(Tensor(arr)).data[:, :, :h, :w]
        out = np.clip(out, 0.0, 1.0)
        return out[0] if single else out

    def describe(self, h: int = 64, w: int = 64) -> str:
        rows = [("level", "width", "M", "N", "in size", "low size", "params", "MACs")]
        est = flop_estimate(self.cfg, h, w)
        size = (h, w)
        for i, lvl in enumerate(self.levels):
            p = lvl.num_parameters()
            low = ((size[0] + 1) // 2, (size[1] + 1) // 2)
            macs = est["per_level"][i]["total"]
            rows.append((str(i + 1), str(lvl.channels), str(len(lvl.lsrbs)), str(len(lvl.hdebs)),
                         f"{size[0]}x{size[1]}", f"{low[0]}x{low[1]}", f"{p:,}", f"{macs:,}"))
            if i < ENCODER:
                size = low
            elif i < LEVELS - 1:
                size = (size[0] * 2, size[1] * 2)
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        lines = ["  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in rows]
        lines.append(f"total parameters: {self.num_parameters():,}")
        lines.append(f"total MACs at {h}x{w}: {est['total']:,} "
                     f"(conv {est['conv']:,}, linear {est['linear']:,}, scan {est['scan']:,})")
        return "\n".join(lines)


def build(cfg: NetworkConfig = None, seed: int = 0) -> PyramidScanNet:
    return PyramidScanNet(cfg if cfg is not None else NetworkConfig(), seed)


def flop_estimate(cfg: NetworkConfig, h: int, w: int, batch: int = 1) -> dict:
    """Analytic multiply-accumulate count of one forward pass at ``h`` x ``w``.

    Categories are conv, linear and scan. ``low_band`` and ``high_band`` split
    the level blocks by the band they run on; ``scan_full_equiv`` is what the
    same scans would cost at the level's input resolution.
    """
    cfg.validate()
    model = _shape_model(cfg)
    n = batch
    cin = cfg.in_channels
    ch = [int(c) for c in cfg.channels]
    frame = {"conv": model.intro.macs(n, h, w) + model.outro.macs(n, h, w)}
    size = (h, w)
    per_level = []
    low_tot, high_tot = {}, {}
    full_scan = 0
    for i, lvl in enumerate(model.levels):
        if i > ENCODER:
            # decoder transition runs on the previous (smaller) output
            frame = _merge(frame, {"conv": model.up[i - ENCODER - 1].macs(n, size[0] // 2, size[1] // 2)})
        m = lvl.macs(n, *size)
        low_tot = _merge(low_tot, m["low"])
        high_tot = _merge(high_tot, m["high"])
        full_scan += m["scan_full_equiv"]
        total = sum(m["low"].values()) + sum(m["high"].values())
        half = ((size[0] + 1) // 2, (size[1] + 1) // 2)
        if i < ENCODER:
            frame = _merge(frame, {"conv": model.image_convs[i].macs(n, *half)
                                   + model.down[i].macs(n, *half)})
        per_level.append({"low": m["low"], "high": m["high"], "total": total,
                          "scan_low": m["low"].get("scan", 0),
                          "scan_full_equiv": m["scan_full_equiv"], "size": size})
        if i < ENCODER:
            size = half
        elif i < LEVELS - 1:
            size = (size[0] * 2, size[1] * 2)
    cats = _merge(frame, low_tot, high_tot)
    out = {k: cats.get(k, 0) for k in ("conv", "linear", "scan")}
    out["total"] = sum(out.values())
    out["low_band"] = low_tot
    out["high_band"] = high_tot
    out["frame"] = frame
    out["scan_low"] = low_tot.get("scan", 0)
    out["scan_full_equiv"] = full_scan
    out["per_level"] = per_level
    out["channels_in"] = cin
    out["widths"] = ch
    return out


_SHAPE_CACHE: dict = {}


def _shape_model(cfg: NetworkConfig) -> PyramidScanNet:
    key = cfg.digest()
    if key not in _SHAPE_CACHE:
        _SHAPE_CACHE.clear()
        _SHAPE_CACHE[key] = PyramidScanNet(cfg, 0)
    return _SHAPE_CACHE[key]


def pad_to_multiple(arr: np.ndarray, m: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    return ops.pad_np(arr, (0, (-h) % m, 0, (-w) % m), "reflect")
