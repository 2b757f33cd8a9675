"""Wall-clock measurements: scan scaling in sequence length and network throughput."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import network
from .ssm2d import _decay, _scan_fwd_kernel
from .tensor import Tensor, no_grad

DEFAULT_LENGTHS = (1024, 2048, 4096, 8192)


@dataclass
class ScanTiming:
    lengths: tuple
    seconds: tuple
    ratio: float       # time(largest) / time(second largest)
    r2: float          # least-squares fit of time against length
    shape: tuple       # (channels, nstate)

    def report(self) -> str:
        lines = [f"{'L':>8}{'seconds':>14}{'ns/step':>12}"]
        ch, ns = self.shape
        for L, s in zip(self.lengths, self.seconds):
            lines.append(f"{L:>8}{s:>14.6f}{1e9 * s / (L * ch * ns):>12.3f}")
        lines.append(f"ratio t({self.lengths[-1]})/t({self.lengths[-2]}) = {self.ratio:.3f}")
        lines.append(f"linear fit R^2 = {self.r2:.5f}")
        return "\n".join(lines)


def linear_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def scan_timing(lengths=DEFAULT_LENGTHS, channels: int = 64, nstate: int = 16,
                repeats: int = 7, seed: int = 0) -> ScanTiming:
    """Best-of-``repeats`` time of one forward scan (decay included) per length."""
    rng = np.random.default_rng(seed)
    times = []
    for L in lengths:
        u = rng.standard_normal((1, 1, channels, L))
        delta = rng.uniform(0.01, 0.1, (1, 1, channels, L))
        A = -rng.uniform(0.5, 2.0, (1, channels, nstate))
        B = rng.standard_normal((1, 1, L, nstate))
        C = rng.standard_normal((1, 1, L, nstate))
        D = np.ones((1, channels))
        _scan_fwd_kernel(u, delta, _decay(delta, A), B, C, D)  # compile / warm caches
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            _scan_fwd_kernel(u, delta, _decay(delta, A), B, C, D)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    return ScanTiming(tuple(lengths), tuple(times), times[-1] / times[-2],
                      linear_r2(lengths, times), (channels, nstate))


def forward_timing(cfg: network.NetworkConfig, h: int, w: int, batch: int = 1,
                   repeats: int = 3, seed: int = 0) -> float:
    model = network.build(cfg, seed)
    x = Tensor(np.random.default_rng(seed).random((batch, cfg.in_channels, h, w)))
    best = np.inf
    with no_grad():
        model(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x)
            best = min(best, time.perf_counter() - t0)
    return best


def flop_report(cfg: network.NetworkConfig, h: int, w: int) -> str:
    est = network.flop_estimate(cfg, h, w)
    lines = [f"forward MACs at {h}x{w} (batch 1)"]
    for key in ("conv", "linear", "scan", "total"):
        lines.append(f"  {key:<8}{est[key]:>16,}")
    lines.append(f"  {'GFLOPs':<8}{2 * est['total'] / 1e9:>16.4f}  (2 FLOPs per MAC)")
    lines.append(f"  low-band scan MACs {est['scan_low']:,} vs full-resolution "
                 f"equivalent {est['scan_full_equiv']:,}")
    return "\n".join(lines)
