"""Selective state-space scan, four-direction 2D traversal, and the vision SSM block.

Kernel layout (all float64, C-contiguous):

    u, delta : (Nb, G, D, L)   input sequence and per-step step size
    A        : (G, D, Ns)      negative diagonal state matrix
    B, C     : (Nb, G, L, Ns)  input-dependent projections shared over D
    Dskip    : (G, D)          direct feed-through gain

``G`` indexes independent parameter groups (the four scan directions inside
the vision block). The recurrence per (batch, group, channel) is

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,   h_0 = 0
    y_t = <C_t, h_t> + Dskip * u_t
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import nn, ops
from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, record


# ----------------------------------------------------------------- kernels
# The decay factors exp(delta * A) are computed outside the kernels with
# numpy's vectorized exp and passed in as ``dA`` (Nb, G, D, L, Ns).
@numba.njit(cache=True)
def _scan_fwd_kernel(u, delta, dA, B, C, Dskip):
    nb, ng, nd, nl = u.shape
    ns = dA.shape[4]
    y = np.empty_like(u)
    h = np.empty(ns)
    for b in range(nb):
        for g in range(ng):
            for d in range(nd):
                for s in range(ns):
                    h[s] = 0.0
                dsk = Dskip[g, d]
                for t in range(nl):
                    ut = u[b, g, d, t]
                    du = delta[b, g, d, t] * ut
                    at = dA[b, g, d, t]
                    bt = B[b, g, t]
                    ct = C[b, g, t]
                    acc = 0.0
                    for s in range(ns):
                        hv = at[s] * h[s] + du * bt[s]
                        h[s] = hv
                        acc += ct[s] * hv
                    y[b, g, d, t] = acc + dsk * ut
    return y


@numba.njit(cache=True)
def _scan_bwd_kernel(u, delta, dA, A, B, C, Dskip, gy):
    nb, ng, nd, nl = u.shape
    ns = dA.shape[4]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(u)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(Dskip)
    hist = np.empty((nl + 1, ns))
    gh = np.empty(ns)
    for b in range(nb):
        for g in range(ng):
            for d in range(nd):
                # replay the states of this sequence
                for s in range(ns):
                    hist[0, s] = 0.0
                for t in range(nl):
                    du = delta[b, g, d, t] * u[b, g, d, t]
                    at = dA[b, g, d, t]
                    bt = B[b, g, t]
                    for s in range(ns):
                        hist[t + 1, s] = at[s] * hist[t, s] + du * bt[s]
                for s in range(ns):
                    gh[s] = 0.0
                dsk = Dskip[g, d]
                gd_acc = 0.0
                for t in range(nl - 1, -1, -1):
                    dt = delta[b, g, d, t]
                    ut = u[b, g, d, t]
                    gyt = gy[b, g, d, t]
                    gd_acc += gyt * ut
                    gut = gyt * dsk
                    gdt = 0.0
                    at = dA[b, g, d, t]
                    bt = B[b, g, t]
                    ct = C[b, g, t]
                    gbt = gB[b, g, t]
                    gct = gC[b, g, t]
                    for s in range(ns):
                        gct[s] += gyt * hist[t + 1, s]
                        ghs = gh[s] + gyt * ct[s]
                        ga = ghs * hist[t, s] * at[s]
                        a_s = A[g, d, s]
                        gdt += ga * a_s + ghs * bt[s] * ut
                        gA[g, d, s] += ga * dt
                        gbt[s] += ghs * dt * ut
                        gut += ghs * dt * bt[s]
                        gh[s] = ghs * at[s]
                    gu[b, g, d, t] = gut
                    gdelta[b, g, d, t] = gdt
                gD[g, d] += gd_acc
    return gu, gdelta, gA, gB, gC, gD


def _decay(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    out = np.multiply(delta[..., None], A[None, :, :, None, :])
    return np.exp(out, out=out)


def _check_layout(u, delta, A, B, C, D) -> None:
    if u.ndim != 4:
        raise DimensionError(f"scan input must be (Nb, G, D, L), got {u.shape}")
    nb, ng, nd, nl = u.shape
    ns = A.shape[-1] if A.ndim == 3 else -1
    expected = {
        "delta": (delta.shape, (nb, ng, nd, nl)),
        "A": (A.shape, (ng, nd, ns)),
        "B": (B.shape, (nb, ng, nl, ns)),
        "C": (C.shape, (nb, ng, nl, ns)),
        "Dskip": (D.shape, (ng, nd)),
    }
    for name, (got, want) in expected.items():
        if tuple(got) != want:
            raise DimensionError(f"scan {name} shape {tuple(got)} != expected {want}")
    if nl < 1:
        raise DimensionError("scan needs sequence length >= 1")


def _prepare(u, delta, A, B, C, D) -> list:
    _check_layout(u, delta, A, B, C, D)
    if not np.all(delta > 0):
        raise ContractError("scan step size delta must be strictly positive (apply softplus first)")
    return [np.ascontiguousarray(a, np.float64) for a in (u, delta, A, B, C, D)]


def scan_forward_np(u, delta, A, B, C, D) -> np.ndarray:
    """Raw kernel call on numpy arrays in kernel layout (no tape)."""
    u, delta, A, B, C, D = _prepare(u, delta, A, B, C, D)
    return _scan_fwd_kernel(u, delta, _decay(delta, A), B, C, D)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable scan over tensors in kernel layout (see module docstring)."""
    args = [as_tensor(t) for t in (u, delta, A, B, C, D)]
    ua, da, Aa, Ba, Ca, Dd = _prepare(*(t.data for t in args))
    dA = _decay(da, Aa)
    y = _scan_fwd_kernel(ua, da, dA, Ba, Ca, Dd)
    nb, ng, nd, nl = ua.shape
    ops._count_macs("scan", scan_macs(nb * ng, nd, nl, Aa.shape[-1]))

    def grad_fn(g):
        return _scan_bwd_kernel(ua, da, dA, Aa, Ba, Ca, Dd, np.ascontiguousarray(g, np.float64))

    return record("selective_scan", y, tuple(args), grad_fn)


def scan_macs(sequences: int, channels: int, length: int, nstate: int) -> int:
    """Multiply-accumulates of one scan: decay, input, and readout per state entry."""
    return 3 * sequences * channels * length * nstate


# ----------------------------------------------------------------- 1D API
@dataclass
class ScanParams:
    """Parameters of one scan over a (L, D) sequence.

    A is (D, Ns) with negative entries, B and C are (L, Ns), delta is (L, D)
    and positive, D_skip is (D,).
    """

    A: Tensor
    B: Tensor
    C: Tensor
    delta: Tensor
    D_skip: Tensor


def selective_scan_1d(u, p: ScanParams) -> Tensor:
    """Scan a single (L, D) sequence; differentiable in ``u`` and every parameter."""
    u = as_tensor(u)
    if u.ndim != 2:
        raise DimensionError(f"selective_scan_1d expects (L, D), got {u.shape}")
    L, D = u.shape
    A, B, C, delta, Dk = (as_tensor(t) for t in (p.A, p.B, p.C, p.delta, p.D_skip))
    if A.ndim != 2 or A.shape[0] != D:
        raise DimensionError(f"A must be (D={D}, Ns), got {A.shape}")
    ns = A.shape[1]
    for name, t, want in (("B", B, (L, ns)), ("C", C, (L, ns)), ("delta", delta, (L, D)), ("D_skip", Dk, (D,))):
        if t.shape != want:
            raise DimensionError(f"{name} shape {t.shape} != {want}")
    uk = u.transpose(1, 0).reshape(1, 1, D, L)
    dk = delta.transpose(1, 0).reshape(1, 1, D, L)
    y = selective_scan(uk, dk, A.reshape(1, D, ns), B.reshape(1, 1, L, ns),
                       C.reshape(1, 1, L, ns), Dk.reshape(1, D))
    return y.reshape(D, L).transpose(1, 0)


# ----------------------------------------------------------------- directions
ROW = 0
ROW_REV = 1
COL = 2
COL_REV = 3


def direction_permutations(h: int, w: int) -> np.ndarray:
    """(4, H*W) site orders: row-major, reversed, column-major, reversed."""
    grid = np.arange(h * w).reshape(h, w)
    row = grid.reshape(-1)
    col = grid.T.reshape(-1)
    return np.stack([row, row[::-1], col, col[::-1]])


def _inverse(perms: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perms)
    for k in range(perms.shape[0]):
        inv[k, perms[k]] = np.arange(perms.shape[1])
    return inv


@dataclass
class DirectionalSequences:
    """Four traversals of an (H, W) grid stored as (N, 4, C, H*W)."""

    seqs: Tensor
    size: tuple

    def path(self, k: int) -> Tensor:
        return self.seqs[:, k]


def gather_sites(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    perms = direction_permutations(h, w)
    inv = _inverse(perms)
    flat = x.data.reshape(n, c, h * w)
    out = np.stack([flat[:, :, p] for p in perms], axis=1)

    def grad_fn(g):
        acc = g[:, 0][:, :, inv[0]]
        for k in range(1, 4):
            acc = acc + g[:, k][:, :, inv[k]]
        return (acc.reshape(n, c, h, w),)

    return record("gather_sites", out, (x,), grad_fn)


def scatter_sites(y: Tensor, size: tuple, mean: bool = False) -> Tensor:
    n, k4, c, L = y.shape
    h, w = size
    if k4 != 4 or L != h * w:
        raise DimensionError(f"expected (N, 4, C, {h * w}) sequences, got {y.shape}")
    perms = direction_permutations(h, w)
    inv = _inverse(perms)
    w_ = 0.25 if mean else 1.0
    out = y.data[:, 0][:, :, inv[0]]
    for k in range(1, 4):
        out = out + y.data[:, k][:, :, inv[k]]
    if mean:
        out = out * w_

    def grad_fn(g):
        gf = g.reshape(n, c, L)
        gy = np.stack([gf[:, :, p] for p in perms], axis=1)
        return (gy * w_ if mean else gy,)

    return record("scatter_sites", out.reshape(n, c, h, w), (y,), grad_fn)


def expand_4dir(x: Tensor) -> DirectionalSequences:
    if x.ndim != 4:
        raise DimensionError(f"expand_4dir expects NCHW, got {x.shape}")
    return DirectionalSequences(gather_sites(x), tuple(x.shape[2:]))


def merge_4dir(ds: DirectionalSequences, mode: str = "sum") -> Tensor:
    if mode not in ("sum", "mean"):
        raise DimensionError(f"merge mode must be 'sum' or 'mean', got {mode!r}")
    return scatter_sites(ds.seqs, ds.size, mean=(mode == "mean"))


# ----------------------------------------------------------------- VSSM
def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class VSSM(nn.Module):
    """Projection, depthwise conv, four-way selective scan, norm, gated output."""

    def __init__(self, rng: np.random.Generator, channels: int, nstate: int = 8,
                 expand: int = 1, dt_rank=None, merge: str = "sum",
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.channels = channels
        self.nstate = nstate
        self.inner = inner = expand * channels
        self.rank = rank = dt_rank if dt_rank is not None else math.ceil(channels / 16)
        self.merge = merge
        self.in_proj = nn.Linear(rng, channels, 2 * inner, bias=False)
        self.dwconv = nn.Conv2d(rng, inner, inner, 3, groups=inner)
        self.x_proj = nn.Parameter(nn.uniform_init(rng, (4, rank + 2 * nstate, inner), inner))
        std = rank ** -0.5
        self.dt_weight = nn.Parameter(rng.uniform(-std, std, size=(4, inner, rank)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=(4, inner)))
        self.dt_bias = nn.Parameter(_inv_softplus(np.maximum(dt, 1e-4)))
        self.A_log = nn.Parameter(np.broadcast_to(np.log(np.arange(1, nstate + 1, dtype=np.float64)),
                                                  (4, inner, nstate)).copy())
        self.D = nn.Parameter(np.ones((4, inner)))
        self.norm = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(rng, inner, channels, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"VSSM expects (N, {self.channels}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        L = h * w
        xz = self.in_proj(x)
        x1, z = ops.split(xz, 2, axis=1)
        x1 = ops.silu(self.dwconv(x1))
        xs = gather_sites(x1)                                   # (n, 4, Din, L)
        proj = ops.matmul(self.x_proj, xs)                      # (n, 4, R+2Ns, L)
        dt_low, Bm, Cm = ops.split(proj, [self.rank, self.nstate, self.nstate], axis=2)
        dt = ops.matmul(self.dt_weight, dt_low)                 # (n, 4, Din, L)
        bias = ops.broadcast_to(self.dt_bias.reshape(1, 4, self.inner, 1), dt.shape)
        delta = ops.softplus(ops.add(dt, bias))
        A = ops.scale(ops.exp(self.A_log), -1.0)
        y = selective_scan(xs, delta, A, Bm.transpose(0, 1, 3, 2), Cm.transpose(0, 1, 3, 2), self.D)
        y = scatter_sites(y, (h, w), mean=(self.merge == "mean"))
        y = self.norm(y)
        y = ops.mul(y, ops.silu(z))
        return self.out_proj(y)

    def macs(self, n: int, h: int, w: int) -> dict:
        L = h * w
        din, c, r, ns = self.inner, self.channels, self.rank, self.nstate
        linear = n * L * (c * 2 * din + 4 * din * (r + 2 * ns) + 4 * din * r + din * c)
        conv = n * din * L * 9
        return {"conv": conv, "linear": linear, "scan": scan_macs(n * 4, din, L, ns)}
