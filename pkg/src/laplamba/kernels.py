"""Compiled inner loops for depthwise convolution.

The kernels take a pre-padded input ``xp`` (N, C, Hp, Wp) and per-channel
weights ``w`` (C, KH, KW), and walk each plane tap by tap over contiguous rows.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(xp, w, s, d, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n, c, oh, ow), xp.dtype)
    for b in range(n):
        for ch in range(c):
            xc = xp[b, ch]
            oc = out[b, ch]
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    off = j * d
                    for y in range(oh):
                        xr = xc[y * s + i * d]
                        orow = oc[y]
                        if s == 1:
                            for x in range(ow):
                                orow[x] += wv * xr[x + off]
                        else:
                            for x in range(ow):
                                orow[x] += wv * xr[x * s + off]
    return out


@numba.njit(cache=True)
def dw_backward(g, xp, w, s, d):
    n, c, oh, ow = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for ch in range(c):
            xc = xp[b, ch]
            gc = g[b, ch]
            gxc = gxp[b, ch]
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    off = j * d
                    acc = 0.0
                    for y in range(oh):
                        yy = y * s + i * d
                        xr = xc[yy]
                        gr = gc[y]
                        gxr = gxc[yy]
                        for x in range(ow):
                            gv = gr[x]
                            acc += gv * xr[x * s + off]
                            gxr[x * s + off] += gv * wv
                    gw[ch, i, j] += acc
    return gxp, gw


# Reassociation lets LLVM vectorize the 3x3 stencils; NaN/Inf semantics are kept.
_FM = {"reassoc", "contract"}


@numba.njit(cache=True, fastmath=_FM)
def dw3_forward(xp, w, oh, ow):
    """3x3, stride 1, dilation 1 depthwise correlation with constant tap offsets."""
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, c, oh, ow), xp.dtype)
    for b in range(n):
        for ch in range(c):
            w00 = w[ch, 0, 0]
            w01 = w[ch, 0, 1]
            w02 = w[ch, 0, 2]
            w10 = w[ch, 1, 0]
            w11 = w[ch, 1, 1]
            w12 = w[ch, 1, 2]
            w20 = w[ch, 2, 0]
            w21 = w[ch, 2, 1]
            w22 = w[ch, 2, 2]
            for y in range(oh):
                for x in range(ow):
                    out[b, ch, y, x] = (
                        w00 * xp[b, ch, y, x] + w01 * xp[b, ch, y, x + 1] + w02 * xp[b, ch, y, x + 2]
                        + w10 * xp[b, ch, y + 1, x] + w11 * xp[b, ch, y + 1, x + 1]
                        + w12 * xp[b, ch, y + 1, x + 2]
                        + w20 * xp[b, ch, y + 2, x] + w21 * xp[b, ch, y + 2, x + 1]
                        + w22 * xp[b, ch, y + 2, x + 2]
                    )
    return out


@numba.njit(cache=True, fastmath=_FM)
def dw3_weight_grad(g, xp):
    n, c, oh, ow = g.shape
    gw = np.zeros((c, 3, 3), xp.dtype)
    for b in range(n):
        for ch in range(c):
            a00 = a01 = a02 = a10 = a11 = a12 = a20 = a21 = a22 = 0.0
            for y in range(oh):
                for x in range(ow):
                    gv = g[b, ch, y, x]
                    a00 += gv * xp[b, ch, y, x]
                    a01 += gv * xp[b, ch, y, x + 1]
                    a02 += gv * xp[b, ch, y, x + 2]
                    a10 += gv * xp[b, ch, y + 1, x]
                    a11 += gv * xp[b, ch, y + 1, x + 1]
                    a12 += gv * xp[b, ch, y + 1, x + 2]
                    a20 += gv * xp[b, ch, y + 2, x]
                    a21 += gv * xp[b, ch, y + 2, x + 1]
                    a22 += gv * xp[b, ch, y + 2, x + 2]
            gw[ch, 0, 0] += a00
            gw[ch, 0, 1] += a01
            gw[ch, 0, 2] += a02
            gw[ch, 1, 0] += a10
            gw[ch, 1, 1] += a11
            gw[ch, 1, 2] += a12
            gw[ch, 2, 0] += a20
            gw[ch, 2, 1] += a21
            gw[ch, 2, 2] += a22
    return gw


def dw3_backward(g, xp, w):
    # input gradient: full correlation of the gradient with the flipped kernel
    gp = np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2)))
    gxp = dw3_forward(gp, np.ascontiguousarray(w[:, ::-1, ::-1]), xp.shape[2], xp.shape[3])
    return gxp, dw3_weight_grad(g, xp)


@numba.njit(cache=True, fastmath=_FM)
def col2im(cols, c, kh, kw, s, d, hp, wp):
    """Adjoint of the patch matrix: sum (N, C*KH*KW, oh, ow) rows back onto (N, C, Hp, Wp)."""
    n, oh, ow = cols.shape[0], cols.shape[2], cols.shape[3]
    gx = np.zeros((n, c, hp, wp), cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    src = cols[b, (ch * kh + i) * kw + j]
                    for r in range(oh):
                        dst = gx[b, ch, r * s + i * d]
                        sr = src[r]
                        for q in range(ow):
                            dst[q * s + j * d] += sr[q]
    return gx


@numba.njit(cache=True, fastmath=_FM)
def ln_forward(x, gamma, beta, eps):
    """Normalize (P, C, S) over C; returns output, normalized input, inverse std (P, S)."""
    p, c, s = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((p, s), x.dtype)
    mu = np.empty(s, x.dtype)
    var = np.empty(s, x.dtype)
    for b in range(p):
        mu[:] = 0.0
        var[:] = 0.0
        for ch in range(c):
            for k in range(s):
                mu[k] += x[b, ch, k]
        for k in range(s):
            mu[k] /= c
        for ch in range(c):
            for k in range(s):
                dv = x[b, ch, k] - mu[k]
                xhat[b, ch, k] = dv
                var[k] += dv * dv
        for k in range(s):
            rstd[b, k] = 1.0 / np.sqrt(var[k] / c + eps)
        for ch in range(c):
            gm = gamma[ch]
            bt = beta[ch]
            for k in range(s):
                xh = xhat[b, ch, k] * rstd[b, k]
                xhat[b, ch, k] = xh
                out[b, ch, k] = xh * gm + bt
    return out, xhat, rstd


@numba.njit(cache=True, fastmath=_FM)
def ln_backward(g, xhat, rstd, gamma):
    p, c, s = g.shape
    gx = np.empty_like(g)
    gg = np.zeros(c, g.dtype)
    gb = np.zeros(c, g.dtype)
    m1 = np.empty(s, g.dtype)
    m2 = np.empty(s, g.dtype)
    for b in range(p):
        m1[:] = 0.0
        m2[:] = 0.0
        for ch in range(c):
            gm = gamma[ch]
            a1 = 0.0
            a2 = 0.0
            for k in range(s):
                gv = g[b, ch, k]
                xh = xhat[b, ch, k]
                t = gv * gm
                m1[k] += t
                m2[k] += t * xh
                a1 += gv * xh
                a2 += gv
            gg[ch] += a1
            gb[ch] += a2
        for k in range(s):
            m1[k] /= c
            m2[k] /= c
        for ch in range(c):
            gm = gamma[ch]
            for k in range(s):
                gx[b, ch, k] = rstd[b, k] * (g[b, ch, k] * gm - m1[k] - xhat[b, ch, k] * m2[k])
    return gx, gg, gb


@numba.njit(cache=True)
def pool_sum(x, k):
    """Sum over non-overlapping k x k patches of (P, H, W)."""
    p, h, w = x.shape
    out = np.zeros((p, h // k, w // k), x.dtype)
    for b in range(p):
        for y in range(h):
            yo = y // k
            for q in range(w):
                out[b, yo, q // k] += x[b, y, q]
    return out


@numba.njit(cache=True)
def repeat_nearest(x, k):
    p, h, w = x.shape
    out = np.empty((p, h * k, w * k), x.dtype)
    for b in range(p):
        for y in range(h * k):
            yi = y // k
            for q in range(w * k):
                out[b, y, q] = x[b, yi, q // k]
    return out


@numba.njit(cache=True)
def all_finite(x):
    for k in range(x.size):
        if not np.isfinite(x[k]):
            return False
    return True


@numba.njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place bias-corrected Adam step on flat views; same arithmetic as the numpy form."""
    for k in range(p.size):
        gk = g[k]
        mk = m[k] * b1 + (1.0 - b1) * gk
        vk = v[k] * b2 + (1.0 - b2) * (gk * gk)
        m[k] = mk
        v[k] = vk
        p[k] -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
