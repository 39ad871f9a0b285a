"""Compiled loops for the ops numpy handles poorly (depthwise conv, fused activations).

Loop order is fixed, so results are bit-reproducible run to run.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for a in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, 0, i, j]
                    for y in range(ho):
                        row = i + stride * y
                        for x in range(wo):
                            out[a, ch, y, x] += xp[a, ch, row, j + stride * x] * wv
    return out


@numba.njit(cache=True)
def depthwise_grad_weight(g, xp, kh, kw, stride):
    n, c, ho, wo = g.shape
    gw = np.zeros((c, 1, kh, kw), dtype=xp.dtype)
    for a in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for y in range(ho):
                        row = i + stride * y
                        for x in range(wo):
                            acc += g[a, ch, y, x] * xp[a, ch, row, j + stride * x]
                    gw[ch, 0, i, j] += acc
    return gw


@numba.njit(cache=True)
def depthwise_grad_input(g, w, padded_shape, stride):
    n, c, ho, wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for a in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, 0, i, j]
                    for y in range(ho):
                        row = i + stride * y
                        for x in range(wo):
                            gxp[a, ch, row, j + stride * x] += g[a, ch, y, x] * wv
    return gxp


@numba.njit(cache=True)
def silu_backward(g, x, sig):
    gf, xf, sf = g.ravel(), x.ravel(), sig.ravel()
    out = np.empty_like(gf)
    for i in range(gf.size):
        s = sf[i]
        out[i] = gf[i] * (s * (1.0 + xf[i] * (1.0 - s)))
    return out.reshape(g.shape)


@numba.njit(cache=True)
def channel_stats(x):
    """Per-channel mean and biased variance of an NCHW array (float64 accumulation)."""
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for a in range(n):
            for y in range(h):
                for z in range(w):
                    acc += x[a, ch, y, z]
        mu = acc / m
        acc2 = 0.0
        for a in range(n):
            for y in range(h):
                for z in range(w):
                    d = x[a, ch, y, z] - mu
                    acc2 += d * d
        mean[ch] = mu
        var[ch] = acc2 / m
    return mean, var


@numba.njit(cache=True)
def bn_apply(x, mean, inv_std, gamma, beta):
    """Return (normalized, affine output)."""
    n, c, h, w = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for a in range(n):
        for ch in range(c):
            mu, s, gm, bt = mean[ch], inv_std[ch], gamma[ch], beta[ch]
            for y in range(h):
                for z in range(w):
                    v = (x[a, ch, y, z] - mu) * s
                    xhat[a, ch, y, z] = v
                    out[a, ch, y, z] = v * gm + bt
    return xhat, out


@numba.njit(cache=True)
def bn_backward(g, xhat, gamma, inv_std, training):
    """Gradients (x, gamma, beta); with ``training`` the batch statistics are differentiated too."""
    n, c, h, w = g.shape
    m = n * h * w
    gx = np.empty_like(g)
    ggamma = np.zeros(c, dtype=gamma.dtype)
    gbeta = np.zeros(c, dtype=gamma.dtype)
    for ch in range(c):
        sg = 0.0
        sgx = 0.0
        for a in range(n):
            for y in range(h):
                for z in range(w):
                    gv = g[a, ch, y, z]
                    sg += gv
                    sgx += gv * xhat[a, ch, y, z]
        gbeta[ch] = sg
        ggamma[ch] = sgx
        gm, s = gamma[ch], inv_std[ch]
        if training:
            # dxhat = g * gamma, so its means are gamma * sg / m and gamma * sgx / m
            mean_d = gm * sg / m
            mean_dx = gm * sgx / m
            for a in range(n):
                for y in range(h):
                    for z in range(w):
                        gx[a, ch, y, z] = (g[a, ch, y, z] * gm - mean_d - xhat[a, ch, y, z] * mean_dx) * s
        else:
            for a in range(n):
                for y in range(h):
                    for z in range(w):
                        gx[a, ch, y, z] = g[a, ch, y, z] * gm * s
    return gx, ggamma, gbeta
