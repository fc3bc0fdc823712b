"""Fused loops over time-major (W, C, N) activations.

Plain numpy reduces over axes (0, 2) of a (W, C, N) array through strided
temporaries; these loops do each batch-norm pass in one sweep with the
contiguous N axis innermost. Summation order is fixed, so results are
deterministic.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def channel_sums(x):
    w, c, n = x.shape
    s = np.zeros(c)
    for t in range(w):
        for ch in range(c):
            acc = 0.0
            for i in range(n):
                acc += x[t, ch, i]
            s[ch] += acc
    return s


@numba.njit(cache=True)
def bn_forward_train(x, gamma, beta, eps):
    w, c, n = x.shape
    count = w * n
    mean = channel_sums(x) / count
    var = np.zeros(c)
    for t in range(w):
        for ch in range(c):
            m = mean[ch]
            acc = 0.0
            for i in range(n):
                d = x[t, ch, i] - m
                acc += d * d
            var[ch] += acc
    var /= count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    y = np.empty_like(x)
    for t in range(w):
        for ch in range(c):
            m = mean[ch]
            s = inv[ch]
            g = gamma[ch]
            b = beta[ch]
            for i in range(n):
                v = (x[t, ch, i] - m) * s
                xhat[t, ch, i] = v
                y[t, ch, i] = v * g + b
    return y, xhat, mean, var, inv


@numba.njit(cache=True)
def bn_backward(g, xhat, gamma, inv):
    w, c, n = g.shape
    count = w * n
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for t in range(w):
        for ch in range(c):
            a = 0.0
            b = 0.0
            for i in range(n):
                gi = g[t, ch, i]
                a += gi
                b += gi * xhat[t, ch, i]
            dbeta[ch] += a
            dgamma[ch] += b
    dx = np.empty_like(g)
    for t in range(w):
        for ch in range(c):
            k = gamma[ch] * inv[ch] / count
            mb = dbeta[ch]
            mg = dgamma[ch]
            for i in range(n):
                dx[t, ch, i] = k * (count * g[t, ch, i] - mb - xhat[t, ch, i] * mg)
    return dx, dgamma, dbeta


@numba.njit(cache=True)
def masked(g, y):
    """``g`` where ``y > 0``, else 0 (ReLU backward from the ReLU output)."""
    out = np.empty_like(g)
    gf = g.ravel()
    yf = y.ravel()
    of = out.ravel()
    for i in range(gf.size):
        of[i] = gf[i] if yf[i] > 0.0 else 0.0
    return out


# ------------------------------------------------ fused ReLU -> batch norm -> pool
#
# ``z`` is a convolution output (W, C, N). The pooled result is written into
# a zero-initialized array of ``out_len`` >= W // 2 rows so the next layer's
# FFT can consume it without a padding copy. The backward pass recomputes the
# normalized activations from ``z`` instead of storing them. Reductions may be
# reassociated for vectorization; elementwise arithmetic is exact IEEE.

_FM = {"reassoc", "nsz"}


@numba.njit(cache=True, fastmath=_FM)
def _relu_moments(z):
    w, c, n = z.shape
    count = w * n
    mean = np.zeros(c)
    for t in range(w):
        for ch in range(c):
            row = z[t, ch]
            acc = 0.0
            for i in range(n):
                acc += max(row[i], 0.0)
            mean[ch] += acc
    mean /= count
    var = np.zeros(c)
    for t in range(w):
        for ch in range(c):
            row = z[t, ch]
            m = mean[ch]
            acc = 0.0
            for i in range(n):
                d = max(row[i], 0.0) - m
                acc += d * d
            var[ch] += acc
    var /= count
    return mean, var


@numba.njit(cache=True, fastmath=_FM)
def _affine_pool(z, scale, shift, out_len):
    # out[t // 2] = mean over the pair of relu(z) * scale + shift
    w, c, n = z.shape
    out = np.zeros((out_len, c, n))
    for t in range(0, 2 * (w // 2), 2):
        for ch in range(c):
            r0 = z[t, ch]
            r1 = z[t + 1, ch]
            o = out[t // 2, ch]
            a = scale[ch]
            b = shift[ch]
            for i in range(n):
                o[i] = 0.5 * ((max(r0[i], 0.0) * a + b) + (max(r1[i], 0.0) * a + b))
    return out


@numba.njit(cache=True)
def block_forward_train(z, gamma, beta, eps, out_len):
    mean, var = _relu_moments(z)
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv
    shift = beta - mean * scale
    return _affine_pool(z, scale, shift, out_len), mean, var, inv


@numba.njit(cache=True)
def block_forward_eval(z, gamma, beta, running_mean, running_var, eps, out_len):
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    return _affine_pool(z, scale, shift, out_len)


@numba.njit(cache=True, fastmath=_FM)
def block_backward(gp, z, mean, inv, gamma, out_len):
    """Gradient w.r.t. the convolution output ``z``, zero-padded to ``out_len`` rows."""
    w, c, n = z.shape
    count = w * n
    pairs = 2 * (w // 2)
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for t in range(pairs):
        for ch in range(c):
            g = gp[t // 2, ch]
            r = z[t, ch]
            m = mean[ch]
            s = inv[ch]
            a = 0.0
            b = 0.0
            for i in range(n):
                gy = 0.5 * g[i]
                a += gy
                b += gy * ((max(r[i], 0.0) - m) * s)
            dbeta[ch] += a
            dgamma[ch] += b
    dz = np.zeros((out_len, c, n))
    for t in range(w):
        for ch in range(c):
            r = z[t, ch]
            d = dz[t, ch]
            m = mean[ch]
            s = inv[ch]
            k = gamma[ch] * s / count
            mb = dbeta[ch]
            mg = dgamma[ch]
            if t < pairs:
                g = gp[t // 2, ch]
                for i in range(n):
                    v = r[i]
                    val = k * (count * (0.5 * g[i]) - mb - ((v - m) * s) * mg)
                    d[i] = val if v > 0.0 else 0.0
            else:
                for i in range(n):
                    v = r[i]
                    val = k * (-mb - ((v - m) * s) * mg)
                    d[i] = val if v > 0.0 else 0.0
    return dz, dgamma, dbeta
