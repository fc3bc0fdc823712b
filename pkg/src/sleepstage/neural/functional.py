"""Stateless forward/backward kernels for the staging network.

Convolution activations use a *time-major* layout ``(W, C, N)``: width
first, then feature maps, then rows (``N = batch * height``). In that
layout an FFT along axis 0 yields one ``(C, N)`` matrix per frequency bin,
so mixing channels is a single batched matmul with no transposes. The
public :func:`conv_forward` accepts the conventional ``(B, C, H, W)``
layout and converts.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from ..errors import ModeError, ShapeError
from . import _kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


# ---------------------------------------------------------------- layout


def to_time_major(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (W, C, B*H)."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(3, 1, 0, 2).reshape(w, c, b * h))


def from_time_major(x: np.ndarray, batch: int) -> np.ndarray:
    """(W, C, B*H) -> (B, C, H, W)."""
    w, c, n = x.shape
    return np.ascontiguousarray(x.reshape(w, c, batch, n // batch).transpose(2, 1, 3, 0))


# ---------------------------------------------------------------- convolution


def conv_plan(width: int, k: int) -> tuple[int, int]:
    """FFT length and output offset for a same-size correlation with a k-tap kernel."""
    return sfft.next_fast_len(width + k - 1, real=True), k - 1 - k // 2


def _spectrum(x: np.ndarray, width: int, n: int) -> np.ndarray:
    # rows beyond ``width`` of an n-row input are zero padding already in place
    if x.shape[0] == n:
        return sfft.rfft(x, axis=0)
    if x.shape[0] != width:
        raise ShapeError(f"expected {width} or {n} rows, got {x.shape[0]}")
    return sfft.rfft(x, n, axis=0)


def conv_tm_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, width: int | None = None):
    """Same-size 1xK cross-correlation in time-major layout.

    ``x`` is (W, C, N), ``weight`` is (F, C, 1, K) or (F, C, K). Returns the
    (W, F, N) output and the input spectrum, which the backward pass reuses.
    ``x`` may also arrive zero-padded to the FFT length if ``width`` names
    the true W.
    """
    w3 = weight.reshape(weight.shape[0], weight.shape[1], -1)
    f, c, k = w3.shape
    width = x.shape[0] if width is None else width
    if x.shape[1] != c:
        raise ShapeError(f"convolution expects {c} input maps, got {x.shape[1]}")
    n, offset = conv_plan(width, k)
    spec_x = _spectrum(x, width, n)
    spec_k = sfft.rfft(w3[:, :, ::-1], n, axis=-1).transpose(2, 0, 1)  # (nb, F, C)
    y = sfft.irfft(np.matmul(spec_k, spec_x), n, axis=0)[offset : offset + width]
    y += bias[None, :, None]
    return y, spec_x


def conv_tm_backward(g: np.ndarray, spec_x: np.ndarray, weight: np.ndarray, need_input: bool = True,
                     width: int | None = None):
    """Gradients of :func:`conv_tm_forward` w.r.t. weight, bias and (optionally) input.

    ``g`` may be zero-padded to the FFT length like the forward input.
    """
    w3 = weight.reshape(weight.shape[0], weight.shape[1], -1)
    f, c, k = w3.shape
    width = g.shape[0] if width is None else width
    n, offset = conv_plan(width, k)
    pad = k // 2
    spec_g = _spectrum(g, width, n)  # (nb, F, N)
    # d weight[f, c, j] = sum_t g[t] x[t - pad + j]: a cross-correlation at lags j - pad
    # conj(G) X^T = conj(G conj(X)^T); conjugating X is cheaper when C < F
    cross = sfft.irfft(np.matmul(spec_g, spec_x.conj().transpose(0, 2, 1)).conj(), n, axis=0)
    lags = np.arange(k) - pad
    dweight = cross[lags % n].transpose(1, 2, 0).reshape(weight.shape)
    dbias = g.sum(axis=(0, 2))
    dx = None
    if need_input:
        spec_k = sfft.rfft(w3, n, axis=-1).transpose(2, 1, 0)  # (nb, C, F)
        dx = sfft.irfft(np.matmul(spec_k, spec_g), n, axis=0)[pad : pad + width]
    return dweight, dbias, dx


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded, stride-1, same-size 1xK convolution.

    ``out[f, h, t] = bias[f] + sum_c sum_j x[c, h, t - K//2 + j] * weight[f, c, 0, j]``

    ``x`` is (C, H, W) or a batch (B, C, H, W); ``weight`` is (F, C, 1, K).
    """
    if weight.ndim != 4 or weight.shape[2] != 1:
        raise ShapeError(f"kernel must have shape (F, C, 1, K), got {weight.shape}")
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} does not match kernel {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
    y, _ = conv_tm_forward(to_time_major(xb), weight, bias)
    out = from_time_major(y, xb.shape[0])
    return out[0] if single else out


def conv_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Brute-force reference for :func:`conv_forward` on a (C, H, W) input."""
    c, h, w = x.shape
    f, _, _, k = weight.shape
    pad = k // 2
    out = np.zeros((f, h, w))
    for fi in range(f):
        for hi in range(h):
            for t in range(w):
                acc = bias[fi]
                for ci in range(c):
                    for j in range(k):
                        src = t - pad + j
                        if 0 <= src < w:
                            acc += x[ci, hi, src] * weight[fi, ci, 0, j]
                out[fi, hi, t] = acc
    return out


# ---------------------------------------------------------------- pointwise


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass ``g`` where the ReLU was active; ``x`` may be the ReLU input or output."""
    if g.ndim == 3 and g.flags.c_contiguous and x.flags.c_contiguous:
        return _kernels.masked(g, x)
    return np.where(x > 0, g, 0.0)


def avg_pool(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Non-overlapping mean of adjacent pairs along ``axis``; an odd tail is dropped."""
    x = np.moveaxis(x, axis, 0)
    m = x.shape[0] // 2
    out = 0.5 * (x[0 : 2 * m : 2] + x[1 : 2 * m : 2])
    return np.moveaxis(out, 0, axis)


def avg_pool_backward(g: np.ndarray, width: int, axis: int = -1) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    out = np.zeros((width,) + g.shape[1:])
    m = g.shape[0]
    out[0 : 2 * m : 2] = 0.5 * g
    out[1 : 2 * m : 2] = 0.5 * g
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------- batch norm


def batch_norm(x, gamma, beta, running_mean, running_var, train: bool, axis: int = 1,
               fused: bool = True):
    """Per-feature-map batch normalization.

    ``axis`` names the feature axis; statistics pool every other axis. In
    training mode returns ``(y, cache, new_mean, new_var)`` where the new
    running statistics follow ``r <- 0.9 r + 0.1 batch``; in inference mode
    returns ``(y, None, running_mean, running_var)``.
    """
    axes = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
    shape = [1] * x.ndim
    shape[axis] = -1
    if not train:
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        y = (x - running_mean.reshape(shape)) * (gamma * inv).reshape(shape) + beta.reshape(shape)
        return y, None, running_mean, running_var
    count = x.size // x.shape[axis]
    if count < 2:
        raise ModeError("batch normalization in training mode needs at least 2 values per map")
    if fused and x.ndim == 3 and axis % 3 == 1:
        x = np.ascontiguousarray(x)
        y, xhat, mean, var, inv = _kernels.bn_forward_train(x, gamma, beta, BN_EPS)
        new_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mean
        new_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var
        return y, (xhat, inv, "tm", None), new_mean, new_var
    mean = x.mean(axis=axes)
    xc = x - mean.reshape(shape)
    var = np.mean(xc * xc, axis=axes)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    new_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mean
    new_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var
    return y, (xhat, inv, axes, shape), new_mean, new_var


def batch_norm_backward(g, gamma, cache):
    xhat, inv, axes, shape = cache
    if axes == "tm":
        return _kernels.bn_backward(np.ascontiguousarray(g), xhat, gamma, inv)
    dgamma = np.sum(g * xhat, axis=axes)
    dbeta = np.sum(g, axis=axes)
    count = g.size // dgamma.size
    dxhat = g * gamma.reshape(shape)
    dx = (inv.reshape(shape) / count) * (
        count * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * np.sum(dxhat * xhat, axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- dense head


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``y = W x + b`` for a vector or a batch of row vectors; ``W`` is (out, in)."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"dense layer {weight.shape} with bias {bias.shape} cannot take input {x.shape}"
        )
    return x @ weight.T + bias


def dense_backward(g, x, weight):
    return g @ weight, g.T @ x, g.sum(axis=0)


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(y, mask)``; inference mode is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    if rng is None:
        raise ModeError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, target) -> np.ndarray:
    """``-ln p[target]`` with ``p`` floored at 1e-12. Works row-wise on batches."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target)
    n_classes = p.shape[-1]
    if np.any((target < 0) | (target >= n_classes)):
        raise ValueError(f"target label outside 0..{n_classes - 1}: {target}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("probabilities must sum to 1")
    picked = np.take_along_axis(p, target[..., None].astype(int), axis=-1)[..., 0] if p.ndim > 1 else p[int(target)]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def softmax_cross_entropy_backward(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. the softmax input."""
    g = p.copy()
    g[np.arange(len(target)), target] -= 1.0
    return g / len(target)


# ---------------------------------------------------------------- LSTM


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(seq: np.ndarray, w_x: np.ndarray, w_h: np.ndarray, bias: np.ndarray):
    """Unidirectional LSTM from a zero state.

    ``seq`` is (L, D) or a batch (B, L, D); ``w_x`` (D, 4H), ``w_h`` (H, 4H),
    ``bias`` (4H,) with gate blocks ordered i, f, g, o. Returns the hidden
    states with the same leading shape and a cache for
    :func:`lstm_backward`.
    """
    single = seq.ndim == 2
    xs = seq[None] if single else seq
    b, length, d = xs.shape
    if length == 0:
        raise ValueError("LSTM needs a non-empty sequence")
    hidden = w_h.shape[0]
    if w_x.shape != (d, 4 * hidden) or w_h.shape != (hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ShapeError("LSTM weight shapes are inconsistent")
    hs = np.zeros((b, length, hidden))
    cs = np.zeros((b, length, hidden))
    gates = np.zeros((b, length, 4 * hidden))
    h = np.zeros((b, hidden))
    c = np.zeros((b, hidden))
    proj = xs @ w_x + bias
    for t in range(length):
        z = proj[:, t] + h @ w_h
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden : 2 * hidden])
        g = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(z[:, 3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        hs[:, t] = h
        cs[:, t] = c
    cache = (xs, hs, cs, gates)
    return (hs[0] if single else hs), cache


def lstm_backward(dh: np.ndarray, cache, w_x: np.ndarray, w_h: np.ndarray):
    """Backpropagation through time. ``dh`` matches the forward output shape."""
    xs, hs, cs, gates = cache
    dh = dh[None] if dh.ndim == 2 else dh
    b, length, hidden = hs.shape
    dw_x = np.zeros_like(w_x)
    dw_h = np.zeros_like(w_h)
    dbias = np.zeros(4 * hidden)
    dxs = np.zeros_like(xs)
    dh_next = np.zeros((b, hidden))
    dc_next = np.zeros((b, hidden))
    for t in range(length - 1, -1, -1):
        i, f, g, o = np.split(gates[:, t], 4, axis=1)
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(c)
        h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(c)
        tc = np.tanh(c)
        dht = dh[:, t] + dh_next
        do = dht * tc
        dc = dht * o * (1 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dw_x += xs[:, t].T @ dz
        dw_h += h_prev.T @ dz
        dbias += dz.sum(axis=0)
        dxs[:, t] = dz @ w_x.T
        dh_next = dz @ w_h.T
        dc_next = dc * f
    return dxs, dw_x, dw_h, dbias


def lstm_reference(seq, w_x, w_h, bias):
    """Scalar, loop-per-unit LSTM recurrence used to cross-check :func:`lstm_forward`."""
    import math

    length, d = len(seq), len(seq[0])
    hidden = len(w_h)
    h = [0.0] * hidden
    c = [0.0] * hidden
    out = []
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    for t in range(length):
        z = []
        for j in range(4 * hidden):
            acc = bias[j]
            for a in range(d):
                acc += seq[t][a] * w_x[a][j]
            for a in range(hidden):
                acc += h[a] * w_h[a][j]
            z.append(acc)
        new_h = []
        for u in range(hidden):
            i = sig(z[u])
            f = sig(z[hidden + u])
            g = math.tanh(z[2 * hidden + u])
            o = sig(z[3 * hidden + u])
            c[u] = f * c[u] + i * g
            new_h.append(o * math.tanh(c[u]))
        h = new_h
        out.append(list(h))
    return out


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place ``theta <- theta - lr * grad`` for every registered parameter."""
    for name, value in params.items():
        value -= lr * grads[name]
