"""Layers with cached forward state, and a sequential container.

Each layer exposes ``params`` / ``grads`` dictionaries of float64 arrays,
``forward(x, train, rng)`` and ``backward(g)``. Buffers that are not
trained (batch-norm running statistics) live in ``buffers``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ModeError, ShapeError, StateError
from . import _kernels
from . import functional as F


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a training forward pass")
        return self._cache


class ToTimeMajor(Layer):
    """(B, C, H, W) -> (W, C, B*H); remembers B for the way back."""

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return F.to_time_major(x)

    def backward(self, g):
        shape = self._need_cache()
        return F.from_time_major(g, shape[0])


class Conv1xK(Layer):
    """Same-size 1xK convolution; ``width`` lets it accept FFT-padded inputs."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, first: bool = False,
                 width: int | None = None):
        super().__init__()
        self.params["weight"] = glorot(rng, (c_out, c_in, 1, k), c_in * k, c_out * k)
        self.params["bias"] = np.zeros(c_out)
        self.first = first  # input gradient not needed for the first layer
        self.width = width

    def forward(self, x, train=False, rng=None):
        y, spec_x = F.conv_tm_forward(x, self.params["weight"], self.params["bias"], self.width)
        self._cache = spec_x if train else None
        return y

    def backward(self, g):
        dw, db, dx = F.conv_tm_backward(g, self._need_cache(), self.params["weight"], not self.first,
                                        self.width)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        y = F.relu(x)
        self._cache = y if train else None
        return y

    def backward(self, g):
        return F.relu_backward(g, self._need_cache())


class BatchNorm(Layer):
    def __init__(self, n: int, axis: int = 1):
        super().__init__()
        self.axis = axis
        self.params["gamma"] = np.ones(n)
        self.params["beta"] = np.zeros(n)
        self.buffers["running_mean"] = np.zeros(n)
        self.buffers["running_var"] = np.ones(n)

    def forward(self, x, train=False, rng=None):
        y, cache, mean, var = F.batch_norm(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train, self.axis,
        )
        if train:
            self.buffers["running_mean"] = mean
            self.buffers["running_var"] = var
        self._cache = cache
        return y

    def backward(self, g):
        dx, self.grads["gamma"], self.grads["beta"] = F.batch_norm_backward(
            g, self.params["gamma"], self._need_cache()
        )
        return dx


class AvgPool(Layer):
    """Pairwise mean along the time axis (axis 0 of the time-major layout)."""

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape[0]
        return F.avg_pool(x, axis=0)

    def backward(self, g):
        return F.avg_pool_backward(g, self._need_cache(), axis=0)


class ReluBnPool(Layer):
    """ReLU, batch normalization and pairwise pooling in one pass over the data.

    Equivalent to ``ReLU`` -> ``BatchNorm(axis=1)`` -> ``AvgPool`` on a
    time-major (W, C, N) input; parameter and buffer names match
    :class:`BatchNorm`. The output is zero-padded to ``out_len`` rows and the
    input gradient to ``grad_len`` rows (default: the input width).
    """

    def __init__(self, n: int, out_len: int, grad_len: int | None = None):
        super().__init__()
        self.out_len = out_len
        self.grad_len = grad_len
        self.params["gamma"] = np.ones(n)
        self.params["beta"] = np.zeros(n)
        self.buffers["running_mean"] = np.zeros(n)
        self.buffers["running_var"] = np.ones(n)

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            self._cache = None
            return _kernels.block_forward_eval(
                np.ascontiguousarray(x), gamma, beta, self.buffers["running_mean"], self.buffers["running_var"],
                F.BN_EPS, self.out_len,
            )
        if x.shape[0] * x.shape[2] < 2:
            raise ModeError("batch normalization in training mode needs at least 2 values per map")
        x = np.ascontiguousarray(x)
        out, mean, var, inv = _kernels.block_forward_train(x, gamma, beta, F.BN_EPS, self.out_len)
        m = F.BN_MOMENTUM
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        self._cache = (x, mean, inv)
        return out

    def backward(self, g):
        z, mean, inv = self._need_cache()
        dz, self.grads["gamma"], self.grads["beta"] = _kernels.block_backward(
            np.ascontiguousarray(g), z, mean, inv, self.params["gamma"], self.grad_len or z.shape[0]
        )
        return dz

    def kink_mask(self):
        return None if self._cache is None else self._cache[0] > 0


class Flatten(Layer):
    """(W, C, B*H) -> (B, C*H*W), feature order (C, H, W)."""

    def __init__(self, batch_rows: int):
        super().__init__()
        self.rows = batch_rows

    def forward(self, x, train=False, rng=None):
        w, c, n = x.shape
        b = n // self.rows
        self._cache = (w, c, n, b)
        return x.reshape(w, c, b, self.rows).transpose(2, 1, 3, 0).reshape(b, -1)

    def backward(self, g):
        w, c, n, b = self._need_cache()
        return np.ascontiguousarray(
            g.reshape(b, c, self.rows, w).transpose(3, 1, 0, 2).reshape(w, c, n)
        )


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.params["weight"] = glorot(rng, (n_out, n_in), n_in, n_out)
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x, train=False, rng=None):
        self._cache = x if train else None
        return F.dense(x, self.params["weight"], self.params["bias"])

    def backward(self, g):
        dx, self.grads["weight"], self.grads["bias"] = F.dense_backward(
            g, self._need_cache(), self.params["weight"]
        )
        return dx


class Dropout(Layer):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, train=False, rng=None):
        y, mask = F.dropout(x, self.p, train, rng)
        self._cache = (mask,) if train else None
        return y

    def backward(self, g):
        (mask,) = self._need_cache()
        return g if mask is None else g * mask


class LSTM(Layer):
    """(B, L, D) -> (B, L, H)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.params["w_x"] = glorot(rng, (n_in, 4 * hidden), n_in, hidden)
        self.params["w_h"] = glorot(rng, (hidden, 4 * hidden), hidden, hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate
        self.params["bias"] = bias

    def forward(self, x, train=False, rng=None):
        hs, cache = F.lstm_forward(x, self.params["w_x"], self.params["w_h"], self.params["bias"])
        self._cache = cache if train else None
        return hs

    def backward(self, g):
        dx, self.grads["w_x"], self.grads["w_h"], self.grads["bias"] = F.lstm_backward(
            g, self._need_cache(), self.params["w_x"], self.params["w_h"]
        )
        return dx


class LastStep(Layer):
    """(B, L, H) -> (B, H): keep the final time step."""

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x[:, -1]

    def backward(self, g):
        out = np.zeros(self._need_cache())
        out[:, -1] = g
        return out


class Lift(Layer):
    """(B, H, W) -> (B, 1, H, W)."""

    def forward(self, x, train=False, rng=None):
        return x[:, None]

    def backward(self, g):
        return g[:, 0]


class Unroll(Layer):
    """(B, L, H, W) -> (B*L, 1, H, W): every epoch of every sequence through the CNN."""

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        b, length, h, w = x.shape
        return x.reshape(b * length, 1, h, w)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Regroup(Layer):
    """(B*L, D) -> (B, L, D)."""

    def __init__(self, length: int):
        super().__init__()
        self.length = length

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0] // self.length, self.length, x.shape[1])

    def backward(self, g):
        return g.reshape(self._need_cache())


class Sequential:
    """Named layers applied in order.

    ``forward`` returns logits; :meth:`loss_and_backward` adds softmax,
    mean cross-entropy and the full backward sweep.
    """

    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers
        self._trained_forward = False

    def __iter__(self):
        return iter(self.layers)

    def forward(self, x, train: bool = False, rng=None, upto: str | None = None,
                start: str | None = None):
        """Run the layers in order, optionally from layer ``start`` through ``upto``."""
        if train and x.shape[0] < 2:
            raise ModeError("training mode needs a batch of at least 2 patterns")
        if start is not None and (upto is not None or train):
            raise StateError("partial forward passes are inference-only and run to the end")
        running = start is None
        for name, layer in self.layers:
            if not running:
                if name != start:
                    continue
                running = True
            x = layer.forward(x, train, rng)
            if name == upto:
                break
        self._trained_forward = train
        return x

    def backward(self, g):
        if not self._trained_forward:
            raise StateError("backward requires a preceding training-mode forward pass")
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:  # first convolution skips the input gradient
                break
        self._trained_forward = False
        return g

    def loss_and_backward(self, x, target, rng=None) -> float:
        logits = self.forward(x, train=True, rng=rng)
        p = F.softmax(logits)
        loss = float(np.mean(F.cross_entropy(p, target)))
        self.backward(F.softmax_cross_entropy_backward(p, np.asarray(target)))
        return loss

    # registry views -------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for n, layer in self.layers:
            for k in layer.params:
                if k not in layer.grads:
                    raise StateError(f"no gradient for {n}.{k}")
                out[f"{n}.{k}"] = layer.grads[k]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers, in registry order."""
        out = {}
        for n, layer in self.layers:
            for k, v in layer.params.items():
                out[f"{n}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{n}.{k}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in list(store):
                    key = f"{n}.{k}"
                    if key not in state:
                        raise ShapeError(f"state lacks {key}")
                    if state[key].shape != store[k].shape:
                        raise ShapeError(
                            f"{key}: expected shape {store[k].shape}, got {state[key].shape}"
                        )
                    store[k][...] = state[key]

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for n, layer in self.layers:
            for k in layer.buffers:
                layer.buffers[k] = buffers[f"{n}.{k}"].copy()

    def kink_signature(self) -> bytes:
        """Sign pattern of every ReLU input from the last training forward."""
        parts = []
        for _, layer in self.layers:
            if isinstance(layer, ReLU) and layer._cache is not None:
                parts.append(np.packbits(layer._cache > 0).tobytes())
            elif isinstance(layer, ReluBnPool) and layer.kink_mask() is not None:
                parts.append(np.packbits(layer.kink_mask()).tobytes())
        return b"".join(parts)

    def clear_grads(self) -> None:
        for _, layer in self.layers:
            layer.grads.clear()
