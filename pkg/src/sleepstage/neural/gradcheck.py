"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .layers import Sequential


class GradCheckResult(NamedTuple):
    max_rel_error: float
    where: str
    checked: int
    skipped: int  # coordinates whose every probe step crossed a ReLU kink


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)


def gradient_check(
    loss_fn: Callable[[], float | tuple[float, object]],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    eps: float = 1e-4,
    max_per_param: int | None = 40,
    seed: int = 0,
    shrink_steps: int = 3,
) -> GradCheckResult:
    """Compare ``grads`` with central differences of ``loss_fn``.

    ``loss_fn`` recomputes the loss from the current contents of ``params``,
    which are perturbed in place and restored. It must be deterministic.
    The probe step for entry ``theta`` is ``eps * max(1, |theta|)``. Tensors
    larger than ``max_per_param`` are probed at that many random entries.

    ``loss_fn`` may return ``(loss, signature)`` where ``signature`` is the
    activation pattern of every piecewise-linear unit. If either probe changes
    the signature, the difference quotient straddles a kink and is not a
    derivative; the step is divided by 10 up to ``shrink_steps`` times and the
    coordinate is skipped (and counted) if it still straddles one.
    """

    def call():
        out = loss_fn()
        return out if isinstance(out, tuple) else (out, None)

    rng = np.random.default_rng(seed)
    _, base_sig = call()
    worst, where, checked, skipped = 0.0, "", 0, 0
    for name, value in params.items():
        flat = value.reshape(-1)
        gflat = grads[name].reshape(-1)
        if max_per_param is None or flat.size <= max_per_param:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            numeric = None
            for _ in range(shrink_steps + 1):
                flat[i] = orig + h
                up, sig_up = call()
                flat[i] = orig - h
                down, sig_down = call()
                flat[i] = orig
                if base_sig is None or (sig_up == base_sig and sig_down == base_sig):
                    numeric = (up - down) / (2 * h)
                    break
                h /= 10
            if numeric is None:
                skipped += 1
                continue
            checked += 1
            err = relative_error(gflat[i], numeric)
            if err > worst:
                worst, where = err, f"{name}{np.unravel_index(i, value.shape)}"
    return GradCheckResult(worst, where, checked, skipped)


def check_network(net, x, target, eps: float = 1e-4, max_per_param: int | None = 40,
                  seed: int = 0, dropout_seed: int = 1234) -> GradCheckResult:
    """Gradient check of a whole model (mean cross-entropy over the batch).

    ``net`` needs ``loss_and_backward(x, target, rng)``, ``parameters()``,
    ``gradients()``, ``buffers()``/``set_buffers()`` and may offer
    ``kink_signature()``. Dropout masks are frozen by re-seeding, and
    batch-norm running statistics are restored after every evaluation.
    """
    buffers = {k: v.copy() for k, v in net.buffers().items()}
    signature = getattr(net, "kink_signature", None)

    def loss_fn():
        loss = net.loss_and_backward(x, target, rng=np.random.default_rng(dropout_seed))
        net.set_buffers(buffers)
        return (loss, signature()) if signature else loss

    loss_fn()
    grads = {k: v.copy() for k, v in net.gradients().items()}
    return gradient_check(loss_fn, net.parameters(), grads, eps, max_per_param, seed)


def check_layer(layer, x: np.ndarray, eps: float = 1e-5, max_per_param: int | None = 30, seed: int = 0,
                dropout_seed: int = 1) -> GradCheckResult:
    """Gradient check of one layer's parameters and input.

    The scalar objective is ``sum(layer(x) * r)`` for a fixed random ``r`` of
    the output's shape, evaluated in training mode with a frozen dropout mask.
    """
    rng = np.random.default_rng(seed)
    wrapped = Sequential([("layer", layer)])
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x, train=True, rng=np.random.default_rng(dropout_seed))
    r = rng.normal(size=y.shape)
    dx = layer.backward(r)
    params = dict(layer.params)
    grads = {k: layer.grads[k].copy() for k in params}
    if dx is not None:
        # time-major layers may carry padding rows that have no gradient
        n = min(len(x), len(dx))
        params["input"] = x[:n]
        grads["input"] = dx[:n]
    buffers = {k: v.copy() for k, v in layer.buffers.items()}

    def loss():
        out = layer.forward(x, train=True, rng=np.random.default_rng(dropout_seed))
        layer.buffers.update({k: v.copy() for k, v in buffers.items()})
        return float(np.sum(out * r)), wrapped.kink_signature()

    return gradient_check(loss, params, grads, eps=eps, max_per_param=max_per_param, seed=seed)
