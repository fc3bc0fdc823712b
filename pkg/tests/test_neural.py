from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sleepstage.errors import DataError, ModeError, ShapeError, StateError
from sleepstage.neural import functional as F
from sleepstage.neural import layers as nl
from sleepstage.neural import serialize
from sleepstage.neural.gradcheck import check_layer, gradient_check, relative_error

TOL = 1e-6


def layer_check(layer, x, seed=0):
    return check_layer(layer, x, seed=seed)


# ---------------------------------------------------------------- convolution


@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(3, 25), st.integers(1, 9),
    st.integers(0, 2**31),
)
def test_conv_matches_direct_sum(c, f, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    wt = rng.normal(size=(f, c, 1, k))
    b = rng.normal(size=f)
    np.testing.assert_allclose(F.conv_forward(x, wt, b), F.conv_direct(x, wt, b), atol=1e-10)


def test_conv_hand_example():
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    wt = np.array([[[[1.0, 0.0, -1.0]]]])
    # out[t] = x[t-1] - x[t+1], zero padded
    np.testing.assert_allclose(F.conv_forward(x, wt, np.zeros(1))[0, 0], [-2.0, -2.0, -2.0, 3.0])


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        F.conv_forward(rng.normal(size=(2, 1, 5)), rng.normal(size=(1, 3, 1, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        F.conv_forward(rng.normal(size=(1, 1, 5)), rng.normal(size=(1, 1, 3)), np.zeros(1))


def test_conv_accepts_padded_input(rng):
    x = rng.normal(size=(40, 2, 3))
    wt = rng.normal(size=(4, 2, 1, 7))
    n, _ = F.conv_plan(40, 7)
    padded = np.zeros((n, 2, 3))
    padded[:40] = x
    a, _ = F.conv_tm_forward(x, wt, np.zeros(4))
    b, _ = F.conv_tm_forward(padded, wt, np.zeros(4), width=40)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("k", [1, 4, 10])
def test_conv_layer_gradients(rng, k):
    layer = nl.Conv1xK(2, 3, k, rng)
    res = layer_check(layer, rng.normal(size=(30, 2, 4)))
    assert res.max_rel_error < TOL, res


# ---------------------------------------------------------------- pointwise and pooling


def test_relu_and_pool():
    np.testing.assert_array_equal(F.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(F.avg_pool(np.array([1.0, 3.0, 5.0, 7.0, 9.0])), [2.0, 6.0])
    g = F.avg_pool_backward(np.array([2.0, 4.0]), 5)
    np.testing.assert_array_equal(g, [1.0, 1.0, 2.0, 2.0, 0.0])


def test_relu_and_pool_gradients(rng):
    assert layer_check(nl.ReLU(), rng.normal(size=(9, 2, 3))).max_rel_error < TOL
    assert layer_check(nl.AvgPool(), rng.normal(size=(9, 2, 3))).max_rel_error < TOL


# ---------------------------------------------------------------- batch norm


def test_batch_norm_matches_formula(rng):
    x = rng.normal(2.0, 3.0, size=(20, 3, 5))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    y, _, mean, var = F.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=True, fused=False)
    mu = x.mean(axis=(0, 2))
    sd = np.sqrt(x.var(axis=(0, 2)) + F.BN_EPS)
    ref = (x - mu[None, :, None]) / sd[None, :, None] * gamma[None, :, None] + beta[None, :, None]
    np.testing.assert_allclose(y, ref, atol=1e-12)
    np.testing.assert_allclose(mean, 0.1 * mu)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2)))


def test_batch_norm_fused_kernel_agrees(rng):
    x = rng.normal(size=(31, 4, 6))
    g, b = rng.normal(size=4), rng.normal(size=4)
    ya, ca, ma, va = F.batch_norm(x, g, b, np.zeros(4), np.ones(4), True, fused=True)
    yb, cb, mb, vb = F.batch_norm(x, g, b, np.zeros(4), np.ones(4), True, fused=False)
    np.testing.assert_allclose(ya, yb, atol=1e-12)
    np.testing.assert_allclose(ma, mb, atol=1e-14)
    r = rng.normal(size=x.shape)
    for a, bb in zip(F.batch_norm_backward(r, g, ca), F.batch_norm_backward(r, g, cb)):
        np.testing.assert_allclose(a, bb, atol=1e-11)


def test_batch_norm_inference_uses_running_stats(rng):
    x = rng.normal(size=(5, 2, 3))
    y, cache, _, _ = F.batch_norm(x, np.ones(2), np.zeros(2), np.array([1.0, -1.0]), np.array([4.0, 1.0]),
                                  train=False)
    assert cache is None
    np.testing.assert_allclose(y[:, 0], (x[:, 0] - 1.0) / np.sqrt(4.0 + F.BN_EPS))


def test_batch_norm_needs_two_values():
    with pytest.raises(ModeError):
        F.batch_norm(np.ones((1, 2, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_batch_norm_gradients(rng):
    layer = nl.BatchNorm(3)
    layer.params["gamma"] = rng.normal(size=3)
    assert layer_check(layer, rng.normal(size=(12, 3, 4))).max_rel_error < TOL


@pytest.mark.parametrize("width", [16, 17])
def test_fused_block_matches_layer_chain(rng, width):
    z = rng.normal(size=(width, 3, 5))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    fused = nl.ReluBnPool(3, width // 2 + 4, width + 2)
    chain = [nl.ReLU(), nl.BatchNorm(3), nl.AvgPool()]
    for layer in (fused, chain[1]):
        layer.params["gamma"] = gamma.copy()
        layer.params["beta"] = beta.copy()
    a = fused.forward(z, train=True)
    b = z
    for layer in chain:
        b = layer.forward(b, train=True)
    np.testing.assert_allclose(a[: width // 2], b, atol=1e-12)
    np.testing.assert_array_equal(a[width // 2 :], 0.0)
    np.testing.assert_allclose(fused.buffers["running_var"], chain[1].buffers["running_var"], atol=1e-14)
    r = rng.normal(size=b.shape)
    rp = np.zeros(a.shape)
    rp[: width // 2] = r
    da = fused.backward(rp)
    db = r
    for layer in reversed(chain):
        db = layer.backward(db)
    assert da.shape[0] == width + 2
    np.testing.assert_allclose(da[:width], db, atol=1e-11)
    np.testing.assert_array_equal(da[width:], 0.0)
    np.testing.assert_allclose(fused.grads["gamma"], chain[1].grads["gamma"], atol=1e-11)
    fused.forward(z, train=False)
    chain[1].buffers = dict(fused.buffers)
    e = z
    for layer in chain:
        e = layer.forward(e, train=False)
    np.testing.assert_allclose(fused.forward(z, train=False)[: width // 2], e, atol=1e-12)


def test_fused_block_gradients(rng):
    layer = nl.ReluBnPool(2, 10, 21)
    layer.params["gamma"] = rng.normal(size=2)
    res = layer_check(layer, rng.normal(size=(21, 2, 3)))
    assert res.max_rel_error < TOL, res


# ---------------------------------------------------------------- dense, dropout, softmax


def test_dense_forward_and_gradients(rng):
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    np.testing.assert_allclose(F.dense(x, w, b), w @ x + b)
    with pytest.raises(ShapeError):
        F.dense(np.ones(5), w, b)
    layer = nl.Dense(4, 3, rng)
    assert layer_check(layer, rng.normal(size=(6, 4))).max_rel_error < TOL


def test_dropout_modes(rng):
    x = np.ones((200, 50))
    y, mask = F.dropout(x, 0.5, train=False)
    assert y is x and mask is None
    y, mask = F.dropout(x, 0.5, train=True, rng=rng)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ModeError):
        F.dropout(x, 0.5, train=True)
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, train=True, rng=rng)


def test_dropout_gradients(rng):
    assert layer_check(nl.Dropout(0.5), rng.normal(size=(5, 8))).max_rel_error < TOL


@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(z, c):
    p = F.softmax(np.array(z))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p, F.softmax(np.array(z) + c), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        F.softmax(np.array([0.0, np.inf]))


def test_cross_entropy():
    p = np.array([0.25, 0.25, 0.5, 0.0, 0.0])
    assert F.cross_entropy(p, 2) == pytest.approx(np.log(2))
    assert F.cross_entropy(p, 4) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        F.cross_entropy(p, 5)
    with pytest.raises(ValueError):
        F.cross_entropy(np.array([0.5, 0.4]), 0)


# ---------------------------------------------------------------- LSTM


def test_lstm_matches_scalar_reference(rng):
    seq = rng.normal(size=(4, 3))
    wx, wh, b = rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    hs, _ = F.lstm_forward(seq, wx, wh, b)
    np.testing.assert_allclose(hs, F.lstm_reference(seq.tolist(), wx.tolist(), wh.tolist(), b.tolist()),
                               atol=1e-12)


def test_lstm_hand_case():
    # one unit, zero weights: i = f = o = 0.5, g = tanh(0) = 0 -> h stays 0
    hs, _ = F.lstm_forward(np.ones((3, 1)), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros(4))
    np.testing.assert_array_equal(hs, 0.0)
    # g = tanh(1) from the bias only: c1 = 0.5 tanh(1), h1 = 0.5 tanh(c1)
    b = np.array([0.0, 0.0, 1.0, 0.0])
    hs, _ = F.lstm_forward(np.zeros((1, 1)), np.zeros((1, 4)), np.zeros((1, 4)), b)
    assert hs[0, 0] == pytest.approx(0.5 * np.tanh(0.5 * np.tanh(1.0)))


def test_lstm_gradients(rng):
    layer = nl.LSTM(3, 4, rng)
    assert layer_check(layer, rng.normal(size=(2, 5, 3))).max_rel_error < TOL


def test_lstm_forget_bias_initialized_to_one(rng):
    layer = nl.LSTM(3, 4, rng)
    np.testing.assert_array_equal(layer.params["bias"][4:8], 1.0)
    np.testing.assert_array_equal(np.delete(layer.params["bias"], range(4, 8)), 0.0)


def test_lstm_errors(rng):
    with pytest.raises(ValueError):
        F.lstm_forward(np.zeros((0, 3)), np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
    with pytest.raises(ShapeError):
        F.lstm_forward(np.zeros((2, 3)), np.zeros((4, 8)), np.zeros((2, 8)), np.zeros(8))


# ---------------------------------------------------------------- containers and helpers


def test_glorot_bounds(rng):
    w = nl.glorot(rng, (100, 50), 50, 100)
    assert np.abs(w).max() <= np.sqrt(6 / 150)


def test_sgd_step():
    p = {"a": np.array([1.0, 2.0])}
    g = {"a": np.array([0.5, -1.0])}
    F.sgd_step(p, g, 0.0)
    np.testing.assert_array_equal(p["a"], [1.0, 2.0])
    F.sgd_step(p, g, 0.1)
    np.testing.assert_allclose(p["a"], [0.95, 2.1])


def test_backward_without_training_forward(rng):
    net = nl.Sequential([("d", nl.Dense(3, 2, rng))])
    net.forward(np.ones((2, 3)))
    with pytest.raises(StateError):
        net.backward(np.ones((2, 2)))
    with pytest.raises(ModeError):
        net.forward(np.ones((1, 3)), train=True)


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, -1.0) == 1.0


def test_serialize_round_trip(rng):
    tensors = {"a.weight": rng.normal(size=(3, 1, 2)), "b": rng.normal(size=4), "s": np.array(2.0)}
    blob = serialize.dumps({"x": 1}, tensors)
    cfg, back = serialize.loads(blob)
    assert cfg == {"x": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert serialize.dumps(cfg, back) == blob


def test_serialize_rejects_damage(rng):
    blob = serialize.dumps({}, {"a": rng.normal(size=5)})
    with pytest.raises(DataError):
        serialize.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(DataError):
        serialize.loads(blob[:-8])
    with pytest.raises(DataError):
        serialize.loads(blob + b"\0")
