import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccloc import nn
from ccloc.nn import (AdamState, Concat, Conv1D, Dense, Flatten, MaxPool1D, Params, ReLU,
                      Reshape, Sequential, ShapeError, Sigmoid, StaleCacheError, Upsample1D)


def mse_loss_fn(net, x, target):
    def fn(params):
        y, cache = nn.forward(net, params, x)
        r = y - target
        grads, _ = nn.backward(net, params, cache, 2 * r / len(x))
        return float(np.sum(r * r) / len(x)), grads, nn.kink_signature(net, cache)
    return fn


def test_empty_net_is_identity(rng):
    net = Sequential([], input_shape=(3,))
    p = net.init_params(rng)
    x = rng.standard_normal((4, 3))
    y, cache = nn.forward(net, p, x)
    np.testing.assert_array_equal(y, x)
    g = rng.standard_normal((4, 3))
    grads, gx = nn.backward(net, p, cache, g)
    np.testing.assert_array_equal(gx, g)
    assert grads.size == 0


def test_dense_identity_weights(rng):
    net = Sequential([Dense(3)], input_shape=(3,))
    p = net.init_params(rng)
    p["0.dense.w"] = np.eye(3)
    p["0.dense.b"] = 0.0
    x = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(nn.forward(net, p, x)[0], x)


def test_conv_unit_kernel_is_identity(rng):
    net = Sequential([Conv1D(1, 1)], input_shape=(1, 7))
    p = net.init_params(rng)
    p["0.conv1d.w"] = [[[1.0]]]
    p["0.conv1d.b"] = 0.0
    x = rng.standard_normal((2, 1, 7))
    np.testing.assert_array_equal(nn.forward(net, p, x)[0], x)


def test_linear_regression_gradient(rng):
    # loss = 0.5 |A x - b|^2 with x as the dense weight row
    A = rng.standard_normal((20, 6))
    b = rng.standard_normal((20, 1))
    net = Sequential([Dense(1)], input_shape=(6,))
    p = net.init_params(rng)
    p["0.dense.b"] = 0.0
    y, cache = nn.forward(net, p, A)
    grads, _ = nn.backward(net, p, cache, y - b)
    w = p["0.dense.w"].ravel()
    np.testing.assert_allclose(grads["0.dense.w"].ravel(), A.T @ (A @ w - b.ravel()), atol=1e-12)


def test_relu_zero_gradient_when_inactive():
    net = Sequential([ReLU()], input_shape=(4,))
    p = net.init_params(np.random.default_rng(0))
    x = np.array([[-1.0, 0.0, 2.0, -3.0]])
    y, cache = nn.forward(net, p, x)
    np.testing.assert_array_equal(y, [[0, 0, 2, 0]])
    _, gx = nn.backward(net, p, cache, np.ones((1, 4)))
    np.testing.assert_array_equal(gx, [[0, 0, 1, 0]])


def test_maxpool_routes_gradient_to_winner():
    net = Sequential([MaxPool1D(2)], input_shape=(1, 5))
    p = net.init_params(np.random.default_rng(0))
    x = np.array([[[1.0, 3.0, 2.0, 2.0, 9.0]]])
    y, cache = nn.forward(net, p, x)
    np.testing.assert_array_equal(y, [[[3.0, 2.0]]])
    _, gx = nn.backward(net, p, cache, np.array([[[10.0, 20.0]]]))
    # ties go to the lower index; the trailing element is dropped
    np.testing.assert_array_equal(gx, [[[0, 10, 20, 0, 0]]])


def test_upsample_gradient_sums():
    net = Sequential([Upsample1D(2)], input_shape=(1, 2))
    p = net.init_params(np.random.default_rng(0))
    y, cache = nn.forward(net, p, np.array([[[1.0, 2.0]]]))
    np.testing.assert_array_equal(y, [[[1, 1, 2, 2]]])
    _, gx = nn.backward(net, p, cache, np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    np.testing.assert_array_equal(gx, [[[3, 7]]])


def test_sigmoid_range_and_gradient():
    net = Sequential([Sigmoid()], input_shape=(3,))
    p = net.init_params(np.random.default_rng(0))
    y, cache = nn.forward(net, p, np.array([[0.0, -800.0, 800.0]]))
    np.testing.assert_allclose(y, [[0.5, 0.0, 1.0]])
    _, gx = nn.backward(net, p, cache, np.ones((1, 3)))
    assert gx[0, 0] == 0.25 and np.all(np.isfinite(gx))


def _conv_net():
    branch = lambda: [Conv1D(3, 3), ReLU(), MaxPool1D(2), Flatten()]  # noqa: E731
    return Sequential([Reshape((2, 1, 9)), Concat([branch(), branch()]), Dense(4), ReLU(), Dense(2),
                       Sigmoid()], input_shape=(18,), name="n")


def test_gradient_check_conv_net(rng):
    net = _conv_net()
    p = net.init_params(rng)
    x, t = rng.standard_normal((6, 18)), rng.uniform(0, 1, (6, 2))
    err, n = nn.gradient_check(p, mse_loss_fn(net, x, t), eps=1e-6, fraction=1.0)
    assert n == p.size and err < 1e-5


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_gradient_check_random_mlp(seed):
    rng = np.random.default_rng(seed)
    net = Sequential([Dense(5), ReLU(), Dense(3), ReLU(), Dense(2)], input_shape=(4,))
    p = net.init_params(rng)
    p.flat += 0.1 * rng.standard_normal(p.size)
    x, t = rng.standard_normal((8, 4)), rng.standard_normal((8, 2))
    err, _ = nn.gradient_check(p, mse_loss_fn(net, x, t), eps=1e-6, seed=seed, min_coords=20)
    assert err < 1e-5


def test_input_gradient_matches_finite_difference(rng):
    net = _conv_net()
    p = net.init_params(rng)
    x = rng.standard_normal((1, 18))
    y, cache = nn.forward(net, p, x)
    _, gx = nn.backward(net, p, cache, np.ones_like(y))
    sig = nn.kink_signature(net, cache)
    for i in range(18):
        d = np.zeros_like(x)
        d[0, i] = 1e-6
        yp, cp = nn.forward(net, p, x + d)
        ym, cm = nn.forward(net, p, x - d)
        if nn.kink_signature(net, cp) != sig or nn.kink_signature(net, cm) != sig:
            continue
        assert gx[0, i] == pytest.approx((yp.sum() - ym.sum()) / 2e-6, rel=1e-5, abs=1e-9)


def test_gradient_check_detects_corruption(rng):
    net = Sequential([Dense(3), Sigmoid()], input_shape=(4,))
    p = net.init_params(rng)
    x, t = rng.standard_normal((5, 4)), rng.uniform(0, 1, (5, 3))
    good = mse_loss_fn(net, x, t)

    def bad(params):
        loss, grads, sig = good(params)
        grads.flat[:] = grads.flat * 1.1
        return loss, grads, sig

    err, _ = nn.gradient_check(p, bad, fraction=1.0, min_coords=5)
    assert err > 1e-2


def test_gradient_check_eps_range(rng):
    net = Sequential([Dense(1)], input_shape=(2,))
    p = net.init_params(rng)
    with pytest.raises(ValueError):
        nn.gradient_check(p, mse_loss_fn(net, np.ones((1, 2)), np.ones((1, 1))), eps=1e-2)


def test_adam_zero_gradient_leaves_params(rng):
    p = Params.from_specs([("w", (4,))])
    p.flat[:] = rng.standard_normal(4)
    before = p.flat.copy()
    st_ = AdamState.zeros(p)
    nn.adam_step(p, np.zeros(4), st_)
    np.testing.assert_array_equal(p.flat, before)
    assert st_.t == 1


def test_adam_first_step_is_lr_sign():
    p = Params.from_specs([("w", (3,))])
    nn.adam_step(p, np.array([2.0, -0.5, 1e-3]), AdamState.zeros(p), lr=0.01)
    np.testing.assert_allclose(p.flat, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_decreases_quadratic():
    p = Params.from_specs([("w", (2,))])
    p.flat[:] = [3.0, -2.0]
    st_ = AdamState.zeros(p)
    losses = []
    for _ in range(100):
        losses.append(float(p.flat @ p.flat))
        nn.adam_step(p, 2 * p.flat, st_, lr=0.01)
    # far from the minimum each step moves about lr per coordinate
    assert all(b < a for a, b in zip(losses, losses[1:]))
    for _ in range(400):
        nn.adam_step(p, 2 * p.flat, st_, lr=0.01)
    assert float(p.flat @ p.flat) < 0.01 * losses[0]


def test_adam_rejects_bad_gradients():
    p = Params.from_specs([("w", (2,))])
    with pytest.raises(FloatingPointError):
        nn.adam_step(p, np.array([1.0, np.nan]), AdamState.zeros(p))
    with pytest.raises(ShapeError):
        nn.adam_step(p, np.zeros(3), AdamState.zeros(p))


def test_stale_cache_rejected(rng):
    net = Sequential([Dense(2)], input_shape=(2,))
    p = net.init_params(rng)
    y, cache = nn.forward(net, p, np.ones((1, 2)))
    nn.adam_step(p, np.ones(p.size), AdamState.zeros(p))
    with pytest.raises(StaleCacheError):
        nn.backward(net, p, cache, np.ones_like(y))
    y, cache = nn.forward(net, p, np.ones((1, 2)))
    with pytest.raises(StaleCacheError):
        nn.backward(net, p.copy(), cache, np.ones_like(y))


def test_shape_errors():
    with pytest.raises(ShapeError, match="layer 1"):
        Sequential([Dense(3), Conv1D(2, 3)], input_shape=(4,))
    with pytest.raises(ShapeError):
        Sequential([Conv1D(2, 9)], input_shape=(1, 5))
    with pytest.raises(ShapeError):
        Sequential([Reshape((3, 3))], input_shape=(8,))
    net = Sequential([Dense(2)], input_shape=(3,))
    with pytest.raises(ShapeError, match="layer 0"):
        nn.forward(net, net.init_params(np.random.default_rng(0)), np.ones((1, 4)))
    with pytest.raises(ShapeError):
        Params.from_specs([("w", (2,))]).__class__(Params.from_specs([("w", (2,))]).layout, np.zeros(3))


def test_padded_conv_shapes():
    net = Sequential([Conv1D(4, 3, padding=1), Upsample1D(2), Conv1D(1, 2, padding=1)], input_shape=(2, 6))
    assert net.out_shape == (1, 13)


def test_spec_roundtrip():
    net = _conv_net()
    rebuilt = Sequential([nn.layer_from_spec(s) for s in net.spec()], input_shape=(18,), name="n")
    assert rebuilt.spec() == net.spec()
    assert rebuilt.param_specs() == net.param_specs()


def test_checkpoint_roundtrip(tmp_path, rng):
    flat = rng.standard_normal(37)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, {"step": 5, "name": "x"}, flat)
    header, data = nn.load_checkpoint(path)
    assert header == {"step": 5, "name": "x", "n_params": 37}
    np.testing.assert_array_equal(data, flat)
    raw = path.read_bytes()
    assert raw[:8] == b"CCLCKPT1"
    (n,) = struct.unpack("<Q", raw[8:16])
    assert len(raw) == 16 + n + 8 * 37


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, {}, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="expected 4"):
        nn.load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ValueError, match="not a ccloc checkpoint"):
        nn.load_checkpoint(path)
