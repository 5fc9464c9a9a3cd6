import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drowsy3d import tensor as T
from drowsy3d.tensor import BatchNormParams, ConvParams

from oracles import direct_conv, finite_difference, rel_err


def test_conv3d_stem_shape():
    x = np.zeros((1, 224, 224, 10, 1), np.float32)
    w = np.zeros((3, 3, 3, 1, 48), np.float32)
    assert T.conv3d(x, ConvParams(w, (2, 2, 2))).shape == (1, 112, 112, 5, 48)


def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 3, 1))
    w = np.ones((1, 1, 1, 1, 1))
    np.testing.assert_array_equal(T.conv3d(x, ConvParams(w, (1, 1, 1))), x)


def test_conv3d_box_filter_same_padding():
    x = np.ones((1, 4, 4, 1, 1))
    w = np.ones((3, 3, 1, 1, 1))
    y = T.conv3d(x, ConvParams(w, (1, 1, 1)))[0, :, :, 0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(y, expected)
    np.testing.assert_array_equal(y, direct_conv(x, w, (1, 1, 1))[0, :, :, 0, 0])


def test_conv3d_channel_mismatch_names_shapes():
    x = np.ones((1, 4, 4, 2, 3))
    w = np.ones((3, 3, 3, 2, 4))
    with pytest.raises(T.ShapeError, match=r"\(1, 4, 4, 2, 3\).*\(3, 3, 3, 2, 4\)"):
        T.conv3d(x, ConvParams(w, (1, 1, 1)))


def test_conv_rejects_zero_stride():
    with pytest.raises(T.ConfigError):
        ConvParams(np.ones((3, 3, 3, 1, 1)), (1, 0, 1))


def test_depthwise_temporal_collapse():
    x = np.zeros((1, 112, 112, 5, 48), np.float32)
    w = np.zeros((3, 3, 5, 48), np.float32)
    y = T.depthwise_conv3d(x, ConvParams(w, (1, 1, 5), depthwise=True))
    assert y.shape == (1, 112, 112, 1, 48)
    assert not y.any()


def test_depthwise_per_channel_scale():
    x = np.ones((1, 3, 3, 2, 2)) * np.array([1.0, 2.0])
    w = np.array([3.0, 5.0]).reshape(1, 1, 1, 2)
    y = T.depthwise_conv3d(x, ConvParams(w, (1, 1, 1), depthwise=True))
    np.testing.assert_array_equal(y[..., 0], 3.0)
    np.testing.assert_array_equal(y[..., 1], 10.0)


def test_depthwise_kernel_count_mismatch():
    with pytest.raises(T.ShapeError):
        T.depthwise_conv3d(np.ones((1, 4, 4, 4, 3)),
                           ConvParams(np.ones((3, 3, 3, 2)), (1, 1, 1), depthwise=True))


def test_pointwise():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 4, 3, 6))
    assert T.pointwise_conv(x, rng.normal(size=(6, 9))).shape == (1, 4, 4, 3, 9)
    np.testing.assert_array_equal(T.pointwise_conv(x, np.eye(6)), x)
    same = np.repeat(x[..., :1], 2, axis=-1)
    np.testing.assert_array_equal(T.pointwise_conv(same, np.array([[1.0], [-1.0]])), 0)
    with pytest.raises(T.ShapeError):
        T.pointwise_conv(x, np.eye(5))


def test_relu6_values():
    np.testing.assert_array_equal(T.relu6(np.array([-1.0, 3.0, 8.0])), [0.0, 3.0, 6.0])
    g = T.relu6_backward(np.ones(2), np.array([3.0, 8.0]))
    np.testing.assert_array_equal(g, [1.0, 0.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_relu6_range_and_idempotent(values):
    x = np.array(values)
    y = T.relu6(x)
    assert np.all((y >= 0) & (y <= 6))
    np.testing.assert_array_equal(T.relu6(y), y)


def _bn(c, **kw):
    return BatchNormParams.fresh(c, np.float64, **kw)


def test_batch_norm_normalized_batch_unchanged():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1)
    y, *_ = T.batch_norm(x, _bn(1, training=True))
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-3))


def test_batch_norm_two_values():
    x = np.array([[0.0, 0.0], [2.0, 2.0]])
    y, mean, var, _ = T.batch_norm(x, _bn(2, training=True))
    np.testing.assert_allclose(y[:, 0], [-1, 1], atol=1e-3)
    # running stats move 1% toward batch mean 1 and unbiased variance 2
    np.testing.assert_allclose(mean, 0.01)
    np.testing.assert_allclose(var, 0.99 + 0.01 * 2)


def test_batch_norm_zero_gamma_gives_beta():
    p = _bn(3, training=True)
    p.gamma[:] = 0
    p.beta[:] = [1.0, 2.0, 3.0]
    x = np.random.default_rng(0).normal(size=(2, 4, 3))
    y, *_ = T.batch_norm(x, p)
    np.testing.assert_array_equal(y, np.broadcast_to([1.0, 2.0, 3.0], y.shape))


def test_batch_norm_inference_uses_running_stats():
    p = _bn(1)
    p.running_mean[:] = 2.0
    p.running_var[:] = 4.0 - 1e-3
    y, *_ = T.batch_norm(np.array([[4.0]]), p)
    np.testing.assert_allclose(y, [[1.0]])


def test_batch_norm_rejects_bad_epsilon():
    with pytest.raises(T.ConfigError):
        _bn(1, epsilon=0.0)


def test_global_avg_pool():
    assert T.global_avg_pool(np.zeros((1, 7, 7, 1792))).shape == (1, 1792)
    np.testing.assert_array_equal(T.global_avg_pool(np.full((1, 3, 3, 2), 4.5)), 4.5)
    assert T.global_avg_pool(np.array([1.0, 2, 3, 4]).reshape(1, 2, 2, 1))[0, 0] == 2.5


def test_softmax_cross_entropy_examples():
    p, loss = T.softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    np.testing.assert_allclose(p, [0.5, 0.5])
    assert loss == pytest.approx(np.log(2))
    p, _ = T.softmax_cross_entropy(np.array([np.log(3), 0.0]), 1)
    np.testing.assert_allclose(p, [0.75, 0.25])
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.array([0.0, 0.0]), 2)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-100, 100))
def test_softmax_sum_and_shift(a, b, c):
    p, _ = T.softmax_cross_entropy(np.array([a, b]), 0)
    q, _ = T.softmax_cross_entropy(np.array([a + c, b + c]), 0)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-15)


def test_residual_add():
    x = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(T.residual_add(np.zeros_like(x), x), x)
    np.testing.assert_array_equal(T.residual_add(x, x), 2 * x)
    with pytest.raises(T.ShapeError):
        T.residual_add(np.zeros((4, 4, 8)), np.zeros((4, 4, 16)))


@settings(deadline=None, max_examples=30)
@given(
    st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(1, 4),
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    st.integers(0, 2**31 - 1),
)
def test_conv_matches_nested_loops(h, w, f, cin, k1, k2, k3, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, h, w, f, cin))
    wf = rng.normal(size=(k1, k2, k3, cin, 3))
    wd = rng.normal(size=(k1, k2, k3, cin))
    for weights, dw in ((wf, False), (wd, True)):
        got = T.conv3d(x, ConvParams(weights, stride, depthwise=dw))
        want = direct_conv(x, weights, stride, depthwise=dw)
        assert got.shape == want.shape
        assert got.shape[1:4] == tuple(-(-n // s) for n, s in zip((h, w, f), stride))
        assert np.max(np.abs(got - want)) <= 1e-6 * max(np.max(np.abs(want)), 1e-12)


def test_separable_equals_full_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5, 4, 3))
    spatial = rng.normal(size=(3, 3, 3, 3))
    mix = rng.normal(size=(3, 5))
    sep = T.pointwise_conv(T.depthwise_conv3d(x, ConvParams(spatial, (1, 2, 1), depthwise=True)), mix)
    full_w = spatial[..., :, None] * mix  # (3,3,3,cin,cout)
    full = T.conv3d(x, ConvParams(full_w, (1, 2, 1)))
    np.testing.assert_allclose(sep, full, rtol=1e-6, atol=1e-12)


# ----------------------------------------------------------------------
# gradients against central differences
# ----------------------------------------------------------------------

PROBES = 20


def _check(loss_fn, target, analytic, rng, tol=1e-4):
    for _ in range(PROBES):
        idx = tuple(rng.integers(0, n) for n in target.shape)
        num = finite_difference(loss_fn, target, idx)
        assert rel_err(analytic[idx], num) < tol, (idx, analytic[idx], num)


@pytest.mark.parametrize("depthwise", [False, True])
@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 1, 2)])
def test_conv_gradients(depthwise, stride):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5, 4, 4, 3))
    w = rng.normal(size=(3, 3, 2, 3) if depthwise else (3, 3, 2, 3, 2))
    b = rng.normal(size=w.shape[-1])
    up = rng.normal(size=T.conv3d(x, ConvParams(w, stride, depthwise, b)).shape)

    def loss():
        return float(np.sum(T.conv3d(x, ConvParams(w, stride, depthwise, b)) * up))

    dx, dw, db = T.conv3d_backward(up, x, ConvParams(w, stride, depthwise, b))
    _check(loss, x, dx, rng)
    _check(loss, w, dw, rng)
    _check(loss, b, db, rng)


def test_pointwise_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(4, 5))
    up = rng.normal(size=(2, 3, 3, 5))
    loss = lambda: float(np.sum(T.pointwise_conv(x, w) * up))
    dx, dw = T.pointwise_conv_backward(up, x, w)
    _check(loss, x, dx, rng)
    _check(loss, w, dw, rng)


def test_relu6_gradient():
    rng = np.random.default_rng(9)
    # keep probes away from the kinks at 0 and 6
    x = rng.uniform(0.1, 5.9, size=(4, 5)) * rng.choice([-1, 1, 2], size=(4, 5))
    up = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(T.relu6(x) * up))
    _check(loss, x, T.relu6_backward(up, x), rng)


def test_batch_norm_gradients():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4, 2, 3))
    p = _bn(3, training=True)
    p.gamma[:] = rng.normal(size=3)
    p.beta[:] = rng.normal(size=3)
    up = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(T.batch_norm(x, p)[0] * up))
    _, _, _, cache = T.batch_norm(x, p)
    dx, dg, db = T.batch_norm_backward(up, cache)
    _check(loss, x, dx, rng)
    _check(loss, p.gamma, dg, rng)
    _check(loss, p.beta, db, rng)


def test_batch_norm_backward_needs_training_forward():
    with pytest.raises(T.GraphError):
        T.batch_norm_backward(np.ones((2, 1)), None)


def test_pool_gradient():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 3, 2, 4))
    up = rng.normal(size=(2, 4))
    loss = lambda: float(np.sum(T.global_avg_pool(x) * up))
    _check(loss, x, T.global_avg_pool_backward(up, x.shape), rng)


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(5, 2))
    t = rng.integers(0, 2, size=5)
    loss = lambda: T.softmax_cross_entropy(logits, t)[1]
    probs, _ = T.softmax_cross_entropy(logits, t)
    _check(loss, logits, T.softmax_cross_entropy_backward(probs, t), rng)


def test_residual_add_gradient():
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    up = rng.normal(size=a.shape)
    loss = lambda: float(np.sum(T.residual_add(a, b) * up))
    # d(a+b)/da is the upstream gradient itself
    _check(loss, a, up, rng)
    _check(loss, b, up, rng)
