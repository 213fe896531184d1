import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepsim import ops
from deepsim.tensor import ShapeError, Tensor, grad


def conv_loops(x, w, b, stride, pad):
    """Direct cross-correlation, one output element at a time."""
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    n, cin, h, wd = xp.shape
    cout, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, c * stride : c * stride + kw]
                    out[i, o, r, c] = (patch * w[o]).sum() + b[o]
    return out


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3),
    h=st.integers(3, 8), w=st.integers(3, 8), k=st.integers(1, 3), stride=st.integers(1, 3),
    pad=st.tuples(*[st.integers(0, 2)] * 4), seed=st.integers(0, 2**31 - 1),
)
def test_conv2d_matches_loops(n, cin, cout, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_loops(x, wt, b, stride, pad), atol=1e-12)



def conv_grad_loops(x, w, g, stride, pad):
    """Input and weight gradients by scattering each output element's gradient."""
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    dxp, dw = np.zeros_like(xp), np.zeros_like(w)
    kh, kw = w.shape[2:]
    for i, o, r, c in np.ndindex(*g.shape):
        rs, cs = r * stride, c * stride
        dxp[i, :, rs : rs + kh, cs : cs + kw] += g[i, o, r, c] * w[o]
        dw[o] += g[i, o, r, c] * xp[i, :, rs : rs + kh, cs : cs + kw]
    return dxp[:, :, top : xp.shape[2] - bottom, left : xp.shape[3] - right], dw


@settings(max_examples=30, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3), h=st.integers(3, 9), w=st.integers(3, 9),
    k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.tuples(*[st.integers(0, 2)] * 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv2d_gradients_match_loops(cin, cout, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    if k > min(h + pad[0] + pad[1], w + pad[2] + pad[3]):
        return
    x = Tensor(rng.standard_normal((2, cin, h, w)), requires_grad=True)
    wt = Tensor(rng.standard_normal((cout, cin, k, k)), requires_grad=True)
    b = Tensor(rng.standard_normal(cout), requires_grad=True)
    out = ops.conv2d(x, wt, b, stride, pad)
    probe = rng.standard_normal(out.shape)
    dx, dw, db = grad((out * Tensor(probe)).sum(), [x, wt, b])
    ex, ew = conv_grad_loops(x.data, wt.data, probe, stride, pad)
    np.testing.assert_allclose(dx, ex, atol=1e-12)
    np.testing.assert_allclose(dw, ew, atol=1e-12)
    np.testing.assert_allclose(db, probe.sum(axis=(0, 2, 3)), atol=1e-12)

def test_conv_output_size():
    # 64 -> 29 with a 7x7 kernel and stride 2, no padding
    assert ops.conv_output_size(64, 7, 2, 0) == 29
    assert ops.conv_output_size(32, 5, 2, 3) == 16


def test_conv2d_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match="3 channels"):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_conv2d_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 9, 9)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    first = grad(ops.conv2d(x, w, b, 2, (1, 1, 1, 1)).square().sum(), [x, w, b])
    second = grad(ops.conv2d(x, w, b, 2, (1, 1, 1, 1)).square().sum(), [x, w, b])
    for a, c in zip(first, second):
        assert a.tobytes() == c.tobytes()


def test_bed_of_nails_places_top_left():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    up = ops.upsample_bed_of_nails(x, 2).data[0, 0]
    expected = np.array([[0, 0, 1, 0], [0, 0, 0, 0], [2, 0, 3, 0], [0, 0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(up, expected)


def test_bed_of_nails_rejects_bad_factor():
    with pytest.raises(ValueError):
        ops.upsample_bed_of_nails(Tensor(np.zeros((1, 1, 2, 2))), 0)


def test_leaky_relu_values_and_subgradient_at_zero():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    y = ops.leaky_relu(x, 0.3)
    np.testing.assert_allclose(y.data, [-0.6, 0.0, 3.0])
    (g,) = grad(y.sum(), [x])
    np.testing.assert_allclose(g, [0.3, 0.3, 1.0])


def test_fully_connected_flattens_maps():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 2, 2))
    w = rng.standard_normal((12, 5))
    b = rng.standard_normal(5)
    out = ops.fully_connected(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, x.reshape(2, 12) @ w + b)


def test_fully_connected_width_mismatch():
    with pytest.raises(ShapeError, match="input width 4"):
        ops.fully_connected(Tensor(np.zeros((1, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    (g,) = grad(ops.pool(x, "max", 2, 2).sum(), [x])
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_matches_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 7))
    got = ops.pool(Tensor(x), "max", 3, 2).data
    for r in range(3):
        for c in range(3):
            np.testing.assert_array_equal(got[:, :, r, c], x[:, :, 2 * r : 2 * r + 3, 2 * c : 2 * c + 3].max(axis=(2, 3)))


def test_global_average_pool():
    x = np.arange(32.0).reshape(2, 1, 4, 4)
    got = ops.pool(Tensor(x), "global_avg").data
    assert got.shape == (2, 1, 1, 1)
    np.testing.assert_allclose(got.ravel(), [7.5, 23.5])


def test_unknown_pool_kind():
    with pytest.raises(ValueError):
        ops.pool(Tensor(np.zeros((1, 1, 2, 2))), "median")


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((3, 4)))
    assert ops.dropout(x, 0.5, train=False) is x


def test_dropout_train_keeps_expectation():
    x = Tensor(np.ones((200, 500)))
    y = ops.dropout(x, 0.5, train=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.01
    assert abs((y == 0).mean() - 0.5) < 0.01


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        ops.dropout(Tensor(np.ones(2)), 1.0, train=True, rng=np.random.default_rng(0))


def test_softmax_is_stable_for_large_logits():
    p = ops.softmax2(Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0], [3.0, 3.0]]))).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[2], [0.5, 0.5])


def test_softmax2_shape_check():
    with pytest.raises(ShapeError, match=r"\(N, 2\)"):
        ops.softmax2(Tensor(np.zeros((2, 3))))
