import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconv_inpaint import tensor as T
from iconv_inpaint.gradcheck import grad_check
from iconv_inpaint.tensor import Function, ShapeError, Tensor, backward, grad, no_grad


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, ci, y * stride + ky, xx * stride + kx] * w[o, ci, ky, kx]
                    out[i, o, y, xx] = acc + (b[o] if b is not None else 0.0)
    return out


# -- conv2d ------------------------------------------------------------------


def test_conv2d_counts_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, w, padding=1).data[0, 0]
    assert y[1, 1] == 9
    assert y[0, 0] == 4


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 4, 5)))
    y = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x.data)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_loop_oracle(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1)
    np.testing.assert_allclose(y.data, conv_oracle(x, w, b, stride, 1), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# -- depthwise ---------------------------------------------------------------


def test_depthwise_center_tap_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 2, 5, 5))
    w = np.zeros((2, 3, 3))
    w[:, 1, 1] = 1.0
    y = T.depthwise_conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_depthwise_counts_ones():
    y = T.depthwise_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 3, 3))), padding=1).data[0, 0]
    assert y[1, 1] == 9 and y[0, 1] == 6 and y[0, 0] == 4


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_matches_grouped_conv(stride):
    rng = np.random.default_rng(2)
    c = 3
    x = rng.standard_normal((2, c, 6, 7))
    w = rng.standard_normal((c, 5, 5))
    block = np.zeros((c, c, 5, 5))
    for i in range(c):
        block[i, i] = w[i]
    y = T.depthwise_conv2d(Tensor(x), Tensor(w), stride=stride, padding=2)
    ref = T.conv2d(Tensor(x), Tensor(block), stride=stride, padding=2)
    np.testing.assert_allclose(y.data, ref.data, atol=1e-12)


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        T.depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 3, 3))))


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 6))
    cols = T.im2col(Tensor(x), 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    back = T.Col2Im.apply(Tensor(y), x_shape=x.shape, k=3, stride=2, padding=1)
    assert np.isclose((cols.data * y).sum(), (x * back.data).sum(), rtol=1e-12)


# -- primitive catalogue -----------------------------------------------------


def test_leaky_relu_value():
    assert T.leaky_relu(Tensor(np.array([-2.0])), 0.2).item() == pytest.approx(-0.4)


def test_pixel_norm_value():
    x = Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
    y = T.pixel_norm(x).data.ravel()
    np.testing.assert_allclose(y, [3 / np.sqrt(12.5 + 1e-8), 4 / np.sqrt(12.5 + 1e-8)], rtol=1e-12)
    np.testing.assert_allclose(y, [0.8485, 1.1314], atol=1e-4)


def test_pixel_norm_unit_rms():
    x = np.random.default_rng(4).standard_normal((2, 8, 5, 5)) * 10
    y = T.pixel_norm(Tensor(x)).data
    np.testing.assert_allclose(np.sqrt((y**2).mean(axis=1)), 1.0, atol=1e-6)


def test_upsample_block_replicates():
    y = T.upsample2x(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))).data[0, 0]
    np.testing.assert_array_equal(y, np.kron([[1, 2], [3, 4]], np.ones((2, 2))))


def test_avg_pool_values_and_odd_dims():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(T.avg_pool2x(x).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ShapeError):
        T.avg_pool2x(Tensor(np.zeros((1, 1, 3, 4))))


def test_norms():
    x = Tensor(np.array([[3.0, -4.0], [1.0, 0.0]]))
    np.testing.assert_allclose(T.l2_norm(x, axis=1).data, [5.0, 1.0])
    np.testing.assert_allclose(T.linf_norm(x, axis=1).data, [4.0, 1.0])


def test_maximum_subgradient_zero_at_kink():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    (g,) = grad(T.maximum(x, 0.0).sum(), [x])
    np.testing.assert_array_equal(g.data, [0.0, 0.0, 1.0])


def test_clamp():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    y = T.clamp(x, -1.0, 1.0)
    np.testing.assert_array_equal(y.data, [-1.0, 0.5, 1.0])
    (g,) = grad(y.sum(), [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 0.0])


def test_concat_channel_check():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3)))], axis=1)


def test_axis_out_of_range():
    with pytest.raises((ValueError, IndexError)):
        Tensor(np.zeros((2, 3))).sum(axis=2)


# -- backward ----------------------------------------------------------------


def test_backward_sum():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_diamond_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    a = x * 3.0
    b = T.exp(x)
    backward((a + b).sum())
    np.testing.assert_allclose(x.grad, 3.0 + np.exp(x.data))


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0]), requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 5.0).sum())
    np.testing.assert_array_equal(x.grad, [7.0])


def test_grad_unused_input_is_zero():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    gx, gy = grad(x.sum(), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(3))


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y._ctx is None and not y.requires_grad


def test_double_backward_of_cube():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (g,) = grad((x * x * x).sum(), [x], create_graph=True)
    (gg,) = grad(g.sum(), [x])
    assert g.item() == pytest.approx(12.0) and gg.item() == pytest.approx(12.0)


def test_float32_precision_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = (x * 2.0 + 1.0).sum()
    backward(y)
    assert y.dtype == np.float32 and x.grad.dtype == np.float32


# -- grad_check --------------------------------------------------------------


def test_grad_check_sigmoid_tight():
    x = Tensor(np.random.default_rng(5).standard_normal(3), requires_grad=True)
    assert grad_check(T.sigmoid, [x], tol=1e-6).passed


def test_grad_check_iconv_layer():
    from iconv_inpaint.layers import IConvLayer

    rng = np.random.default_rng(6)
    layer = IConvLayer(2, 3, 3, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    c = Tensor(rng.uniform(0.05, 0.95, (1, 1, 5, 5)), requires_grad=True)
    report = grad_check(lambda a, b, *_: layer(a, b)[0], [x, c, layer.weight, layer.est_kernel])
    assert report.passed, report


class _BrokenSquare(Function):
    def forward(self, a):
        return a * a

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * a * 3.0,)  # wrong: should be 2


def test_grad_check_flags_corrupted_rule():
    x = Tensor(np.array([0.7, -1.2]), requires_grad=True)
    report = grad_check(lambda a: _BrokenSquare.apply(a), [x])
    assert not report.passed and report.max_rel_error > 0.1


# -- properties --------------------------------------------------------------


shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))


@settings(max_examples=30, deadline=None)
@given(shapes, st.integers(0, 2**16))
def test_broadcast_add_grad_matches_sum(shape, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal(shape), requires_grad=True)
    b = Tensor(rng.standard_normal(shape[-1:]), requires_grad=True)
    backward(((a + b) * (a + b)).sum())
    np.testing.assert_allclose(b.grad, (2 * (a.data + b.data)).reshape(-1, shape[-1]).sum(0), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 6), st.integers(3, 6), st.integers(0, 2**16))
def test_conv_linear_in_input(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, n, c, h, w))
    wt = Tensor(rng.standard_normal((2, c, 3, 3)))
    y = T.conv2d(Tensor(x1 + 2 * x2), wt, padding=1).data
    y1 = T.conv2d(Tensor(x1), wt, padding=1).data
    y2 = T.conv2d(Tensor(x2), wt, padding=1).data
    np.testing.assert_allclose(y, y1 + 2 * y2, atol=1e-10)
