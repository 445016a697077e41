import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconv_inpaint import tensor as T
from iconv_inpaint.layers import (
    EPS_H,
    IConvLayer,
    SkipFusion,
    certainty_weighted_avg_pool,
    expected_input,
    feature_estimate,
    propagate_certainty,
    skip_fuse,
)
from iconv_inpaint.models import count_parameters
from iconv_inpaint.tensor import ShapeError, Tensor
from oracles import estimate_oracle


def test_estimate_1d_example():
    x = Tensor(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 1, 3))
    c = Tensor(np.array([1.0, 0.0, 1.0]).reshape(1, 1, 1, 3))
    est_kernel = np.zeros((1, 3, 3))
    est_kernel[0, 1, :] = 1.0
    h = feature_estimate(x, c, Tensor(est_kernel), eps=0.0)
    assert h.data[0, 0, 0, 1] == pytest.approx(4.0)


def test_estimate_zero_certainty_window():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 6, 6)))
    h = feature_estimate(x, Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.ones((2, 5, 5))))
    np.testing.assert_array_equal(h.data, 0.0)


def test_estimate_unit_kernel_is_local_mean():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 7, 7))
    ones = Tensor(np.ones((1, 1, 7, 7)))
    h = feature_estimate(Tensor(x), ones, Tensor(np.ones((1, 5, 5))), eps=0.0)
    for i in range(2, 5):
        for j in range(2, 5):
            assert h.data[0, 0, i, j] == pytest.approx(x[0, 0, i - 2 : i + 3, j - 2 : j + 3].mean())
    # the normalisation is by certainty mass, so a 1/K^2 kernel shrinks the mean by K^2
    h_box = feature_estimate(Tensor(x), ones, Tensor(np.full((1, 5, 5), 1 / 25)), eps=0.0)
    np.testing.assert_allclose(h_box.data, h.data / 25, rtol=1e-12)


def test_untrained_estimator_is_weighted_mean():
    layer = IConvLayer(2, 2, 3, np.random.default_rng(0), dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    c = (rng.uniform(size=(1, 1, 5, 5)) > 0.5).astype(float)
    h = feature_estimate(Tensor(x), Tensor(c), layer.est_kernel)
    centre = (x[:, :, :, :] * c).sum(axis=(2, 3)) / (c.sum() + EPS_H)
    np.testing.assert_allclose(h.data[:, :, 2, 2], centre[:, :], rtol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_estimate_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 5))
    c = rng.uniform(0, 1, (2, 1, 6, 5)) * (rng.uniform(size=(2, 1, 6, 5)) > 0.3)
    est_kernel = rng.standard_normal((3, 5, 5))
    h = feature_estimate(Tensor(x), Tensor(c), Tensor(est_kernel))
    np.testing.assert_allclose(h.data, estimate_oracle(x, c, est_kernel), atol=1e-10)


def test_estimate_shared_kernel():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 5, 5))
    c = rng.uniform(size=(1, 1, 5, 5))
    est_kernel = rng.standard_normal((1, 3, 3))
    h = feature_estimate(Tensor(x), Tensor(c), Tensor(est_kernel))
    np.testing.assert_allclose(h.data, estimate_oracle(x, c, est_kernel), atol=1e-10)


def test_estimate_rejects_even_kernel():
    with pytest.raises(ShapeError):
        feature_estimate(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 4, 4))))


def test_expected_input_cases():
    rng = np.random.default_rng(3)
    x, h = Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(expected_input(x, Tensor(np.ones((1, 1, 3, 3))), h).data, x.data)
    np.testing.assert_array_equal(expected_input(x, Tensor(np.zeros((1, 1, 3, 3))), h).data, h.data)
    v = expected_input(Tensor(np.array([2.0])), Tensor(np.array([0.5])), Tensor(np.array([4.0])))
    assert v.item() == 3.0


def test_propagate_certainty_cases():
    w = Tensor(np.random.default_rng(4).standard_normal((1, 1, 3, 3)))
    out = propagate_certainty(Tensor(np.zeros((1, 1, 5, 5))), w)
    np.testing.assert_array_equal(out.data, 0.5)
    out = propagate_certainty(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.full((1, 1, 3, 3), 0.1)))
    assert out.data[0, 0, 2, 2] == pytest.approx(1 / (1 + np.exp(-0.9)))
    c = Tensor(np.random.default_rng(5).uniform(size=(1, 1, 5, 5)))
    np.testing.assert_array_equal(propagate_certainty(c, Tensor(np.zeros((1, 1, 3, 3)))).data, 0.5)


def test_propagate_certainty_stride():
    out = propagate_certainty(Tensor(np.ones((2, 1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)
    assert out.shape == (2, 1, 4, 4)


def test_propagate_certainty_open_interval():
    rng = np.random.default_rng(6)
    out = propagate_certainty(Tensor(rng.uniform(size=(2, 1, 6, 6))), Tensor(rng.standard_normal((1, 1, 3, 3))))
    assert np.all(out.data > 0) and np.all(out.data < 1)


@pytest.mark.parametrize("seed", range(3))
def test_iconv_certainty_one_reduces_to_plain(seed):
    rng = np.random.default_rng(seed)
    layer = IConvLayer(4, 5, 3, rng)
    layer.est_kernel.data = rng.standard_normal(layer.est_kernel.shape).astype(np.float32)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    y, _ = layer(x, Tensor(np.ones((2, 1, 8, 8), dtype=np.float32)))
    np.testing.assert_allclose(y.data, layer.plain(x).data, atol=1e-6)


def test_iconv_output_shapes_and_stride():
    rng = np.random.default_rng(7)
    layer = IConvLayer(3, 6, 3, rng, stride=2)
    y, c = layer(Tensor(np.zeros((1, 3, 8, 8), np.float32)), Tensor(np.ones((1, 1, 8, 8), np.float32)))
    assert y.shape == (1, 6, 4, 4) and c.shape == (1, 1, 4, 4)


def test_iconv_parameter_count():
    layer = IConvLayer(64, 64, 3, np.random.default_rng(0), estimator_size=5)
    counts = count_parameters(layer)
    assert counts["feature_params"] == 36928
    assert counts["estimator_params"] == 1600
    assert counts["certainty_params"] == 9
    assert counts["estimator_params"] + counts["certainty_params"] == 1609


def test_certainty_pool_cases():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 4, 4))
    y, c = certainty_weighted_avg_pool(Tensor(x), Tensor(np.ones((1, 1, 4, 4))))
    np.testing.assert_allclose(y.data, T.avg_pool2x(Tensor(x)).data, atol=1e-6)
    np.testing.assert_array_equal(c.data, 1.0)

    xw = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    cw = Tensor(np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2))
    y, c = certainty_weighted_avg_pool(xw, cw)
    assert y.item() == pytest.approx(1.5, abs=1e-6) and c.item() == 0.5

    y, c = certainty_weighted_avg_pool(xw, Tensor(np.zeros((1, 1, 2, 2))))
    assert y.item() == 0.0 and c.item() == 0.0


def test_certainty_pool_odd_dims():
    with pytest.raises(ShapeError):
        certainty_weighted_avg_pool(Tensor(np.zeros((1, 1, 3, 4))), Tensor(np.ones((1, 1, 3, 4))))


def _fusion(b1, b2):
    f = SkipFusion(dtype=np.float64)
    f.log_w_shallow.data = np.log(np.array([b1]))
    f.log_w_deep.data = np.log(np.array([b2]))
    return f


def test_skip_fuse_cases():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((2, 1, 3, 4, 4))
    c = rng.uniform(0.2, 1, (1, 1, 4, 4))
    x, _ = skip_fuse(Tensor(a), Tensor(c), Tensor(b), Tensor(c), _fusion(1.0, 1.0))
    np.testing.assert_allclose(x.data, (a + b) / 2, atol=1e-5)

    x, _ = skip_fuse(Tensor(a), Tensor(np.zeros_like(c)), Tensor(b), Tensor(c), _fusion(1.0, 1.0))
    np.testing.assert_array_equal(x.data, b)

    ones = Tensor(np.ones_like(c))
    g = _fusion(3.0, 1.0).shallow_share(ones, ones)
    np.testing.assert_allclose(g.data, 0.75, atol=1e-6)


def test_skip_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        skip_fuse(
            Tensor(np.zeros((1, 2, 4, 4))),
            Tensor(np.ones((1, 1, 4, 4))),
            Tensor(np.zeros((1, 3, 4, 4))),
            Tensor(np.ones((1, 1, 4, 4))),
            _fusion(1.0, 1.0),
        )


def test_skip_fusion_init_and_positivity():
    f = SkipFusion()
    assert f.weights == (1.0, 1.0)
    f.log_w_shallow.data[:] = -50.0
    assert f.weights[0] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.floats(1.0, 10.0), st.floats(1.0, 10.0), st.floats(1.0, 100.0))
def test_skip_fuse_properties(seed, b1, b2, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 3, 5, 5))
    # weighted certainty mass >= 1 keeps the eps shift of shallow_share below 1e-6
    ca, cb = rng.uniform(0.5, 1, (2, 2, 1, 5, 5))
    fusion = _fusion(b1, b2)
    x, c = skip_fuse(Tensor(a), Tensor(ca), Tensor(b), Tensor(cb), fusion)
    tol = 1e-12
    assert np.all(x.data >= np.minimum(a, b) - tol) and np.all(x.data <= np.maximum(a, b) + tol)
    assert np.all(c.data >= np.minimum(ca, cb) - tol) and np.all(c.data <= np.maximum(ca, cb) + tol)
    g1 = fusion.shallow_share(Tensor(ca), Tensor(cb)).data
    g2 = _fusion(b1 * scale, b2 * scale).shallow_share(Tensor(ca), Tensor(cb)).data
    np.testing.assert_allclose(g1, g2, atol=1e-6)
