import math

import numpy as np
import pytest

from iconv_inpaint.metrics import evaluate_pair, l1, l2, psnr, ssim, to_unit
from oracles import ssim_oracle


def test_l1_l2_examples():
    a = np.full((3, 4, 4), 0.3)
    assert l1(a, a) == 0.0 and l2(a, a) == 0.0
    assert l1(a, a + 0.1) == pytest.approx(0.1, abs=1e-12)
    assert l2(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        l1(a, a, region=np.zeros((1, 4, 4), bool))
    with pytest.raises(ValueError):
        l1(a, a[:2])


def test_psnr_examples():
    a = np.zeros((1, 4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(a, a) == 99.0


def test_ssim_constants_closed_form():
    a, b = np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.8)
    expected = (2 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.4707, abs=1e-4)


def test_ssim_identity_and_small_input():
    a = np.random.default_rng(0).uniform(size=(3, 12, 12))
    assert ssim(a, a) == 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.ones((3, 8, 8)))


def test_metrics_match_oracles_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h, w = rng.integers(11, 20, size=2)
        a = rng.uniform(size=(3, h, w))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        region = rng.uniform(size=(1, h, w)) > 0.5
        d = a - b
        sel = np.broadcast_to(region, a.shape)
        assert abs(l1(a, b) - np.abs(d).mean()) < 1e-6
        assert abs(l2(a, b) - (d**2).mean()) < 1e-6
        assert abs(l1(a, b, region) - np.abs(d[sel]).mean()) < 1e-6
        assert abs(psnr(a, b) - 10 * math.log10(1 / (d**2).mean())) < 1e-6
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6


def test_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 3, 16, 16))
    for f in (l1, l2, psnr, ssim):
        assert abs(f(a, b) - f(b, a)) <= 1e-12


def test_psnr_strictly_decreasing_with_noise():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(3, 32, 32))
    noise = rng.standard_normal(a.shape)
    values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_evaluate_pair_regions():
    rng = np.random.default_rng(3)
    pred, target = rng.uniform(-1, 1, (2, 3, 16, 16))
    mask = np.ones((1, 16, 16))
    assert set(evaluate_pair(pred, target, mask)) == {"full"}
    mask[:, 4:12, 4:12] = 0
    rep = evaluate_pair(pred, target, mask)
    hole = np.broadcast_to(mask < 0.5, pred.shape)
    assert rep["hole"].l1 == pytest.approx(np.abs(to_unit(pred) - to_unit(target))[hole].mean())
    assert -1 <= rep["hole"].ssim <= 1
    # hole too small for any full window centre: undefined rather than a misleading value
    tiny = np.ones((1, 16, 16))
    tiny[:, 0, 0] = 0
    assert math.isnan(evaluate_pair(pred, target, tiny)["hole"].ssim)
