"""Finite-difference suite over every primitive and composite layer.

Each case builder takes a seeded generator, draws its own shapes and
returns ``(f, inputs, tol)``.  Everything runs in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .layers import IConvLayer, SkipFusion, certainty_weighted_avg_pool, propagate_certainty
from .losses import PenaltyConfig, gradient_penalty
from .models import ResidualBlock
from .nn import EqualizedConv2d, EqualizedLinear
from .tensor import Tensor

F64 = np.float64
TOL = 1e-4
TOL_DOUBLE = 1e-3


def _t(rng, shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(lo, hi, shape)
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1) -> Tensor:
    # keeps inputs off the kinks of abs / leaky_relu / clamp
    mag = rng.uniform(margin, 2.0, shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], shape), requires_grad=True)


def _small_shape(rng, ndim=3, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, ndim))


def _img_shape(rng, c_max=3, hw=(4, 7)):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, c_max + 1))
    h = int(rng.integers(hw[0], hw[1] + 1))
    w = int(rng.integers(hw[0], hw[1] + 1))
    return n, c, h, w


def _even_img_shape(rng, c_max=3):
    n, c, h, w = _img_shape(rng, c_max)
    return n, c, 2 * (h // 2), 2 * (w // 2)


# -- primitives ------------------------------------------------------------


def case_add(rng):
    s = _small_shape(rng)
    return lambda a, b: a + b, [_t(rng, s), _t(rng, s[1:])], TOL


def case_sub(rng):
    s = _small_shape(rng)
    return lambda a, b: a - b, [_t(rng, s), _t(rng, (1,) + s[1:])], TOL


def case_mul(rng):
    s = _small_shape(rng)
    return lambda a, b: a * b, [_t(rng, s), _t(rng, s[-1:])], TOL


def case_div(rng):
    s = _small_shape(rng)
    return lambda a, b: a / b, [_t(rng, s), _t(rng, s, 0.5, 2.0)], TOL


def case_pow(rng):
    s = _small_shape(rng)
    e = float(rng.choice([2.0, 3.0, -1.0, 0.5]))
    return lambda a: a**e, [_t(rng, s, 0.5, 2.0)], TOL


def case_neg(rng):
    return lambda a: -a, [_t(rng, _small_shape(rng))], TOL


def case_sqrt(rng):
    return T.sqrt, [_t(rng, _small_shape(rng), 0.3, 3.0)], TOL


def case_exp(rng):
    return T.exp, [_t(rng, _small_shape(rng))], TOL


def case_abs(rng):
    return lambda a: a.abs(), [_away_from_zero(rng, _small_shape(rng))], TOL


def case_sigmoid(rng):
    return T.sigmoid, [_t(rng, _small_shape(rng))], TOL


def case_tanh(rng):
    return T.tanh, [_t(rng, _small_shape(rng))], TOL


def case_leaky_relu(rng):
    return lambda a: T.leaky_relu(a, 0.2), [_away_from_zero(rng, _small_shape(rng))], TOL


def case_clamp(rng):
    x = _away_from_zero(rng, _small_shape(rng))
    x.data = np.where(np.abs(np.abs(x.data) - 1.0) < 0.1, x.data * 1.3, x.data)
    return lambda a: T.clamp(a, -1.0, 1.0), [x], TOL


def case_maximum(rng):
    x = _away_from_zero(rng, _small_shape(rng))
    return lambda a: T.maximum(a, 0.0), [x], TOL


def case_sum(rng):
    s = _small_shape(rng)
    axis = int(rng.integers(0, len(s)))
    return lambda a: a.sum(axis=axis, keepdims=bool(axis % 2)), [_t(rng, s)], TOL


def case_mean(rng):
    s = _small_shape(rng)
    return lambda a: a.mean(axis=(0, 2)), [_t(rng, s)], TOL


def case_max(rng):
    s = _small_shape(rng)
    # distinct values so the argmax is stable under the perturbation
    x = Tensor(rng.permutation(np.prod(s)).reshape(s) * 0.1 + 0.01 * rng.standard_normal(s), requires_grad=True)
    return lambda a: a.max(axis=1), [x], TOL


def case_broadcast_sum_to(rng):
    s = _small_shape(rng)
    return lambda a: a.broadcast_to((2,) + s).sum_to((1,) + s), [_t(rng, s)], TOL


def case_reshape_transpose(rng):
    s = _small_shape(rng)
    return lambda a: a.transpose((2, 0, 1)).reshape(-1), [_t(rng, s)], TOL


def case_slice_embed(rng):
    s = _small_shape(rng, lo=2, hi=4)
    return lambda a: a[1:, :, ::-1] * 2.0, [_t(rng, s)], TOL


def case_concat(rng):
    a, b = _small_shape(rng), _small_shape(rng)
    b = (a[0], b[1], a[2])
    return lambda x, y: T.concat([x, y], axis=1), [_t(rng, a), _t(rng, b)], TOL


def case_matmul(rng):
    n, k, m = _small_shape(rng)
    b = int(rng.integers(1, 3))
    return lambda x, y: x @ y, [_t(rng, (b, n, k)), _t(rng, (k, m))], TOL


def case_linear(rng):
    n, i, o = _small_shape(rng)
    return lambda x, w, b: T.linear(x, w, b), [_t(rng, (n, i)), _t(rng, (o, i)), _t(rng, (o,))], TOL


def case_conv2d(rng):
    n, c, h, w = _img_shape(rng)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    co = int(rng.integers(1, 4))
    return (
        lambda x, wt, b: T.conv2d(x, wt, b, stride=stride, padding=(k - 1) // 2),
        [_t(rng, (n, c, h, w)), _t(rng, (co, c, k, k)), _t(rng, (co,))],
        TOL,
    )


def case_im2col(rng):
    n, c, h, w = _img_shape(rng)
    return lambda x: T.im2col(x, 3, 2, 1), [_t(rng, (n, c, h, w))], TOL


def case_depthwise(rng):
    n, c, h, w = _img_shape(rng)
    k = int(rng.choice([3, 5]))
    stride = int(rng.integers(1, 3))
    return (
        lambda x, wt: T.depthwise_conv2d(x, wt, stride=stride, padding=k // 2),
        [_t(rng, (n, c, h, w)), _t(rng, (c, k, k))],
        TOL,
    )


def case_upsample(rng):
    return T.upsample2x, [_t(rng, _img_shape(rng, hw=(2, 4)))], TOL


def case_avg_pool(rng):
    return T.avg_pool2x, [_t(rng, _even_img_shape(rng))], TOL


def case_pixel_norm(rng):
    return T.pixel_norm, [_t(rng, _img_shape(rng))], TOL


def case_l2_norm(rng):
    return lambda a: T.l2_norm(a, axis=(1, 2)), [_t(rng, _small_shape(rng))], TOL


def case_linf_norm(rng):
    s = _small_shape(rng)
    mag = (rng.permutation(np.prod(s)).reshape(s) + 1) * 0.1
    x = Tensor(mag * rng.choice([-1.0, 1.0], s), requires_grad=True)
    return lambda a: T.linf_norm(a, axis=(1, 2)), [x], TOL


# -- composite layers --------------------------------------------------------


def _certainty(rng, shape):
    return _t(rng, shape, 0.05, 0.95)


def case_iconv_forward(rng):
    n, c, h, w = _img_shape(rng)
    # one output channel turns pixel norm into a smoothed sign function
    co = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    layer = IConvLayer(c, co, 3, rng, estimator_size=int(rng.choice([3, 5])), stride=stride, dtype=F64)
    layer.est_kernel.data = layer.est_kernel.data + 0.01 * rng.standard_normal(layer.est_kernel.shape)
    params = [layer.weight, layer.bias, layer.est_kernel, layer.cert_weight]

    def f(x, cert, *_):
        y, c_next = layer(x, cert)
        return T.concat([y, c_next], axis=1)

    return f, [_t(rng, (n, c, h, w)), _certainty(rng, (n, 1, h, w))] + params, TOL


def case_certainty_propagation(rng):
    n, _, h, w = _img_shape(rng)
    stride = int(rng.integers(1, 3))
    return (
        lambda c, wt: propagate_certainty(c, wt, stride),
        [_certainty(rng, (n, 1, h, w)), _t(rng, (1, 1, 3, 3))],
        TOL,
    )


def case_skip_fusion(rng):
    n, c, h, w = _img_shape(rng)
    fusion = SkipFusion(dtype=F64)
    fusion.log_w_shallow.data = rng.standard_normal(1) * 0.5
    fusion.log_w_deep.data = rng.standard_normal(1) * 0.5

    def f(xs, cs, xd, cd, *_):
        x, cert = fusion(xs, cs, xd, cd)
        return T.concat([x, cert], axis=1)

    inputs = [_t(rng, (n, c, h, w)), _certainty(rng, (n, 1, h, w)), _t(rng, (n, c, h, w)), _certainty(rng, (n, 1, h, w))]
    return f, inputs + [fusion.log_w_shallow, fusion.log_w_deep], TOL


def case_certainty_pool(rng):
    n, c, h, w = _even_img_shape(rng)

    def f(x, cert):
        y, c_next = certainty_weighted_avg_pool(x, cert)
        return T.concat([y, c_next], axis=1)

    return f, [_t(rng, (n, c, h, w)), _certainty(rng, (n, 1, h, w))], TOL


def case_residual_block(rng):
    n, c, h, w = _even_img_shape(rng)
    co = int(rng.integers(1, 4))
    block = ResidualBlock(c, co, rng, dtype=F64)
    return lambda x, *_: block(x), [_t(rng, (n, c, h, w))] + block.parameters(), TOL


def _toy_critic(rng, c, h, w):
    conv = EqualizedConv2d(c, 2, 3, rng, dtype=F64)
    fc = EqualizedLinear(2 * h * w, 1, rng, dtype=F64)

    def critic(x):
        y = T.tanh(conv(x))
        y = y * y
        return fc(y.reshape(x.shape[0], -1)).reshape(x.shape[0])

    return critic, conv.parameters() + fc.parameters()


def case_penalty_double_backward(rng):
    n, c, h, w = _img_shape(rng, hw=(3, 5))
    critic, params = _toy_critic(rng, c, h, w)
    mode = str(rng.choice(["revised", "legacy"]))
    mask = Tensor((rng.uniform(size=(n, 1, h, w)) > 0.4).astype(F64))
    mask.data[:, :, 0, 0] = 0.0
    # scale so masked norms sit clearly above 1 and the hinge is active
    for p in params:
        p.data = p.data * 3.0
    cfg = PenaltyConfig(mode=mode, lam=10.0)
    x_hat = _t(rng, (n, c, h, w))

    def f(*_):
        pen, _norms = gradient_penalty(critic, x_hat, mask, cfg)
        return pen

    return f, params, TOL_DOUBLE


PRIMITIVES: dict[str, Callable] = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "div": case_div,
    "pow": case_pow,
    "neg": case_neg,
    "sqrt": case_sqrt,
    "exp": case_exp,
    "abs": case_abs,
    "sigmoid": case_sigmoid,
    "tanh": case_tanh,
    "leaky_relu": case_leaky_relu,
    "clamp": case_clamp,
    "maximum": case_maximum,
    "sum": case_sum,
    "mean": case_mean,
    "max": case_max,
    "broadcast_sum_to": case_broadcast_sum_to,
    "reshape_transpose": case_reshape_transpose,
    "slice": case_slice_embed,
    "concat": case_concat,
    "matmul": case_matmul,
    "linear": case_linear,
    "conv2d": case_conv2d,
    "im2col": case_im2col,
    "depthwise_conv2d": case_depthwise,
    "upsample2x": case_upsample,
    "avg_pool2x": case_avg_pool,
    "pixel_norm": case_pixel_norm,
    "l2_norm": case_l2_norm,
    "linf_norm": case_linf_norm,
}

COMPOSITES: dict[str, Callable] = {
    "iconv_forward": case_iconv_forward,
    "certainty_propagation": case_certainty_propagation,
    "skip_fusion": case_skip_fusion,
    "certainty_pool": case_certainty_pool,
    "residual_block": case_residual_block,
    "penalty_double_backward": case_penalty_double_backward,
}

ALL_CASES = {**PRIMITIVES, **COMPOSITES}


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tol: float
    passed: bool
    seeds: int


def run_case(name: str, seeds=range(5)) -> SuiteResult:
    builder = ALL_CASES[name]
    worst, tol = 0.0, TOL
    for seed in seeds:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        f, inputs, tol = builder(rng)
        report = grad_check(f, inputs, tol=tol, seed=seed)
        worst = max(worst, report.max_rel_error)
    return SuiteResult(name, worst, tol, worst < tol, len(seeds))


def run_suite(seeds=range(5), names=None, report: Callable[[SuiteResult], None] | None = None) -> list[SuiteResult]:
    results = []
    for name in names or ALL_CASES:
        r = run_case(name, seeds)
        results.append(r)
        if report is not None:
            report(r)
    return results


def main_report(seeds=range(5)) -> tuple[bool, float]:
    """Print one line per case; returns (all passed, seconds)."""
    t0 = time.perf_counter()

    def show(r: SuiteResult):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<26} max_rel_err={r.max_rel_error:.2e} tol={r.tol:.0e}")

    results = run_suite(seeds, report=show)
    return all(r.passed for r in results), time.perf_counter() - t0
