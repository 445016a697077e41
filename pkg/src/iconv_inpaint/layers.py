"""Certainty-aware building blocks.

A feature map always travels together with a single-channel certainty map
``C`` in [0, 1].  At the input ``C`` is the binary mask (0 = pixel to fill).
"""

from __future__ import annotations

import math

import numpy as np

from .nn import Module, parameter
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    depthwise_conv2d,
    leaky_relu,
    pixel_norm,
    sigmoid,
    sum_pool2x,
)

EPS_H = 1e-6


def _ones_kernel(k: int, dtype) -> Tensor:
    return Tensor(np.ones((1, 1, k, k), dtype=dtype))


def _check_certainty(x: Tensor, c: Tensor) -> None:
    if c.ndim != 4 or c.shape[1] != 1:
        raise ShapeError(f"certainty must be [N,1,H,W], got {c.shape}")
    if x.shape[0] != c.shape[0] or x.shape[2:] != c.shape[2:]:
        raise ShapeError(f"features {x.shape} and certainty {c.shape} are misaligned")


def feature_estimate(x: Tensor, c: Tensor, est_kernel: Tensor, eps: float = EPS_H) -> Tensor:
    """Certainty-weighted, learned local average of neighbouring features.

    ``dwconv(x*c, est_kernel) / (boxsum(c) + eps)`` with zero padding, so
    out-of-image neighbours count as fully uncertain.  ``est_kernel`` is
    ``[C,K,K]`` or ``[1,K,K]`` (one kernel shared by all channels).
    """
    _check_certainty(x, c)
    k = est_kernel.shape[-1]
    if k % 2 == 0:
        raise ShapeError("estimator kernel size must be odd")
    if est_kernel.shape[0] == 1 and x.shape[1] != 1:
        est_kernel = est_kernel.broadcast_to((x.shape[1], k, k))
    pad = k // 2
    num = depthwise_conv2d(x * c, est_kernel, padding=pad)
    den = conv2d(c, _ones_kernel(k, c.dtype), padding=pad) + eps
    return num / den


def expected_input(x: Tensor, c: Tensor, estimate: Tensor) -> Tensor:
    return c * x + (1.0 - c) * estimate


def propagate_certainty(c: Tensor, cert_weight: Tensor, stride: int = 1) -> Tensor:
    k = cert_weight.shape[-1]
    return sigmoid(conv2d(c, cert_weight, stride=stride, padding=(k - 1) // 2))


class IConvLayer(Module):
    """Imputed convolution.

    Each input is replaced by ``c*x + (1-c)*estimate`` before a regular
    convolution, where ``estimate`` comes from :func:`feature_estimate`; the certainty map is carried forward by a
    learned single-channel convolution and a sigmoid.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int = 3,
        rng: np.random.Generator | None = None,
        estimator_size: int = 5,
        stride: int = 1,
        shared_estimator: bool = False,
        alpha: float = 0.2,
        use_pixel_norm: bool = True,
        dtype=np.float32,
        eps: float = EPS_H,
    ):
        if k % 2 == 0 or estimator_size % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = parameter(rng.standard_normal((c_out, c_in, k, k)).astype(dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        n_kernels = 1 if shared_estimator else c_in
        # all-ones start: with the certainty-sum denominator the estimate is
        # then the certainty-weighted local mean
        self.est_kernel = parameter(np.ones((n_kernels, estimator_size, estimator_size), dtype=dtype))
        self.cert_weight = parameter(rng.standard_normal((1, 1, k, k)).astype(dtype))
        self.scale = math.sqrt(2.0) / math.sqrt(c_in * k * k)
        self.cert_scale = 1.0 / math.sqrt(k * k)
        self.k = k
        self.stride = stride
        self.alpha = alpha
        self.use_pixel_norm = use_pixel_norm
        self.eps = eps

    def filter(self) -> Tensor:
        return self.weight * self.scale

    def cert_filter(self) -> Tensor:
        return self.cert_weight * self.cert_scale

    def activation(self, y: Tensor) -> Tensor:
        y = leaky_relu(y, self.alpha)
        return pixel_norm(y) if self.use_pixel_norm else y

    def __call__(self, x: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return iconv_forward(x, c, self)

    def plain(self, x: Tensor) -> Tensor:
        """The same layer with imputation switched off."""
        y = conv2d(x, self.filter(), self.bias, self.stride, (self.k - 1) // 2)
        return self.activation(y)


def iconv_forward(x: Tensor, c: Tensor, layer: IConvLayer) -> tuple[Tensor, Tensor]:
    estimate = feature_estimate(x, c, layer.est_kernel, layer.eps)
    filled = expected_input(x, c, estimate)
    y = conv2d(filled, layer.filter(), layer.bias, layer.stride, (layer.k - 1) // 2)
    return layer.activation(y), propagate_certainty(c, layer.cert_filter(), layer.stride)


def certainty_weighted_avg_pool(x: Tensor, c: Tensor, eps: float = EPS_H) -> tuple[Tensor, Tensor]:
    """2x2/stride-2 pooling where each pixel is weighted by its certainty."""
    _check_certainty(x, c)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"certainty pooling needs even spatial dims, got {(h, w)}")
    c_sum = sum_pool2x(c)
    pooled = sum_pool2x(x * c) / (c_sum + eps)
    return pooled, c_sum * 0.25


class SkipFusion(Module):
    """Certainty-weighted blend of encoder and decoder features.

    The two positive weights are stored as logs, so they stay positive under
    any optimizer step; both start at 1.
    """

    def __init__(self, dtype=np.float32, eps: float = EPS_H):
        self.log_w_shallow = parameter(np.zeros(1, dtype=dtype))
        self.log_w_deep = parameter(np.zeros(1, dtype=dtype))
        self.eps = eps

    @property
    def weights(self) -> tuple[float, float]:
        return float(np.exp(self.log_w_shallow.data[0])), float(np.exp(self.log_w_deep.data[0]))

    def shallow_share(self, c_shallow: Tensor, c_deep: Tensor) -> Tensor:
        a = c_shallow * self.log_w_shallow.exp()
        b = c_deep * self.log_w_deep.exp()
        return a / (a + b + self.eps)

    def __call__(self, x_shallow, c_shallow, x_deep, c_deep) -> tuple[Tensor, Tensor]:
        return skip_fuse(x_shallow, c_shallow, x_deep, c_deep, self)


def skip_fuse(
    x_shallow: Tensor,
    c_shallow: Tensor,
    x_deep: Tensor,
    c_deep: Tensor,
    fusion: SkipFusion,
) -> tuple[Tensor, Tensor]:
    if x_shallow.shape != x_deep.shape:
        raise ShapeError(f"skip features differ: {x_shallow.shape} vs {x_deep.shape}")
    _check_certainty(x_shallow, c_shallow)
    _check_certainty(x_deep, c_deep)
    g = fusion.shallow_share(c_shallow, c_deep)
    x = g * x_shallow + (1.0 - g) * x_deep
    c = g * c_shallow + (1.0 - g) * c_deep
    return x, c
