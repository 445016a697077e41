"""Parameter containers and equalized-learning-rate layers."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, conv2d, leaky_relu, linear


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter tree.

    Parameters are Tensor attributes with ``requires_grad``; submodules may be
    attributes or lists of modules.  Iteration order follows attribute
    assignment order, so names are stable across builds.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class EqualizedConv2d(Module):
    """Convolution whose weights are stored N(0,1) and scaled by gain/sqrt(fan_in) at runtime."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        bias: bool = True,
        gain: float = math.sqrt(2.0),
        stride: int = 1,
        dtype=np.float32,
    ):
        self.weight = parameter(rng.standard_normal((c_out, c_in, k, k)).astype(dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.scale = gain / math.sqrt(c_in * k * k)
        self.stride = stride
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight * self.scale, self.bias, self.stride, self.padding)


class EqualizedLinear(Module):
    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        bias: bool = True,
        gain: float = math.sqrt(2.0),
        dtype=np.float32,
    ):
        self.weight = parameter(rng.standard_normal((n_out, n_in)).astype(dtype))
        self.bias = parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        self.scale = gain / math.sqrt(n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight * self.scale, self.bias)


class MLP(Module):
    """Two fully connected layers, each followed by LeakyReLU(0.2)."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, dtype=np.float32):
        self.fc1 = EqualizedLinear(n_in, hidden, rng, dtype=dtype)
        self.fc2 = EqualizedLinear(hidden, n_out, rng, dtype=dtype)

    def __call__(self, x: Tensor, slope: Optional[float] = 0.2) -> Tensor:
        return leaky_relu(self.fc2(leaky_relu(self.fc1(x), slope)), slope)
