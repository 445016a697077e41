"""Dense tensors with tape-based reverse-mode differentiation.

Every backward rule is written in terms of other taped operations, so a
backward pass run with ``create_graph=True`` is itself differentiable.  That
is what the masked gradient penalty needs: the penalty is a function of
``dD/dx`` and has to be differentiated again with respect to the critic
weights.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = mode
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Function:
    """One node of the tape.

    ``forward`` sees raw arrays; ``backward`` receives the output gradient as a
    Tensor plus a tuple saying which inputs need a gradient, and returns one
    Tensor (or None) per input.
    """

    def __init__(self, *inputs: "Tensor", **attrs):
        self.inputs = inputs
        for k, v in attrs.items():
            setattr(self, k, v)

    @property
    def name(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: "Tensor", needs: tuple) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **attrs) -> "Tensor":
        fn = cls(*inputs, **attrs)
        out = fn.forward(*(t.data for t in inputs))
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=track)
        if track:
            result._ctx = fn
        else:
            fn.inputs = ()
        return result


class Tensor:
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._lift(other))

    def __getitem__(self, index):
        return Slice.apply(self, index=_normalize_index(index, self.ndim))

    # -- shape / reductions ---------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=_normalize_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        ax = _normalize_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in ax])) if ax else 1
        return self.sum(axis=ax, keepdims=keepdims) / float(count)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=_normalize_axis(axis, self.ndim), keepdims=keepdims)

    def broadcast_to(self, shape) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def sum_to(self, shape) -> "Tensor":
        return SumTo.apply(self, shape=tuple(shape))

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)


def _normalize_axis(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _normalize_index(index, ndim: int) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int)):
            raise TypeError("only basic int/slice indexing is supported")
    return index


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def _shape_of_sum(shape: tuple, axis: tuple) -> tuple:
    return tuple(1 if i in axis else s for i, s in enumerate(shape))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            g.sum_to(a.shape) if needs[0] else None,
            g.sum_to(b.shape) if needs[1] else None,
        )


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            g.sum_to(a.shape) if needs[0] else None,
            (-g).sum_to(b.shape) if needs[1] else None,
        )


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            (g * b).sum_to(a.shape) if needs[0] else None,
            (g * a).sum_to(b.shape) if needs[1] else None,
        )


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = (g / b).sum_to(a.shape) if needs[0] else None
        gb = (-(g * a) / (b * b)).sum_to(b.shape) if needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (-g,)


class Pow(Function):
    """Power with a constant exponent."""

    def forward(self, a):
        return a**self.exponent

    def backward(self, g, needs):
        (a,) = self.inputs
        p = self.exponent
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Sqrt(Function):
    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * reciprocal_safe(sqrt(a)) * 0.5,)


class ReciprocalSafe(Function):
    """1/x with 0 where x == 0.

    Used where a true singularity is always multiplied by a zero gradient
    (e.g. the derivative of a norm at the origin).
    """

    def forward(self, a):
        out = np.zeros_like(a)
        nz = a != 0
        out[nz] = 1.0 / a[nz]
        return out

    def backward(self, g, needs):
        (a,) = self.inputs
        r = reciprocal_safe(a)
        return (-(g * r * r),)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * _recompute(self, exp, a),)


def _recompute(fn: Function, op, a: Tensor) -> Tensor:
    # Under create_graph the output must be a taped function of the input.
    if is_grad_enabled() and a.requires_grad:
        return op(a)
    return _const(fn.__class__(a).forward(a.data))


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g * _const(np.sign(a.data)),)


class Sigmoid(Function):
    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def backward(self, g, needs):
        (a,) = self.inputs
        s = _recompute(self, sigmoid, a)
        return (g * s * (1.0 - s),)


class Tanh(Function):
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        t = _recompute(self, tanh, a)
        return (g * (1.0 - t * t),)


class LeakyReLU(Function):
    def forward(self, a):
        return np.where(a > 0, a, a * self.alpha).astype(a.dtype, copy=False)

    def backward(self, g, needs):
        (a,) = self.inputs
        slope = np.where(a.data > 0, 1.0, self.alpha).astype(a.dtype)
        return (g * _const(slope),)


class Clamp(Function):
    """Clamp to [lo, hi]; either bound may be None.  Subgradient 0 at the kinks."""

    def forward(self, a):
        return np.clip(a, self.lo, self.hi)

    def backward(self, g, needs):
        (a,) = self.inputs
        keep = np.ones(a.shape, dtype=bool)
        if self.lo is not None:
            keep &= a.data > self.lo
        if self.hi is not None:
            keep &= a.data < self.hi
        return (g * _const(keep.astype(a.dtype)),)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


class Sum(Function):
    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        (a,) = self.inputs
        if not self.keepdims:
            g = g.reshape(_shape_of_sum(a.shape, self.axis))
        return (g.broadcast_to(a.shape),)


class Max(Function):
    """Max reduction; the gradient goes to the first maximising element."""

    def forward(self, a):
        return np.max(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        (a,) = self.inputs
        kshape = _shape_of_sum(a.shape, self.axis)
        # move reduced axes to the back so argmax picks one element per output
        keep_axes = [i for i in range(a.ndim) if i not in self.axis]
        perm = keep_axes + list(self.axis)
        moved = np.transpose(a.data, perm)
        flat = moved.reshape(moved.shape[: len(keep_axes)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        onehot = onehot.reshape(moved.shape)
        onehot = np.transpose(onehot, np.argsort(perm))
        if not self.keepdims:
            g = g.reshape(kshape)
        return (g.broadcast_to(a.shape) * _const(onehot),)


class BroadcastTo(Function):
    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g.sum_to(a.shape),)


class SumTo(Function):
    """Inverse of broadcasting: sum ``a`` down to ``shape``."""

    def forward(self, a):
        return _sum_to(a, self.shape)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g.broadcast_to(a.shape),)

    @classmethod
    def apply(cls, a: Tensor, shape: tuple) -> Tensor:
        if a.shape == tuple(shape):
            return a
        return super().apply(a, shape=shape)


def _sum_to(a: np.ndarray, shape: tuple) -> np.ndarray:
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot sum {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1
    )
    out = a.sum(axis=axes, keepdims=True) if axes else a
    return out.reshape(shape)


class Reshape(Function):
    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g, needs):
        (a,) = self.inputs
        return (g.reshape(a.shape),)


class Transpose(Function):
    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, needs):
        return (g.transpose(tuple(np.argsort(self.axes))),)


class Slice(Function):
    def forward(self, a):
        return a[self.index].copy()

    def backward(self, g, needs):
        (a,) = self.inputs
        return (Embed.apply(g, index=self.index, shape=a.shape),)


class Embed(Function):
    """Place ``a`` at ``index`` inside a zero tensor of ``shape`` (adjoint of Slice)."""

    def forward(self, a):
        out = np.zeros(self.shape, dtype=a.dtype)
        out[self.index] = a
        return out

    def backward(self, g, needs):
        return (g[self.index],)


class Concat(Function):
    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g, needs):
        grads = []
        start = 0
        for t, need in zip(self.inputs, needs):
            stop = start + t.shape[self.axis]
            if need:
                index = tuple(
                    slice(start, stop) if i == self.axis else slice(None) for i in range(g.ndim)
                )
                grads.append(g[index])
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


class MatMul(Function):
    """Batched matrix product with numpy broadcasting over leading axes."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-d")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = (g @ swap_last(b)).sum_to(a.shape) if needs[0] else None
        gb = (swap_last(a) @ g).sum_to(b.shape) if needs[1] else None
        return ga, gb


def swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(tuple(axes))


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Im2Col(Function):
    """[N,C,H,W] -> [N, C*k*k, H'*W'] patch matrix (zero padding)."""

    def forward(self, x):
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        return cols.reshape(n, c * k * k, ho * wo)

    def backward(self, g, needs):
        (x,) = self.inputs
        return (Col2Im.apply(g, x_shape=x.shape, k=self.k, stride=self.stride, padding=self.padding),)


class Col2Im(Function):
    """Adjoint of Im2Col: scatter-add patches back to an image."""

    def forward(self, cols):
        n, c, h, w = self.x_shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        cols = cols.reshape(n, c, k, k, ho, wo)
        out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
        if p:
            out = np.ascontiguousarray(out[:, :, p : p + h, p : p + w])
        return out

    def backward(self, g, needs):
        return (Im2Col.apply(g, k=self.k, stride=self.stride, padding=self.padding),)


def _window(a, i, j, s, ho, wo):
    return a[:, :, i : i + s * ho : s, j : j + s * wo : s]


class DepthwiseConv(Function):
    """Per-channel correlation of x [N,C,H,W] with w [C,k,k] by shifted adds.

    DepthwiseConv, DepthwiseConvT and DepthwiseWeightGrad are the three
    bilinear maps of one trilinear form, so each backward is built from the
    other two and stays differentiable to any order.
    """

    def forward(self, x, w):
        n, c, h, wd = x.shape
        k, s, p = w.shape[-1], self.stride, self.padding
        ho, wo = _conv_out(h, k, s, p), _conv_out(wd, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += w[None, :, i, j, None, None] * _window(xp, i, j, s, ho, wo)
        return out

    def backward(self, g, needs):
        x, w = self.inputs
        attrs = dict(stride=self.stride, padding=self.padding)
        gx = DepthwiseConvT.apply(g, w, x_shape=x.shape, **attrs) if needs[0] else None
        gw = DepthwiseWeightGrad.apply(x, g, k=w.shape[-1], **attrs) if needs[1] else None
        return gx, gw


class DepthwiseConvT(Function):
    """Adjoint of DepthwiseConv with respect to its input."""

    def forward(self, g, w):
        n, c, h, wd = self.x_shape
        k, s, p = w.shape[-1], self.stride, self.padding
        ho, wo = g.shape[-2:]
        out = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=np.result_type(g, w))
        for i in range(k):
            for j in range(k):
                _window(out, i, j, s, ho, wo)[...] += w[None, :, i, j, None, None] * g
        if p:
            out = np.ascontiguousarray(out[:, :, p : p + h, p : p + wd])
        return out

    def backward(self, u, needs):
        g, w = self.inputs
        attrs = dict(stride=self.stride, padding=self.padding)
        gg = DepthwiseConv.apply(u, w, **attrs) if needs[0] else None
        gw = DepthwiseWeightGrad.apply(u, g, k=w.shape[-1], **attrs) if needs[1] else None
        return gg, gw


class DepthwiseWeightGrad(Function):
    """Adjoint of DepthwiseConv with respect to its kernel: [C,k,k]."""

    def forward(self, x, g):
        k, s, p = self.k, self.stride, self.padding
        ho, wo = g.shape[-2:]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.empty((x.shape[1], k, k), dtype=np.result_type(x, g))
        for i in range(k):
            for j in range(k):
                out[:, i, j] = np.einsum("nchw,nchw->c", _window(xp, i, j, s, ho, wo), g)
        return out

    def backward(self, v, needs):
        x, g = self.inputs
        attrs = dict(stride=self.stride, padding=self.padding)
        gx = DepthwiseConvT.apply(g, v, x_shape=x.shape, **attrs) if needs[0] else None
        gg = DepthwiseConv.apply(x, v, **attrs) if needs[1] else None
        return gx, gg


class Upsample2x(Function):
    """Nearest-neighbour 2x upsampling of the last two axes."""

    def forward(self, a):
        return a.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g, needs):
        return (SumPool2x.apply(g),)


class SumPool2x(Function):
    """Sum over non-overlapping 2x2 windows (adjoint of Upsample2x)."""

    def forward(self, a):
        h, w = a.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 pooling needs even spatial dims, got {(h, w)}")
        return a.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2)).sum(axis=(-3, -1))

    def backward(self, g, needs):
        return (Upsample2x.apply(g),)


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def reciprocal_safe(a: Tensor) -> Tensor:
    return ReciprocalSafe.apply(a)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    return LeakyReLU.apply(a, alpha=float(alpha))


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return Clamp.apply(a, lo=lo, hi=hi)


def maximum(a: Tensor, c: float) -> Tensor:
    """max(a, c) for a constant c; subgradient 0 at a == c."""
    return Clamp.apply(a, lo=c, hi=None)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    (ax,) = _normalize_axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"cannot concatenate {ref} with {t.shape} along axis {ax}")
    return Concat.apply(*tensors, axis=ax)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: x [N, in] @ weight.T [in, out] + bias."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} features, got {x.shape[-1]}")
    out = x @ weight.transpose(1, 0)
    if bias is not None:
        out = out + bias
    return out


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis``; gradient at the origin is taken as 0."""
    return sqrt((x * x).sum(axis=axis, keepdims=keepdims))


def linf_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.abs().max(axis=axis, keepdims=keepdims)


def upsample2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(x)


def avg_pool2x(x: Tensor) -> Tensor:
    return SumPool2x.apply(x) * 0.25


def sum_pool2x(x: Tensor) -> Tensor:
    return SumPool2x.apply(x)


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each location's channel vector to unit RMS."""
    return x / sqrt((x * x).mean(axis=1, keepdims=True) + eps)


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    return Im2Col.apply(x, k=int(k), stride=int(stride), padding=int(padding))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x [N,C_in,H,W] with weight [C_out,C_in,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {c_in}")
    if kh != kw:
        raise ShapeError("conv2d kernels must be square")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    cols = im2col(x, kh, stride, padding)
    out = (weight.reshape(c_out, c_in * kh * kw) @ cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1)
    return out


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution; weight is [C,k,k]."""
    if x.ndim != 4 or weight.ndim != 3:
        raise ShapeError("depthwise_conv2d expects 4-d input and [C,k,k] weight")
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d input has {c} channels, weight has {weight.shape[0]}")
    k = weight.shape[1]
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("depthwise_conv2d output would be empty")
    return DepthwiseConv.apply(x, weight, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def _topo_order(roots: Iterable[Tensor]) -> list:
    order, seen = [], set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._ctx is not None:
                for inp in t._ctx.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
    return order


def _run_backward(outputs, grad_outputs, targets, create_graph: bool) -> dict:
    order = _topo_order(outputs)
    target_ids = {id(t) for t in targets} if targets is not None else None

    # prune nodes that cannot reach a target
    relevant = set()
    for t in order:
        if target_ids is None:
            if t.requires_grad:
                relevant.add(id(t))
        elif id(t) in target_ids or (
            t._ctx is not None and any(id(i) in relevant for i in t._ctx.inputs)
        ):
            relevant.add(id(t))

    grads = {}
    for out, g in zip(outputs, grad_outputs):
        grads[id(out)] = grads[id(out)] + g if id(out) in grads else g

    collected = {}
    with set_grad_enabled(create_graph):
        for t in reversed(order):
            if id(t) not in relevant:
                continue
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if target_ids is None:
                if t._ctx is None:
                    collected[id(t)] = (t, g)
            elif id(t) in target_ids:
                collected[id(t)] = (t, g)
            fn = t._ctx
            if fn is None:
                continue
            needs = tuple(i.requires_grad and id(i) in relevant for i in fn.inputs)
            in_grads = fn.backward(g, needs)
            for inp, ig, need in zip(fn.inputs, in_grads, needs):
                if not need or ig is None:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{fn.name} backward produced {ig.shape} for input {inp.shape}"
                    )
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    return collected


def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``inputs`` is given only those tensors receive gradients and the
    rest of the graph is pruned.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    collected = _run_backward([loss], [seed], inputs, create_graph=False)
    for t, g in collected.values():
        t.grad = g.data.copy() if t.grad is None else t.grad + g.data


def grad(
    outputs: Union[Tensor, Sequence[Tensor]],
    inputs: Sequence[Tensor],
    grad_outputs: Optional[Sequence[Tensor]] = None,
    create_graph: bool = False,
) -> list:
    """Return d(sum outputs)/d(inputs) without touching ``.grad``.

    With ``create_graph=True`` the returned tensors are taped and can be
    differentiated again.  Inputs the outputs do not depend on get a zero
    tensor.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones(o.shape, dtype=o.dtype)) for o in outputs]
    outputs = [o for o in outputs]
    live = [(o, g) for o, g in zip(outputs, grad_outputs) if o.requires_grad]
    if not live:
        return [zeros(t.shape, dtype=t.dtype) for t in inputs]
    collected = _run_backward([o for o, _ in live], [g for _, g in live], list(inputs), create_graph)
    result = []
    for t in inputs:
        if id(t) in collected:
            result.append(collected[id(t)][1])
        else:
            result.append(zeros(t.shape, dtype=t.dtype))
    return result
