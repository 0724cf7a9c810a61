"""Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float array. While a ``Tape`` is active every
primitive appends one record (output, parents, backward closure) to it;
``backward(loss)`` replays the records in reverse, which is a valid reverse
topological order because parents are always recorded before their children.
Gradients accumulate additively into ``Tensor.grad`` for leaf tensors that
require gradients.

Default precision is float64: the finite-difference gradient checks used by
the test suite are unreliable at float32.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(RuntimeError):
    """Contract violation in tape or gradient operations."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class Tensor:
    """N-dimensional float array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._tape: Optional[Tape] = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Leaf tensor registered by module containers; always requires grad."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class _Record:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple, backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of executed operations for one forward pass."""

    _active: Optional["Tape"] = None

    def __init__(self):
        self._records: list[_Record] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise AutodiffError("a tape is already active; nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        out._tape = self
        out._is_leaf = False
        self._records.append(_Record(out, tuple(parents), backward_fn))

    def clear(self) -> None:
        self._records.clear()
        self._spent = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise AutodiffError("loss is not connected to this tape")
        if self._spent:
            raise AutodiffError("backward already ran on this tape; clear() it first")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            parent_grads = rec.backward_fn(g)
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._is_leaf:
                    parent.grad = parent.grad + pg if parent.grad is not None else pg.copy()
                else:
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg


def active_tape() -> Optional[Tape]:
    return Tape._active


def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable leaf that requires gradients."""
    if loss._tape is None:
        raise AutodiffError("loss is not connected to a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = Tape._active
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _record(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _record(out, (a,), bw)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through only inside the bounds."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _record(out, (a,), bw)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.maximum(a.data, b.data)

    def bw(g):
        mask = a.data >= b.data  # ties route to the first operand
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _record(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.minimum(a.data, b.data)

    def bw(g):
        mask = a.data <= b.data
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _record(out, (a, b), bw)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sin(a.data)

    def bw(g):
        return (g * np.cos(a.data),)

    return _record(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), bw)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), not the tanh approximation."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted stable softmax along one axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bw)


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(np.asarray(out), (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along an axis with an integer index array (scatter-add backward)."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        key = (slice(None),) * (axis % a.ndim) + (idx,)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(out, (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _record(out, tuple(ts), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; also handles stacked (batched) operands of equal batch shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW layout)


def conv2d_out_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw].

    Computed as a sum of shifted channel contractions: one tensordot per
    kernel offset, which handles stride and dilation exactly.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if min(kh, kw) < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs k>=1, stride>=1, dilation>=1, padding>=0")
    hout = conv2d_out_size(h, kh, stride, dilation, padding)
    wout = conv2d_out_size(wd, kw, stride, dilation, padding)
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out_nhwc = np.zeros((n, hout, wout, cout), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i * dilation : i * dilation + stride * (hout - 1) + 1 : stride,
                    j * dilation : j * dilation + stride * (wout - 1) + 1 : stride]
            out_nhwc += np.tensordot(xs, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))

    def bw(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i * dilation, i * dilation + stride * (hout - 1) + 1, stride),
                    slice(j * dilation, j * dilation + stride * (wout - 1) + 1, stride),
                )
                xs = xp[sl]
                gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _record(out, (x, w), bw)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k)
        )
        return (gx.reshape(n, c, h, w).copy(),)

    return _record(out, (x,), bw)


def upsample_nearest2d(x, scale: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# composed helpers


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


def logit(a, eps: float = 1e-6) -> Tensor:
    """Inverse sigmoid with clamping away from {0, 1}."""
    p = clip(a, eps, 1.0 - eps)
    return log(div(p, add(mul(p, -1.0), 1.0)))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(tsum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, norm)
