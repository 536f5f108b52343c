"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A ``Tape`` records every primitive applied to tensors that require gradients,
in creation order (which is automatically a topological order). ``backward``
walks the tape in reverse and accumulates gradients for every recorded tensor.
Tapes are single-use and single-threaded; distinct tapes may live on distinct
threads.

Training runs in float32; gradient checks use float64.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAGS = {"f32": 0, "f64": 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

_local = threading.local()


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class DtypeMismatch(AutodiffError):
    pass


def _active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tape:
    """Append-only record of primitive applications, used once for backward."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, "Tensor"] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise AutodiffError("nested tapes are not supported")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None

    def _record(self, node: "_Node"):
        self._nodes.append(node)
        self._tensors[id(node.out)] = node.out
        for t in node.inputs:
            self._tensors[id(t)] = t

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/dx for every recorded tensor x."""
        if self._consumed:
            raise AutodiffError("tape already consumed")
        if loss.data.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads = self._grads
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of the loss w.r.t. ``t``; zeros when unreachable."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: "Tensor", inputs: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """Dense n-d array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype: Optional[str] = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype])
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constants of the same dtype
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def tensor(data, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def param(data, dtype: str = "f32") -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(*ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise DtypeMismatch(f"mixed dtypes {d0} and {t.data.dtype}")


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(_Node(out, inputs, backward))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reverse numpy broadcasting: reduce g down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_sum_to_shape(g * b.data, a.shape),
                                         _sum_to_shape(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_sum_to_shape(g / b.data, a.shape),
                                         _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# matmul / structural primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _make(out, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape = a.shape

    def bw(g):
        gi = np.zeros(shape, dtype=g.dtype)
        gi[key] = g
        return (gi,)

    return _make(out, (a,), bw)


def pad2d(a: Tensor, p: int) -> Tensor:
    """Zero-pad the last two axes by ``p`` on every side."""
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(a.data, width)
    key = (Ellipsis, slice(p, a.shape[-2] + p), slice(p, a.shape[-1] + p))
    return _make(out, (a,), lambda g: (g[key],))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    old = a.shape
    return _make(out, (a,), lambda g: (_sum_to_shape(g, old),))


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[ax] for ax in axis]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.max(axis=axis, keepdims=keepdims)

    def bw(g):
        full = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == full).astype(g.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (mask * gk,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# elementwise unary primitives

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bw)


def box_filter(a: Tensor, k: int) -> Tensor:
    """Valid-mode mean over k×k windows of the last two axes."""
    h, w = a.shape[-2], a.shape[-1]
    if h < k or w < k:
        raise ShapeMismatch(f"box_filter window {k} exceeds input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(a.data, (k, k), axis=(-2, -1))
    out = win.mean(axis=(-2, -1))

    def bw(g):
        # each input pixel belongs to all windows covering it
        width = [(0, 0)] * (a.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        gp = np.pad(g, width)
        gw = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(-2, -1))
        return (gw.sum(axis=(-2, -1)) / (k * k),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# verification

def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be scalar-valued; ``point`` must be f64.
    """
    if point.dtype != "f64":
        raise AutodiffError("grad_check requires f64 input")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = fn(x)
        tape.backward(loss)
    analytic = tape.grad(x)
    if not np.all(np.isfinite(analytic)):
        raise AutodiffError("non-finite analytic gradient")

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(x.data.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(x.data.copy())).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise AutodiffError("non-finite numeric gradient")
    err = np.abs(analytic.reshape(-1) - numeric) / (np.abs(numeric) + 1e-12)
    return float(err.max())


# ---------------------------------------------------------------------------
# serialization: (rank u32, extents u64 each, dtype tag u8, raw LE buffer)

def write_tensor(buf, t: Tensor) -> None:
    buf.write(struct.pack("<I", t.ndim))
    for n in t.shape:
        buf.write(struct.pack("<Q", n))
    buf.write(struct.pack("<B", _DTYPE_TAGS[t.dtype]))
    buf.write(np.ascontiguousarray(t.data, dtype="<" + ("f4" if t.dtype == "f32" else "f8")).tobytes())


def read_tensor(buf) -> Tensor:
    (rank,) = struct.unpack("<I", buf.read(4))
    shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(rank))
    (tag,) = struct.unpack("<B", buf.read(1))
    dtype = _TAG_DTYPES[tag]
    itemsize = 4 if dtype == "f32" else 8
    n = int(np.prod(shape)) if shape else 1
    raw = buf.read(n * itemsize)
    data = np.frombuffer(raw, dtype="<f4" if dtype == "f32" else "<f8").reshape(shape)
    return Tensor(data.copy(), dtype=dtype)
