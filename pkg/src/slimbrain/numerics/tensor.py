"""Tape-based reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one input requires a gradient, the output keeps references to its
inputs and a closure mapping the output gradient to input gradients.
:func:`backward` walks that graph in reverse topological order.

Elementwise binary ops do not broadcast; use :func:`broadcast_to` or
:func:`reshape` explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32
        self.check_finite = False


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Switch the default dtype; ``float64`` also turns on finiteness checks."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = (_state.dtype, _state.check_finite)
    _state.dtype = dtype
    _state.check_finite = dtype is np.float64
    try:
        yield
    finally:
        _state.dtype, _state.check_finite = prev


def default_dtype():
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _state.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inputs(op: str, arrays: Iterable[np.ndarray]):
    if not _state.check_finite:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _check_inputs("add", (a.data, b.data))
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    _check_inputs("sub", (a.data, b.data))
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    _check_inputs("mul", (a.data, b.data))
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    _check_inputs("scale", (a.data,))
    c = float(c)
    return _make("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    _check_inputs("add_scalar", (a.data,))
    return _make("add_scalar", a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    _check_inputs("gelu", (x.data,))
    xd = x.data
    dt = xd.dtype.type
    k = dt(np.sqrt(2.0 / np.pi))
    c = dt(0.044715)
    x2 = xd * xd
    th = np.tanh(k * xd * (1 + c * x2))
    out = dt(0.5) * xd * (1 + th)

    def backward(g):
        dinner = k * (1 + dt(3) * c * x2)
        return (g * (dt(0.5) * (1 + th) + dt(0.5) * xd * (1 - th * th) * dinner),)

    return _make("gelu", out, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    src = x.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", np.ascontiguousarray(out), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat: empty input")
    ref = list(xs[0].shape)
    ax = axis % len(ref)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError("concat", xs[0].shape, t.shape)
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=ax)
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))))
        return (full,)

    return _make("take", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.asarray(out, dtype=x.data.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul. ``b`` is 2-D or has the same leading dims as ``a``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_inputs("matmul", (a.data, b.data))
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over any leading dims; weight is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear", weight.shape, bias.shape)
    _check_inputs("linear", (x.data, weight.data))
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_inputs("softmax", (x.data,))
    y = _softmax_np(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    y = x - x.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over batched (B, N, d) / (B, M, d) operands."""
    if q.ndim != 3 or k.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError("scaled_attention", q.shape, k.shape, v.shape)
    _check_inputs("scaled_attention", (q.data, k.data, v.data))
    qd, kd, vd = q.data, k.data, v.data
    sc = qd.dtype.type(1.0 / np.sqrt(qd.shape[-1]))
    probs = _softmax_np((qd * sc) @ np.swapaxes(kd, 1, 2))
    out = probs @ vd

    def backward(g):
        gv = np.swapaxes(probs, 1, 2) @ g
        gs = g @ np.swapaxes(vd, 1, 2)
        gs -= (gs * probs).sum(axis=-1, keepdims=True)
        gs *= probs
        gs *= sc
        return gs @ kd, np.swapaxes(gs, 1, 2) @ qd, gv

    return _make("scaled_attention", out, (q, k, v), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    _check_inputs("layer_norm", (x.data,))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape("mse", pred, target)
    _check_inputs("mse", (pred.data, target.data))
    d = pred.data - target.data
    n = d.size
    out = np.asarray((d * d).sum() / n, dtype=d.dtype)

    def backward(g):
        gd = d * (2.0 * g / n)
        return gd, -gd

    return _make("mse", out, (pred, target), backward)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: quadratic below ``beta``, linear above."""
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    _same_shape("smooth_l1", pred, target)
    _check_inputs("smooth_l1", (pred.data, target.data))
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    out = np.asarray(elem.sum() / n, dtype=d.dtype)

    def backward(g):
        gd = np.where(small, d / beta, np.sign(d)) * (g / n)
        return gd, -gd

    return _make("smooth_l1", out, (pred, target), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (n, classes) logits against integer labels."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    _check_inputs("cross_entropy", (logits.data,))
    probs = _softmax_np(logits.data.copy())
    n = y.size
    rows = np.arange(n)
    out = np.asarray(-np.log(np.maximum(probs[rows, y], 1e-30)).mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = probs.copy()
        grad[rows, y] -= 1.0
        return (grad * (g / n),)

    return _make("cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the gradients contributed by this call, keyed by leaf tensor.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, ())
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return contributed
