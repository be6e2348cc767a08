"""Reverse-mode autodiff over dense numpy arrays.

A Tensor wraps an ndarray plus a gradient accumulator and a backpointer to
the operation that produced it. Calling backward() on a scalar loss walks
the graph in reverse topological order and accumulates gradients into every
tensor with requires_grad set. Gradients add up across fan-out and across
repeated backward() calls until zero_grad().
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / profiling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- graph machinery -----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # pass-local grads; flushed into .grad additively so repeated
        # backward() calls accumulate without double counting stale values
        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            go = local.pop(id(node), None)
            if go is None:
                continue
            if node.requires_grad or node is self:
                node.grad = go.copy() if node.grad is None else node.grad + go
            if node._backward is None:
                continue
            for p, g in zip(node._parents, node._backward(go)):
                if g is None or not (p.requires_grad or p._parents):
                    continue
                prev = local.get(id(p))
                local[id(p)] = g if prev is None else prev + g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / other)
        raise TypeError("tensor/tensor division not supported")

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, attaching graph edges only when grad is enabled."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(go):
        return _unbroadcast(go, a.data.shape), _unbroadcast(go, b.data.shape)

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda go: (-go,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(go):
        return (_unbroadcast(go * b.data, a.data.shape),
                _unbroadcast(go * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda go: (go * s,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def backward(go):
        return (go * p * a.data ** (p - 1),)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(go):
        return (go * (a.data > 0),)

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(go):
        return (go * data * (1.0 - data),)

    return _make(data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda go: (go * data,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda go: (go / a.data,))


def softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(go):
        dot = (go * data).sum(axis=axis, keepdims=True)
        return (data * (go - dot),)

    return _make(data, (a,), backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def backward(go):
        return (go - np.exp(data) * go.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward)


# -- shape / reduction ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda go: (go.reshape(orig),))


def astype(a: Tensor, dtype) -> Tensor:
    """Dtype cast; the gradient is cast back to the input dtype."""
    orig = a.data.dtype
    return _make(a.data.astype(dtype), (a,),
                 lambda go: (go.astype(orig),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(go):
        if axis is None:
            return (np.broadcast_to(go, a.data.shape).astype(a.dtype, copy=True),)
        g = go
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[d] for d in axis]))
    else:
        n = a.data.shape[axis]
    return mul_scalar(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (inverse of concat)."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(go):
        g = np.zeros_like(a.data)
        g[idx] = go
        return (g,)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        for d in range(len(ref)):
            if d != axis % len(ref) and t.data.shape[d] != ref[d]:
                raise ValueError(
                    f"concat: mismatched non-concat dim {d}: {t.data.shape} vs {ref}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(go):
        return tuple(np.split(go, offsets, axis=axis))

    return _make(data, tuple(tensors), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), mean over the spatial dims."""
    n, c, h, w = a.data.shape
    data = a.data.mean(axis=(2, 3))

    def backward(go):
        return (np.broadcast_to(go[:, :, None, None] / (h * w), a.data.shape).copy(),)

    return _make(data, (a,), backward)


def upsample_nearest2x(a: Tensor) -> Tensor:
    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(go):
        n, c, h2, w2 = go.shape
        return (go.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _make(data, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x: (N, Fin), w: (Fin, Fout), b: (Fout,)."""
    data = x.data @ w.data
    if b is not None:
        data = data + b.data

    def backward(go):
        gx = go @ w.data.T
        gw = x.data.T @ go
        if b is None:
            return gx, gw
        return gx, gw, go.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """sum_k weights[k] * xs[k] for same-shape tensors; one graph node.

    Gradient w.r.t. weights[k] is <go, xs[k]>; w.r.t. xs[k] it is
    weights[k] * go. This is the mixed-operation aggregation used on every
    searched edge.
    """
    if weights.data.ndim != 1 or len(xs) != weights.data.shape[0]:
        raise ValueError("weights must be 1-d with one entry per tensor")
    data = weights.data[0] * xs[0].data
    for k in range(1, len(xs)):
        data = data + weights.data[k] * xs[k].data

    def backward(go):
        if weights.requires_grad or weights._parents:
            gof = np.ascontiguousarray(go).ravel()
            gw = np.array([np.dot(gof, np.ascontiguousarray(x.data).ravel())
                           for x in xs], dtype=weights.dtype)
        else:
            gw = None
        return (gw,) + tuple(weights.data[k] * go for k in range(len(xs)))

    return _make(data, (weights,) + tuple(xs), backward)


# -- losses ---------------------------------------------------------------------


def cross_entropy_2d(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise cross entropy; logits (N, C, H, W), target (N, H, W) in {0,1}."""
    target = np.asarray(target)
    uniq = np.unique(target)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError(f"target mask must be binary, found values {uniq}")
    target = target.astype(np.int64)
    n, c, h, w = logits.data.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ls = z - lse
    picked = np.take_along_axis(ls, target[:, None], axis=1)[:, 0]
    count = n * h * w
    data = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(go):
        p = np.exp(ls)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
        return (go * (p - onehot) / count,)

    return _make(data, (logits,), backward)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=pred.dtype)
    diff = pred.data - target
    n = diff.size
    data = np.asarray((diff ** 2).sum() / n, dtype=pred.dtype)

    def backward(go):
        return (go * 2.0 * diff / n,)

    return _make(data, (pred,), backward)


def softmax_entropy(logits: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Per-slice entropy of softmax(logits): -sum_c p_c log p_c, in [0, ln C]."""
    p = softmax(logits, axis)
    lp = log_softmax(logits, axis)
    return neg(tsum(mul(p, lp), axis=axis, keepdims=keepdims))
