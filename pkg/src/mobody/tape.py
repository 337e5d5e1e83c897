"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was computed; calling
:func:`backprop` on a scalar result walks the recorded graph in reverse and
accumulates gradients into every reachable tensor with ``requires_grad``.
:func:`stop_gradient` inserts a leaf that is value-identical to its input but
blocks gradient flow entirely.

Only the operations the losses in this package need are implemented; all of
them preserve the dtype of their inputs (training runs in float32, gradient
verification clones everything to float64).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar (scalars are promoted as gradient-free constants)
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical leaf through which no gradient flows."""
    return Tensor(x.data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _parents=(a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _parents=(a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _parents=(a, b))
    out._vjp = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    out = Tensor(x.data @ w.data.T + b.data, _parents=(x, w, b))
    out._vjp = lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, _parents=(a, b))
    out._vjp = lambda g: (g @ b.data.T, a.data.T @ g)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))
    out._vjp = lambda g: (g * (x.data > 0),)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, _parents=(x,))
    out._vjp = lambda g: (g * (1.0 - y * y),)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, _parents=(x,))
    out._vjp = lambda g: (g * y,)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), _parents=(x,))
    out._vjp = lambda g: (g / x.data,)
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y, _parents=(x,))
    out._vjp = lambda g: (g * (0.5 / y),)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, _parents=(x,))
    out._vjp = lambda g: (g * (2.0 * x.data),)
    return out


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data), _parents=(x,))
    out._vjp = lambda g: (g * np.sign(x.data),)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where lo <= x <= hi."""
    out = Tensor(np.clip(x.data, lo, hi), _parents=(x,))
    out._vjp = lambda g: (g * ((x.data >= lo) & (x.data <= hi)),)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the smaller input (ties to a)."""
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), _parents=(a, b))
    out._vjp = lambda g: (
        _unbroadcast(g * take_a, a.data.shape),
        _unbroadcast(g * ~take_a, b.data.shape),
    )
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop], _parents=(x,))

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    out._vjp = vjp
    return out


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    out._vjp = vjp
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), _parents=(x,))
    out._vjp = lambda g: (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False),)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), _parents=(x,))
    out._vjp = lambda g: (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backprop(loss: Tensor, params: list[Tensor] | None = None):
    """Accumulate dloss/dx into ``x.grad`` for every tensor reachable from ``loss``.

    ``loss`` must be scalar. Existing ``grad`` fields in the graph are reset
    first, so repeated calls do not accumulate across graphs. When ``params``
    is given, returns their gradient arrays in order (zeros for parameters the
    loss does not depend on).
    """
    if loss.data.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    if params is not None:
        for p in params:
            p.grad = None  # params outside this graph must not keep stale grads
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
    if params is not None:
        return [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params
        ]
    return None
