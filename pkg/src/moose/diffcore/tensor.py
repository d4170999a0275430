"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the result remembers its parents and a closure that
maps the output gradient to input gradients; :meth:`Tensor.backward` walks
that record in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DegenerateParameterError, DimensionError

__all__ = [
    "Tensor", "as_tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "tanh", "relu", "exp", "sqrt", "square", "sum", "mean", "reshape",
    "swap_last", "concat", "stack", "clamp", "minimum", "amin", "norm",
    "weight_norm_effective", "dense",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def backward(self):
        """Accumulate d(self)/d(x) into ``x.grad`` for every recorded input."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires a gradient")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                # interior nodes keep their gradient for inspection
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = g if node.grad is None else node.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands need at least two axes")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner sizes differ: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one big 2-D product
        flat = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _make((flat @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), backward)


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swap_last(a):
    """Swap the last two axes (matrix transpose on batched inputs)."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    basic = not any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def clamp(a, lo, hi):
    """Hard clamp; gradient is zero wherever the input lies outside [lo, hi]."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b):
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def amin(a, axis=0):
    """Min along ``axis``; the whole gradient goes to the first arg-minimum."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmin(a.data, axis=axis), axis)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=axis).squeeze(axis), (a,), backward)


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; zero gradient where the norm is zero."""
    return sqrt(sum(square(a), axis=axis, keepdims=keepdims))


def weight_norm_effective(v, g):
    """Row-wise ``g * v / ||v||`` over the last axis of ``v``.

    ``g`` has the shape of ``v`` without its last axis.
    """
    v, g = as_tensor(v), as_tensor(g)
    vd, gd = v.data, g.data
    n = np.sqrt((vd * vd).sum(axis=-1))
    if np.any(n == 0.0):
        raise DegenerateParameterError("weight-norm direction has an all-zero row")
    unit = vd / n[..., None]

    def backward(gw):
        gg = (gw * unit).sum(axis=-1)
        gv = (gd / n)[..., None] * (gw - gg[..., None] * unit)
        return gv, gg

    return _make(gd[..., None] * unit, (v, g), backward)


def dense(x, w, b, activation="linear"):
    """Fused ``act(x @ w^T + b)`` for ``w`` of shape (out, in) or (M, out, in).

    A 2-D ``w`` is shared across any leading axes of ``x``; a 3-D ``w`` pairs
    member ``m`` with ``x[m]``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if xd.shape[-1] != wd.shape[-1]:
        raise DimensionError(f"dense: input width {xd.shape[-1]} does not match weight {wd.shape}")
    shared = wd.ndim == 2
    if shared:
        flat = xd.reshape(-1, xd.shape[-1])
        pre = (flat @ wd.T).reshape(xd.shape[:-1] + (wd.shape[0],)) + bd
    else:
        pre = xd @ np.swapaxes(wd, -1, -2) + bd
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "tanh":
        out = np.tanh(pre)
    elif activation == "linear":
        out = pre
    else:
        raise ContractError(f"unknown activation {activation!r}")

    def backward(g):
        if activation == "relu":
            g = g * (out > 0)
        elif activation == "tanh":
            g = g * (1.0 - out * out)
        gb = _unbroadcast(g, bd.shape)
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ wd).reshape(xd.shape), g2.T @ flat, gb
        gx = g @ wd
        gw = np.swapaxes(g, -1, -2) @ xd
        return _unbroadcast(gx, xd.shape), _unbroadcast(gw, wd.shape), gb

    return _make(out, (x, w, b), backward)
