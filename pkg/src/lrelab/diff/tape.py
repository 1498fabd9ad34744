"""Reverse-mode differentiation over numpy arrays.

A :class:`Var` records the operation that produced it together with a
vector-Jacobian closure per parent.  :meth:`Var.backward` walks the graph in
reverse topological order and accumulates ``.grad`` on every node.
"""
from __future__ import annotations

import numpy as np
from scipy import special

_SQRT_PI = np.sqrt(np.pi)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Var:
    __array_priority__ = 1000

    __slots__ = ("value", "grad", "_parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents

    # ---- array protocol bits the model code relies on ----
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape})"

    def __len__(self):
        return len(self.value)

    # ---- graph traversal ----
    def backward(self, seed=None):
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    # ---- arithmetic ----
    def __add__(self, other):
        return _binary(self, other, np.add,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(other, self, np.subtract,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(other, self, np.divide,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __pow__(self, power):
        if not np.isscalar(power):
            raise TypeError("only scalar exponents are supported")
        x = self.value
        return Var(x ** power, ((self, lambda g: g * power * x ** (power - 1)),))

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    # ---- reductions and shape ops ----
    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        axes = _norm_axes(axis, self.ndim)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return np.broadcast_to(g, shape)

        return Var(self.value.sum(axis=axes, keepdims=keepdims), ((self, vjp),))

    def mean(self, axis=None, keepdims=False):
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Var(self.value.reshape(shape), ((self, lambda g: g.reshape(old)),))

    def swapaxes(self, a1, a2):
        return Var(self.value.swapaxes(a1, a2),
                   ((self, lambda g: g.swapaxes(a1, a2)),))

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, vjp),))

    # ---- elementwise functions (used through lrelab.diff.functional) ----
    def _exp(self):
        e = np.exp(self.value)
        return Var(e, ((self, lambda g: g * e),))

    def _log(self):
        x = self.value
        return Var(np.log(x), ((self, lambda g: g / x),))

    def _sqrt(self):
        r = np.sqrt(self.value)
        return Var(r, ((self, lambda g: g / (2.0 * r)),))

    def _erf(self):
        x = self.value
        return Var(special.erf(x),
                   ((self, lambda g: g * (2.0 / _SQRT_PI) * np.exp(-x * x)),))

    def _tanh(self):
        t = np.tanh(self.value)
        return Var(t, ((self, lambda g: g * (1.0 - t * t)),))


def _binary(a, b, op, ga, gb):
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(ga(g, av, bv), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(gb(g, av, bv), bv.shape)))
    return Var(op(av, bv), tuple(parents))


def _matmul(a, b):
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul on Var needs operands with ndim >= 2")
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return Var(av @ bv, tuple(parents))


def concatenate(xs, axis):
    values = [x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in xs]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append((x, lambda g, i=i: np.split(g, bounds, axis=axis)[i]))
    return Var(out, tuple(parents))
