"""Forward-mode differentiation with batched tangents.

A :class:`Dual` carries a primal array of shape ``S`` and ``k`` tangent
directions stacked in an array of shape ``(k, *S)``.  Every operation
propagates the primal and the tangents together, so one pass over a
computation returns the function value and ``k`` Jacobian-vector products.
"""
from __future__ import annotations

import numpy as np
from scipy import special

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def _neg_axes(axis, ndim):
    if axis is None:
        return tuple(range(-ndim, 0))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple((a % ndim) - ndim for a in axis)


class Dual:
    __array_priority__ = 1000

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = np.asarray(primal, dtype=np.float64)
        tangent = np.asarray(tangent, dtype=np.float64)
        if tangent.shape[1:] != self.primal.shape:
            raise ValueError(
                f"tangent shape {tangent.shape} does not stack primal shape {self.primal.shape}")
        self.tangent = tangent

    @property
    def k(self):
        return self.tangent.shape[0]

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self):
        return f"Dual(shape={self.shape}, k={self.k})"

    def __len__(self):
        return len(self.primal)

    # tangent of self viewed with ``ndim`` primal axes (leading size-1 axes added)
    def _t(self, ndim):
        pad = ndim - self.ndim
        if pad <= 0:
            return self.tangent
        return self.tangent.reshape((self.k,) + (1,) * pad + self.shape)

    def _wrap(self, primal, tangent):
        tangent = np.broadcast_to(tangent, (self.k,) + np.shape(primal))
        return Dual(primal, tangent)

    # ---- arithmetic ----
    def __add__(self, other):
        return _linear_binary(self, other, np.add, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return _linear_binary(self, other, np.subtract, -1.0)

    def __rsub__(self, other):
        return _linear_binary(other, self, np.subtract, -1.0)

    def __mul__(self, other):
        a, b = _p(self), _p(other)
        out = a * b
        nd = out.ndim
        t = _scaled(self, b, nd) if isinstance(self, Dual) else None
        t = _acc(t, _scaled(other, a, nd) if isinstance(other, Dual) else None)
        return _carry(self, other, out, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _divide(self, other)

    def __rtruediv__(self, other):
        return _divide(other, self)

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __pow__(self, power):
        if not np.isscalar(power):
            raise TypeError("only scalar exponents are supported")
        x = self.primal
        return Dual(x ** power, self.tangent * (power * x ** (power - 1)))

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    # ---- reductions and shape ops ----
    def sum(self, axis=None, keepdims=False):
        axes = _neg_axes(axis, self.ndim)
        return Dual(self.primal.sum(axis=axes, keepdims=keepdims),
                    self.tangent.sum(axis=axes, keepdims=keepdims))

    def mean(self, axis=None, keepdims=False):
        axes = _neg_axes(axis, self.ndim)
        return Dual(self.primal.mean(axis=axes, keepdims=keepdims),
                    self.tangent.mean(axis=axes, keepdims=keepdims))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        primal = self.primal.reshape(shape)
        return Dual(primal, self.tangent.reshape((self.k,) + primal.shape))

    def swapaxes(self, a1, a2):
        a1, a2 = _neg_axes((a1, a2), self.ndim)
        return Dual(self.primal.swapaxes(a1, a2), self.tangent.swapaxes(a1, a2))

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.primal[idx], self.tangent[(slice(None),) + idx])

    # ---- elementwise functions ----
    def _exp(self):
        e = np.exp(self.primal)
        return Dual(e, self.tangent * e)

    def _log(self):
        return Dual(np.log(self.primal), self.tangent / self.primal)

    def _sqrt(self):
        r = np.sqrt(self.primal)
        return Dual(r, self.tangent / (2.0 * r))

    def _erf(self):
        x = self.primal
        return Dual(special.erf(x), self.tangent * (_TWO_OVER_SQRT_PI * np.exp(-x * x)))

    def _tanh(self):
        t = np.tanh(self.primal)
        return Dual(t, self.tangent * (1.0 - t * t))


def _p(x):
    return x.primal if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def _k(a, b):
    return a.k if isinstance(a, Dual) else b.k


def _scaled(x, factor, nd):
    return x._t(nd) * factor


def _acc(t, extra):
    if t is None:
        return extra
    if extra is None:
        return t
    return t + extra


def _carry(a, b, primal, tangent):
    k = _k(a, b)
    return Dual(primal, np.broadcast_to(tangent, (k,) + primal.shape))


def _linear_binary(a, b, op, sign):
    out = op(_p(a), _p(b))
    nd = out.ndim
    t = a._t(nd) if isinstance(a, Dual) else None
    if isinstance(b, Dual):
        tb = b._t(nd)
        t = tb * sign if t is None else op(t, tb)
    return _carry(a, b, out, t)


def _divide(a, b):
    av, bv = _p(a), _p(b)
    out = av / bv
    nd = out.ndim
    t = a._t(nd) / bv if isinstance(a, Dual) else None
    if isinstance(b, Dual):
        t = _acc(t, -b._t(nd) * (out / bv))
    return _carry(a, b, out, t)


def _matmul(a, b):
    av, bv = _p(a), _p(b)
    out = av @ bv
    nd = max(av.ndim, bv.ndim, 2)
    t = None
    if isinstance(a, Dual):
        ta = a._t(nd) if av.ndim >= 2 else a.tangent
        t = ta @ bv
    if isinstance(b, Dual):
        if bv.ndim == 1:
            tb = (av @ b.tangent[..., None])[..., 0]
        else:
            tb = av @ b._t(nd)
        t = _acc(t, tb)
    return _carry(a, b, out, t)


def concatenate(xs, axis):
    k = next(x.k for x in xs if isinstance(x, Dual))
    primals = [_p(x) for x in xs]
    out = np.concatenate(primals, axis=axis)
    axis = _neg_axes(axis, out.ndim)[0]
    tangents = [x.tangent if isinstance(x, Dual) else np.zeros((k,) + p.shape)
                for x, p in zip(xs, primals)]
    return Dual(out, np.concatenate(tangents, axis=axis))
