"""Array functions that work on plain arrays, :class:`Dual` and :class:`Var`.

The transformer is written once against these functions and the ordinary
operators (``+``, ``*``, ``@``, ``.sum`` ...).  Passing numpy arrays runs it
plainly, passing :class:`~lrelab.diff.dual.Dual` values propagates tangents,
and passing :class:`~lrelab.diff.tape.Var` values records a tape.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from lrelab.diff import dual, tape
from lrelab.diff.dual import Dual
from lrelab.diff.tape import Var

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def value(x):
    """Primal value of ``x`` as an ndarray."""
    if isinstance(x, Dual):
        return x.primal
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unary(x, method, fallback):
    if isinstance(x, (Dual, Var)):
        return getattr(x, method)()
    return fallback(np.asarray(x, dtype=np.float64))


def exp(x):
    return _unary(x, "_exp", np.exp)


def log(x):
    return _unary(x, "_log", np.log)


def sqrt(x):
    return _unary(x, "_sqrt", np.sqrt)


def erf(x):
    return _unary(x, "_erf", special.erf)


def tanh(x):
    return _unary(x, "_tanh", np.tanh)


def concatenate(xs, axis=0):
    if any(isinstance(x, Var) for x in xs):
        return tape.concatenate(xs, axis)
    if any(isinstance(x, Dual) for x in xs):
        return dual.concatenate(xs, axis)
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)


def softmax(x, axis=-1):
    # the shift is a constant: softmax is invariant to it, so no derivative flows
    shift = np.max(value(x), axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    shift = np.max(value(x), axis=axis, keepdims=True)
    z = x - shift
    return z - log(exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x, weight, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * weight + bias


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
