"""Differentiation: forward-mode tangents, reverse-mode tape, finite differences."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from lrelab.diff.dual import Dual
from lrelab.diff.maps import (
    FD_STEP,
    FunctionMap,
    JacobianMethod,
    JacobianResult,
    SubjectObjectMap,
    jacobian,
    jvp,
    make_map,
    taylor_remainder,
)
from lrelab.diff.tape import Var
from lrelab.exceptions import NumericError

__all__ = [
    "Dual", "Var", "FD_STEP", "FunctionMap", "JacobianMethod", "JacobianResult",
    "SubjectObjectMap", "jacobian", "jvp", "make_map", "taylor_remainder", "grad",
    "value_and_grad", "fd_grad_entry",
]


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn(params)`` and reverse-mode gradients for every tensor.

    ``loss_fn`` receives a :class:`~lrelab.model.Parameters` whose tensors are
    taped :class:`Var` leaves and must return a scalar.  Gradients come back
    as an ordered ``{name: array}`` with the parameter shapes.
    """
    leaves = OrderedDict((k, Var(np.array(v))) for k, v in params.tensors.items())
    loss = loss_fn(params.with_tensors(leaves))
    value = float(loss.value if isinstance(loss, Var) else loss)
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite ({value})")
    if isinstance(loss, Var):
        loss.backward()
    grads = OrderedDict()
    for k, leaf in leaves.items():
        g = leaf.grad
        grads[k] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64)
    return value, grads


def grad(loss_fn, params):
    return value_and_grad(loss_fn, params)[1]


def fd_grad_entry(loss_fn, params, name, index, h=1e-5):
    """Central finite difference of ``loss_fn`` w.r.t. one parameter entry."""
    base = np.array(params[name])
    plus, minus = base.copy(), base.copy()
    plus[index] += h
    minus[index] -= h
    key = name.replace(".", "__")
    lp = float(loss_fn(params.replace(**{key: plus})))
    lm = float(loss_fn(params.replace(**{key: minus})))
    return (lp - lm) / (2.0 * h)
