"""Subject-to-object maps and their derivatives.

A :class:`SubjectObjectMap` fixes a prompt, a subject position ``p`` and a
source layer ``j``.  Evaluating it at a vector ``s`` replaces the residual
state ``x[j][p]`` with ``s``, reruns layers ``j+1..L`` for positions ``>= p``
(earlier positions cannot see ``p`` under the causal mask, so their keys and
values are reused from the clean run) and returns ``x[L]`` at the last
position.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lrelab import model as M
from lrelab.diff import functional as F
from lrelab.diff.dual import Dual
from lrelab.exceptions import InputError, NumericError

FD_STEP = 1e-5


class JacobianMethod(str, enum.Enum):
    FORWARD_MODE = "forward"
    FINITE_DIFFERENCE = "fd"


@dataclass(frozen=True)
class JacobianResult:
    W: np.ndarray
    value: np.ndarray
    method: JacobianMethod
    s0: np.ndarray


@dataclass(frozen=True, eq=False)
class SubjectObjectMap:
    params: M.Parameters
    prompt_tokens: tuple
    subject_position: int
    source_layer: int
    base_state: np.ndarray
    clean_output: np.ndarray
    _suffix: np.ndarray = field(repr=False)
    _past: tuple = field(repr=False)

    @property
    def dim(self):
        return self.base_state.shape[-1]

    def __call__(self, s):
        s = _check_vector(s, self.dim, "s", batch=True)
        out = np.array(self.evaluate(s))
        # identity patch: rows equal to the clean state return the clean output bit for bit
        same = np.all(s == self.base_state, axis=-1)
        out[same] = self.clean_output
        return out

    def evaluate(self, s):
        """Map ``s`` (array or Dual, shape (..., d)) to the final-layer last-position state."""
        p, j = self.subject_position, self.source_layer
        L = self.params.config.n_layers
        if j == L:
            # nothing left to compute; the subject must be the last position here
            return s
        batch = s.shape[:-1]
        parts = [s.reshape(batch + (1, self.dim))]
        if len(self._suffix):
            parts.append(np.broadcast_to(self._suffix, batch + self._suffix.shape))
        x = F.concatenate(parts, axis=-2) if len(parts) > 1 else parts[0]
        for l in range(j, L):
            x, _, _ = M.block(self.params, l, x, past=self._past[l - j])
        return x[..., -1, :]


@dataclass(frozen=True, eq=False)
class FunctionMap:
    """Wraps a function written with :mod:`lrelab.diff.functional` ops.

    Used for analytic test hooks where the map has a closed form.
    """

    fn: Callable
    base_state: np.ndarray

    @property
    def dim(self):
        return np.shape(self.base_state)[-1]

    @property
    def clean_output(self):
        return np.asarray(self.fn(np.asarray(self.base_state, dtype=np.float64)))

    def __call__(self, s):
        s = _check_vector(s, self.dim, "s", batch=True)
        return np.asarray(self.fn(s))

    def evaluate(self, s):
        return self.fn(s)


def _check_vector(v, d, name, batch=False):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (d,) or (not batch and v.ndim != 1):
        raise InputError(f"{name} must have trailing dimension {d}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite values")
    return v


def make_map(params: M.Parameters, prompt_tokens, subject_position: int,
             source_layer: int) -> SubjectObjectMap:
    tokens = M.check_tokens(params, prompt_tokens)
    n = tokens.size
    L = params.config.n_layers
    p, j = int(subject_position), int(source_layer)
    if not 0 <= p < n:
        raise InputError(f"subject_position {p} out of range for prompt of length {n}")
    if not 0 <= j <= L:
        raise InputError(f"source_layer {j} out of range 0..{L}")
    if j == L and p != n - 1:
        raise InputError("at source_layer == n_layers the subject must be the last position")
    trace = M.forward_trace(params, tokens)
    past = tuple(
        tuple(np.ascontiguousarray(t) for t in M.attention_kv(params, l, trace.x[l][:p]))
        for l in range(j, L)
    )
    return SubjectObjectMap(
        params=params,
        prompt_tokens=tuple(int(t) for t in tokens),
        subject_position=p,
        source_layer=j,
        base_state=trace.x[j][p].copy(),
        clean_output=trace.x[L][-1].copy(),
        _suffix=trace.x[j][p + 1:].copy(),
        _past=past,
    )


def jvp_batch(fmap, s, V):
    """Primal value and Jacobian-vector products for every row of ``V``."""
    out = fmap.evaluate(Dual(s, V))
    if not isinstance(out, Dual):  # map does not depend on s
        out = Dual(out, np.zeros((len(V),) + np.shape(out)))
    return out.primal, out.tangent


def jvp(fmap, s, v) -> np.ndarray:
    """``(dF/ds at s) @ v`` by forward tangent propagation."""
    s = _check_vector(s, fmap.dim, "s")
    v = _check_vector(v, fmap.dim, "v")
    _, t = jvp_batch(fmap, s, v[None])
    return np.asarray(t[0])


def jacobian(fmap, s, method=JacobianMethod.FORWARD_MODE) -> JacobianResult:
    method = JacobianMethod(method)
    s = _check_vector(s, fmap.dim, "s")
    d = s.size
    if method is JacobianMethod.FORWARD_MODE:
        value, tangents = jvp_batch(fmap, s, np.eye(d))
        W = np.array(tangents).T  # row i of tangents is column i of W
    else:
        steps = FD_STEP * np.eye(d)
        out = np.asarray(fmap(np.concatenate([s + steps, s - steps])))
        W = ((out[:d] - out[d:]) / (2.0 * FD_STEP)).T
        value = np.asarray(fmap(s))
    value = np.array(value)
    bad = ~np.isfinite(W)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NumericError(f"non-finite Jacobian entry at output {row}, input coordinate {col}")
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite map value")
    return JacobianResult(W=W, value=value, method=method, s0=s.copy())


def taylor_remainder(fmap, s0, v, epsilons):
    """``|F(s0 + e v) - F(s0) - e W v|`` for each step size ``e``."""
    s0 = _check_vector(s0, fmap.dim, "s0")
    v = _check_vector(v, fmap.dim, "v")
    eps = np.asarray(list(epsilons), dtype=np.float64)
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise InputError("epsilons must be finite and non-negative")
    f0, t = jvp_batch(fmap, s0, v[None])
    Wv = t[0]
    out = []
    for e in eps:
        if e == 0.0:
            out.append(0.0)
            continue
        r = np.asarray(fmap(s0 + e * v)) - f0 - e * Wv
        out.append(float(np.linalg.norm(r)))
    return out
