"""Relational operators estimated from mean subject-to-object Jacobians.

Four approximators of the object state ``o`` from a subject state ``s``:

=============  =====================
``affine``     ``beta * W @ s + b``
``linear``     ``W @ s``
``bias``       ``s + b``
``translation`` ``s + mean(o - s)``
=============  =====================

``W`` is the mean over training samples of the Jacobian ``dF/ds`` and ``b``
the mean of ``F(s_i) - J_i @ s_i``, each sample using its own Jacobian.
"""
from __future__ import annotations

import enum
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from lrelab import model as M
from lrelab.checkpoint import atomic_write_bytes, decode_container, encode_container
from lrelab.diff import JacobianMethod, jacobian, make_map
from lrelab.exceptions import EstimationError, FormatError, NumericError, OperatorError
from lrelab.relations import RelationCategory, RelationPair, Vocab, build_prompt, icl_for

DEFAULT_BETA = 7.0
N_SAMPLES = 8


class OperatorKind(str, enum.Enum):
    AFFINE = "affine"
    LINEAR = "linear"
    BIAS = "bias"
    TRANSLATION = "translation"


_HAS_W = {OperatorKind.AFFINE, OperatorKind.LINEAR}
_HAS_B = {OperatorKind.AFFINE, OperatorKind.BIAS, OperatorKind.TRANSLATION}


@dataclass(frozen=True, eq=False)
class RelationalOperator:
    kind: OperatorKind
    W: np.ndarray | None
    b: np.ndarray | None
    beta: float
    source_layer: int
    relation_id: str
    sample_ids: tuple
    n_samples: int = field(default=None)

    def __post_init__(self):
        kind = OperatorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if self.n_samples is None:
            object.__setattr__(self, "n_samples", len(self.sample_ids))
        if self.n_samples != len(self.sample_ids) or self.n_samples < 1:
            raise OperatorError(f"n_samples={self.n_samples} but {len(self.sample_ids)} sample ids")
        if (self.W is not None) != (kind in _HAS_W):
            raise OperatorError(f"{kind.value} operator {'needs' if kind in _HAS_W else 'takes no'} W")
        if (self.b is not None) != (kind in _HAS_B):
            raise OperatorError(f"{kind.value} operator {'needs' if kind in _HAS_B else 'takes no'} b")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise OperatorError(f"beta must be positive and finite, got {self.beta}")
        for name in ("W", "b"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                if not np.all(np.isfinite(arr)):
                    raise OperatorError(f"{name} has non-finite entries")
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)
        if self.W is not None and (self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]):
            raise OperatorError(f"W must be square, got {self.W.shape}")
        if self.W is not None and self.b is not None and self.b.shape != (self.W.shape[0],):
            raise OperatorError("W and b dimensions disagree")

    @property
    def dim(self):
        return (self.W if self.W is not None else self.b).shape[0]

    def __eq__(self, other):
        if not isinstance(other, RelationalOperator):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (
            a is not None and b is not None and np.array_equal(a, b))
        return (self.kind == other.kind and same(self.W, other.W) and same(self.b, other.b)
                and self.beta == other.beta and self.source_layer == other.source_layer
                and self.relation_id == other.relation_id and self.sample_ids == other.sample_ids)

    __hash__ = None


def apply(op: RelationalOperator, s) -> np.ndarray:
    """Approximate object state(s) for subject state(s) of shape (..., d)."""
    if not isinstance(op, RelationalOperator):
        raise OperatorError(f"expected a RelationalOperator, got {type(op).__name__}")
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1:] != (op.dim,):
        raise OperatorError(f"state dimension {s.shape[-1:]} != operator dimension {op.dim}")
    if op.kind is OperatorKind.LINEAR:
        return s @ op.W.T
    if op.kind is OperatorKind.AFFINE:
        return op.beta * (s @ op.W.T) + op.b
    return s + op.b


# ---------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class JacobianSample:
    """One estimation sample: subject state, its Jacobian and the map value there."""

    subject: str
    s: np.ndarray
    W: np.ndarray
    o: np.ndarray


def sample_prompt(vocab, category, pair, train_pairs):
    """Prompt for an estimation sample: the other training pairs serve as ICL examples."""
    return build_prompt(category, pair.subject, icl_for(pair, train_pairs), vocab)


def collect_samples(params: M.Parameters, vocab: Vocab, category: RelationCategory,
                    train_pairs: Sequence[RelationPair], source_layer: int,
                    method=JacobianMethod.FORWARD_MODE, with_jacobian=True) -> list:
    if not train_pairs:
        raise EstimationError(f"{category.id}: no training pairs")
    out = []
    for pair in train_pairs:
        tokens, pos = sample_prompt(vocab, category, pair, train_pairs)
        fmap = make_map(params, tokens, pos, source_layer)
        if with_jacobian:
            try:
                res = jacobian(fmap, fmap.base_state, method)
            except NumericError as exc:
                raise NumericError(f"sample {pair.subject!r}: {exc}") from None
            W, o = res.W, fmap.clean_output
        else:
            W, o = None, fmap.clean_output
        out.append(JacobianSample(pair.subject, fmap.base_state, W, o))
    return out


def _mean(terms):
    """Mean taken as offsets from the first term, so identical terms average to themselves exactly."""
    first = terms[0]
    return first + np.mean([t - first for t in terms], axis=0)


def operator_from_samples(samples: Sequence[JacobianSample], kind, beta=DEFAULT_BETA,
                          source_layer=0, relation_id="") -> RelationalOperator:
    """Aggregate per-sample terms into an operator of the requested kind."""
    kind = OperatorKind(kind)
    if not samples:
        raise EstimationError(f"{relation_id}: no samples")
    ids = tuple(x.subject for x in samples)
    # a fixed order makes the mean independent of how the samples were listed
    ordered = sorted(samples, key=lambda x: x.subject)
    if kind is OperatorKind.TRANSLATION:
        b = _mean([x.o - x.s for x in ordered])
        return RelationalOperator(kind, None, b, beta, source_layer, relation_id, ids)
    if any(x.W is None for x in samples):
        raise EstimationError(f"{kind.value} needs Jacobians for every sample")
    for x in samples:
        if not np.all(np.isfinite(x.W)):
            raise NumericError(f"non-finite Jacobian for sample {x.subject!r}")
    W = _mean([x.W for x in ordered])
    b = _mean([x.o - x.W @ x.s for x in ordered])
    return RelationalOperator(
        kind,
        W if kind in _HAS_W else None,
        b if kind in _HAS_B else None,
        beta, source_layer, relation_id, ids)


def estimate(params: M.Parameters, vocab: Vocab, category: RelationCategory,
             train_pairs: Sequence[RelationPair], source_layer: int, kind="affine",
             beta=DEFAULT_BETA, method=JacobianMethod.FORWARD_MODE) -> RelationalOperator:
    kind = OperatorKind(kind)
    if not train_pairs:
        raise EstimationError(f"{category.id}: empty train_pairs")
    samples = collect_samples(params, vocab, category, train_pairs, source_layer, method,
                              with_jacobian=kind is not OperatorKind.TRANSLATION)
    return operator_from_samples(samples, kind, beta, source_layer, category.id)


# ---------------------------------------------------------------------------
# files


def save_operator(path, op: RelationalOperator) -> None:
    header = {"kind": "operator", "operator_kind": op.kind.value, "relation_id": op.relation_id,
              "source_layer": op.source_layer, "beta": op.beta, "sample_ids": list(op.sample_ids),
              "d": op.dim}
    tensors = OrderedDict()
    if op.W is not None:
        tensors["W"] = op.W
    if op.b is not None:
        tensors["b"] = op.b
    atomic_write_bytes(path, encode_container(header, tensors))


def load_operator(path, expected_dim: int | None = None) -> RelationalOperator:
    path = Path(path)
    header, tensors = decode_container(path.read_bytes(), source=path)
    if header.get("kind") != "operator":
        raise FormatError(f"{path}: not an operator file (kind={header.get('kind')!r})")
    d = int(header["d"])
    if expected_dim is not None and d != expected_dim:
        raise FormatError(f"{path}: operator dimension d={d} does not match model d_model={expected_dim}")
    for name, t in tensors.items():
        want = (d, d) if name == "W" else (d,)
        if t.shape != want:
            raise FormatError(f"{path}: tensor {name} has shape {t.shape}, expected {want}")
    try:
        return RelationalOperator(
            kind=header["operator_kind"], W=tensors.get("W"), b=tensors.get("b"),
            beta=float(header["beta"]), source_layer=int(header["source_layer"]),
            relation_id=header["relation_id"], sample_ids=tuple(header["sample_ids"]))
    except (KeyError, ValueError, OperatorError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# estimator interface


class LinearRelationalEmbedding(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`estimate`.

    ``fit`` takes the training pairs; ``transform`` and ``predict`` take
    pairs whose prompts (with the training pairs as demonstrations) supply the
    subject states; ``transform_states`` works on raw states.
    """

    def __init__(self, params=None, vocab=None, category=None, source_layer=1, kind="affine",
                 beta=DEFAULT_BETA, method="forward"):
        self.params = params
        self.vocab = vocab
        self.category = category
        self.source_layer = source_layer
        self.kind = kind
        self.beta = beta
        self.method = method

    def fit(self, X, y=None):
        pairs = list(X)
        self.operator_ = estimate(self.params, self.vocab, self.category, pairs, self.source_layer,
                                  self.kind, self.beta, self.method)
        self.train_pairs_ = tuple(pairs)
        self.W_ = self.operator_.W
        self.b_ = self.operator_.b
        return self

    def subject_states(self, X):
        check_is_fitted(self, "operator_")
        from lrelab.evaluation import prompt_states

        states = prompt_states(self.params, self.vocab, self.category, list(X), self.train_pairs_,
                               self.source_layer)
        return np.array([s for s, _ in states])

    def transform_states(self, S):
        check_is_fitted(self, "operator_")
        S = check_array(S, dtype=np.float64)
        return apply(self.operator_, S)

    def transform(self, X):
        return apply(self.operator_, self.subject_states(X))

    def predict(self, X):
        return M.decode_argmax(self.params, self.transform(X))

    def score(self, X, y=None):
        from lrelab.evaluation import faithfulness

        return faithfulness(self.params, self.vocab, self.category, self.operator_, list(X))
