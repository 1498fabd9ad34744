"""Two-dimensional views of subject, transformed and object states.

The plane is spanned by the normalised bias vector and a seeded random
direction made orthogonal to it.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from lrelab import model as M
from lrelab.exceptions import InputError, OperatorError
from lrelab.lre import OperatorKind, RelationalOperator, apply
from lrelab.relations import RelationCategory, RelationPair, Vocab

DEFAULT_BETAS = (1.0, 3.0, 5.0, 7.0)
_DEGENERATE = 1e-8


@dataclass(frozen=True)
class ProjectionBasis:
    u1: np.ndarray
    u2: np.ndarray
    seed: int

    @property
    def matrix(self):
        return np.stack([self.u1, self.u2])


def gs_basis(b, seed: int = 0, r=None) -> ProjectionBasis:
    """Orthonormal pair ``(b/|b|, r')`` with ``r'`` a seeded random direction.

    ``r`` overrides the first random draw; a draw (nearly) parallel to ``b`` is
    replaced by a fresh one from the seeded stream.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise InputError(f"b must be a vector, got shape {b.shape}")
    nb = np.linalg.norm(b)
    if not np.isfinite(nb) or nb == 0.0:
        raise InputError("cannot build a projection basis from a zero bias vector")
    u1 = b / nb
    rng = np.random.default_rng(seed)
    cand = None if r is None else np.asarray(r, dtype=np.float64)
    for _ in range(100):
        if cand is None:
            cand = rng.standard_normal(b.shape[0])
        cand = cand / np.linalg.norm(cand)
        resid = cand - (cand @ u1) * u1
        n = np.linalg.norm(resid)
        if n >= _DEGENERATE:
            u2 = resid / n
            # a second pass removes the rounding left by the first
            u2 = u2 - (u2 @ u1) * u1
            return ProjectionBasis(u1, u2 / np.linalg.norm(u2), int(seed))
        cand = None
    raise InputError("could not draw a direction independent of b")  # pragma: no cover


def project_states(basis: ProjectionBasis, states: Sequence[tuple]) -> list:
    """``[(label, (v.u1, v.u2)), ...]`` for ``[(label, v), ...]``."""
    d = basis.u1.shape[0]
    out = []
    for label, v in states:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (d,):
            raise InputError(f"state {label!r} has shape {v.shape}, expected ({d},)")
        out.append((label, basis.matrix @ v))
    return out


class GramSchmidtProjector(TransformerMixin, BaseEstimator):
    """Project d-dimensional states onto the plane of ``b`` and a random direction."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X, y=None):
        b = np.asarray(X, dtype=np.float64)
        if b.ndim == 2:
            b = b.mean(axis=0)
        self.basis_ = gs_basis(b, self.seed)
        self.components_ = self.basis_.matrix
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = check_array(X, dtype=np.float64)
        return X @ self.components_.T


# ---------------------------------------------------------------------------
# beta sweep


@dataclass(frozen=True)
class BetaRow:
    beta: float
    projected_distance: float     # mean over pairs of |P(beta W s + b) - P(o)|
    centroid_distance: float      # |mean P(beta W s + b) - mean P(o)|
    full_distance: float          # mean over pairs of |beta W s + b - o|
    faithfulness: float


def _with_beta(op: RelationalOperator, beta: float) -> RelationalOperator:
    return RelationalOperator(op.kind, op.W, op.b, float(beta), op.source_layer, op.relation_id,
                              op.sample_ids)


def _check_sweep(op, betas):
    if op.kind is not OperatorKind.AFFINE:
        raise OperatorError(f"beta_sweep needs an affine operator, got {op.kind.value}")
    if any(not (b > 0 and np.isfinite(b)) for b in betas):
        raise InputError(f"betas must be positive, got {list(betas)}")


def beta_rows(params, op, S, O, basis, betas=DEFAULT_BETAS) -> list:
    """Sweep rows for subject states ``S`` and object states ``O`` (both (n, d))."""
    _check_sweep(op, betas)
    lm = M.decode_argmax(params, O) if params is not None else None
    PO = O @ basis.matrix.T
    rows = []
    for beta in betas:
        A = apply(_with_beta(op, beta), S)
        PA = A @ basis.matrix.T
        faith = float(np.mean(M.decode_argmax(params, A) == lm)) if params is not None else float("nan")
        rows.append(BetaRow(
            beta=float(beta),
            projected_distance=float(np.linalg.norm(PA - PO, axis=1).mean()),
            centroid_distance=float(np.linalg.norm(PA.mean(axis=0) - PO.mean(axis=0))),
            full_distance=float(np.linalg.norm(A - O, axis=1).mean()),
            faithfulness=faith,
        ))
    return rows


def beta_sweep(params: M.Parameters, vocab: Vocab, category: RelationCategory,
               operator: RelationalOperator, test_pairs: Sequence[RelationPair],
               betas=DEFAULT_BETAS, seed: int = 0) -> list:
    """Projected and full-space distance between ``beta W s + b`` and ``o`` for each beta."""
    from lrelab.evaluation import _check_protocol, prompt_states

    _check_sweep(operator, betas)
    _check_protocol(operator, test_pairs)
    icl = [category.pair(s) for s in operator.sample_ids]
    states = prompt_states(params, vocab, category, test_pairs, icl, operator.source_layer)
    S = np.array([s for s, _ in states])
    O = np.array([o for _, o in states])
    return beta_rows(params, operator, S, O, gs_basis(operator.b, seed), betas)


def argmin_beta(rows, column="projected_distance") -> float:
    return min(rows, key=lambda r: (getattr(r, column), r.beta)).beta


def bias_concept_cosine(operator: RelationalOperator, translation_operator: RelationalOperator) -> float:
    """Cosine between the Jacobian-based bias and the mean object-minus-subject offset."""
    a = operator.b if isinstance(operator, RelationalOperator) else np.asarray(operator, dtype=np.float64)
    t = (translation_operator.b if isinstance(translation_operator, RelationalOperator)
         else np.asarray(translation_operator, dtype=np.float64))
    if a is None or t is None:
        raise InputError("both operators need a bias vector")
    na, nt = np.linalg.norm(a), np.linalg.norm(t)
    if na == 0.0 or nt == 0.0:
        raise InputError("cosine of a zero vector is undefined")
    return float(np.clip(a @ t / (na * nt), -1.0, 1.0))


def random_cosine_quantile(v, q=0.99, n=2000, seed=0) -> float:
    """``q``-quantile of |cos(v, r)| over Gaussian random vectors ``r``."""
    v = np.asarray(v, dtype=np.float64)
    R = np.random.default_rng(seed).standard_normal((n, v.shape[0]))
    cos = np.abs(R @ v) / (np.linalg.norm(R, axis=1) * np.linalg.norm(v))
    return float(np.quantile(cos, q))


# ---------------------------------------------------------------------------
# output files

SVG_COLORS = {"s": "#808080", "beta_Ws": "#d020d0", "beta_Ws_b": "#e02020", "o": "#2040e0"}


def projection_points(op: RelationalOperator, S, O, basis, beta=None) -> list:
    """Labelled 2-D points for s, beta*W s, beta*W s + b and o per pair."""
    beta = op.beta if beta is None else beta
    BWs = beta * (S @ op.W.T)
    groups = (("s", S), ("beta_Ws", BWs), ("beta_Ws_b", BWs + op.b), ("o", O))
    out = []
    for label, X in groups:
        P = X @ basis.matrix.T
        out += [(label, i, float(x), float(y)) for i, (x, y) in enumerate(P)]
    return out


def coordinates_csv(points, subjects=None) -> str:
    buf = io.StringIO()
    buf.write("label,index,subject,x,y\n")
    for label, i, x, y in points:
        subj = subjects[i] if subjects is not None else ""
        buf.write(f"{label},{i},{subj},{x!r},{y!r}\n")
    return buf.getvalue()


def scatter_svg(points, title="", size=480, margin=40) -> str:
    """A self-contained SVG scatter of ``(label, index, x, y)`` points."""
    xs = np.array([p[2] for p in points]) if points else np.zeros(1)
    ys = np.array([p[3] for p in points]) if points else np.zeros(1)
    lo_x, hi_x, lo_y, hi_y = xs.min(), xs.max(), ys.min(), ys.max()
    span = max(hi_x - lo_x, hi_y - lo_y, 1e-12)
    scale = (size - 2 * margin) / span
    px = lambda x: margin + (x - lo_x) * scale
    py = lambda y: size - margin - (y - lo_y) * scale
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="{margin}" y="{margin / 2:.1f}" font-size="14" '
                     f'font-family="sans-serif">{_escape(title)}</text>')
    for label, _, x, y in points:
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                     f'fill="{SVG_COLORS.get(label, "black")}" fill-opacity="0.7"/>')
    for k, (label, color) in enumerate(SVG_COLORS.items()):
        y = size - margin / 2 - 14 * (len(SVG_COLORS) - 1 - k)
        parts.append(f'<circle cx="{size - 110}" cy="{y - 4}" r="4" fill="{color}"/>')
        parts.append(f'<text x="{size - 100}" y="{y}" font-size="11" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
