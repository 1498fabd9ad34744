"""Faithfulness of relational operators, layer sweeps and token diagnostics."""
from __future__ import annotations

import enum
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from lrelab import model as M
from lrelab.diff import JacobianMethod
from lrelab.exceptions import EvaluationError, ProtocolError
from lrelab.lre import (
    DEFAULT_BETA,
    OperatorKind,
    RelationalOperator,
    apply,
    collect_samples,
    operator_from_samples,
)
from lrelab.relations import (
    N_ICL,
    RelationCategory,
    RelationPair,
    Vocab,
    build_prompt,
    filter_known,
    icl_for,
    object_token_ids,
    split_pairs,
)

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("relation_id", "group", "kind", "layer", "run_seed", "faithfulness",
                  "gold_accuracy", "n_test")


class SuffixClass(str, enum.Enum):
    CORRECT = "correct"
    STEMMED = "stemmed"
    INCORRECT = "incorrect"


@dataclass(frozen=True)
class LayerResult:
    layer: int
    run_seed: int
    matched: int
    gold_matched: int
    n_test: int

    @property
    def faithfulness(self):
        return self.matched / self.n_test

    @property
    def gold_accuracy(self):
        return self.gold_matched / self.n_test


@dataclass
class EvalReport:
    relation_id: str
    group: str
    kind: OperatorKind
    source_layer: object            # an int, or "best" for sweep summaries
    faithfulness: float
    n_test: int
    run_seeds: list
    per_layer: dict = field(default_factory=dict)   # layer -> mean faithfulness over runs
    rows: list = field(default_factory=list)        # LayerResult per (layer, run)
    best_layers: list = field(default_factory=list)
    unique_start_token_count: int | None = None
    suffix_classification_counts: dict | None = None

    def to_dict(self):
        return {
            "relation_id": self.relation_id, "group": self.group, "kind": self.kind.value,
            "source_layer": self.source_layer, "faithfulness": self.faithfulness,
            "n_test": self.n_test, "run_seeds": list(self.run_seeds),
            "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())},
            "best_layers": list(self.best_layers),
            "unique_start_token_count": self.unique_start_token_count,
            "suffix_classification_counts": self.suffix_classification_counts,
        }


# ---------------------------------------------------------------------------
# states and scoring


def prompt_states(params, vocab, category, pairs, icl_pairs, source_layer=None):
    """Per pair: ``(s, o)`` or, with ``source_layer=None``, the full trace."""
    out = []
    for p in pairs:
        tokens, pos = build_prompt(category, p.subject, icl_for(p, icl_pairs)[:N_ICL], vocab)
        tr = M.forward_trace(params, tokens)
        if source_layer is None:
            out.append((tr, pos))
        else:
            out.append((tr.x[source_layer][pos], tr.x[-1][-1]))
    return out


def _check_protocol(op: RelationalOperator, test_pairs):
    if not test_pairs:
        raise EvaluationError("faithfulness needs at least one test pair")
    overlap = set(op.sample_ids) & {p.subject for p in test_pairs}
    if overlap:
        raise ProtocolError(f"test pairs overlap estimation samples: {sorted(overlap)[:5]}")


def score_states(params, op, S, O, gold=None):
    """Matches of decoded ``apply(op, S)`` against decoded ``O`` (and optional gold ids)."""
    approx = M.decode_argmax(params, apply(op, S))
    lm = M.decode_argmax(params, O)
    matched = int(np.sum(np.atleast_1d(approx) == np.atleast_1d(lm)))
    gold_matched = 0
    if gold is not None:
        gold_matched = sum(int(a) in g for a, g in zip(np.atleast_1d(approx), gold))
    return matched, gold_matched, np.atleast_1d(approx)


def faithfulness(params: M.Parameters, vocab: Vocab, category: RelationCategory,
                 operator: RelationalOperator, test_pairs: Sequence[RelationPair],
                 icl_pairs: Sequence[RelationPair] | None = None) -> float:
    """Top-1 agreement between the decoded approximation and the model's own prediction.

    Test prompts use ``icl_pairs`` as demonstrations, by default the pairs the
    operator was estimated from.
    """
    _check_protocol(operator, test_pairs)
    if icl_pairs is None:
        icl_pairs = [category.pair(s) for s in operator.sample_ids]
    states = prompt_states(params, vocab, category, test_pairs, icl_pairs, operator.source_layer)
    S = np.array([s for s, _ in states])
    O = np.array([o for _, o in states])
    matched, _, _ = score_states(params, operator, S, O)
    return matched / len(test_pairs)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class RunData:
    """Everything one sweep run needs: its split and the test-prompt traces."""

    seed: int
    train: tuple
    test: tuple
    traces: list


def prepare_run(params, vocab, category, seed, n_train=N_ICL) -> RunData:
    train, test = split_pairs(category, n_train, seed)
    train_known = filter_known(params, vocab, category, train, train)
    if len(train_known) < len(train):
        log.warning("%s seed %d: %d of %d training pairs not completed by the model",
                    category.id, seed, len(train) - len(train_known), len(train))
    if not train_known:
        raise EvaluationError(f"{category.id} seed {seed}: no training pair is known to the model")
    test_known = filter_known(params, vocab, category, test, train)
    if not test_known:
        raise EvaluationError(f"{category.id} seed {seed}: no test pair is known to the model")
    traces = prompt_states(params, vocab, category, test_known, train)
    return RunData(seed, tuple(train_known), tuple(test_known), traces)


def sweep(params: M.Parameters, vocab: Vocab, category: RelationCategory,
          operator_kinds: Iterable = tuple(OperatorKind), layer_range: Iterable[int] = (1, 2),
          n_runs: int = 4, beta: float = DEFAULT_BETA, seed: int = 0, n_train: int = N_ICL,
          method=JacobianMethod.FORWARD_MODE, tokenizer=None) -> dict:
    """Best-layer faithfulness per operator kind, averaged over ``n_runs`` resampled splits.

    Run ``r`` uses split seed ``seed + r``.  For every run and layer the
    operators are estimated and scored; each run contributes its maximum over
    layers and the report holds the mean of those maxima.
    """
    kinds = [OperatorKind(k) for k in operator_kinds]
    layers = sorted(set(int(l) for l in layer_range))
    L = params.config.n_layers
    if not layers or layers[0] < 0 or layers[-1] > L:
        raise EvaluationError(f"layer_range {layers} outside 0..{L}")
    if n_runs < 1:
        raise EvaluationError("n_runs must be at least 1")
    rows = {k: [] for k in kinds}
    predictions = {}
    seeds = [seed + r for r in range(n_runs)]
    for run_seed in seeds:
        run = prepare_run(params, vocab, category, run_seed, n_train)
        gold = [object_token_ids(p, vocab) for p in run.test]
        for layer in layers:
            S = np.array([tr.x[layer][pos] for tr, pos in run.traces])
            O = np.array([tr.x[-1][-1] for tr, _ in run.traces])
            need_jac = any(k is not OperatorKind.TRANSLATION for k in kinds)
            samples = collect_samples(params, vocab, category, run.train, layer, method,
                                      with_jacobian=need_jac)
            for k in kinds:
                op = operator_from_samples(samples, k, beta, layer, category.id)
                matched, gold_matched, approx = score_states(params, op, S, O, gold)
                rows[k].append(LayerResult(layer, run_seed, matched, gold_matched, len(run.test)))
                predictions[(k, run_seed, layer)] = (run.test, approx)
    reports = {}
    for k in kinds:
        per_run_best, best_layers = [], []
        for run_seed in seeds:
            mine = [r for r in rows[k] if r.run_seed == run_seed]
            best = max(mine, key=lambda r: (r.faithfulness, -r.layer))
            per_run_best.append(best.faithfulness)
            best_layers.append(best.layer)
        per_layer = {l: float(np.mean([r.faithfulness for r in rows[k] if r.layer == l])) for l in layers}
        report = EvalReport(
            relation_id=category.id, group=category.group.value, kind=k, source_layer="best",
            faithfulness=float(np.mean(per_run_best)),
            n_test=sum(r.n_test for r in rows[k] if r.layer == layers[0]),
            run_seeds=seeds, per_layer=per_layer, rows=rows[k], best_layers=best_layers,
            unique_start_token_count=unique_start_tokens(category, tokenizer or vocab),
        )
        test, approx = predictions[(k, seeds[0], best_layers[0])]
        counts = {c.value: 0 for c in SuffixClass}
        for p, a in zip(test, approx):
            counts[classify_suffix(vocab.words[int(a)], p.subject, p.object, tokenizer or vocab).value] += 1
        report.suffix_classification_counts = counts
        reports[k] = report
    return reports


# ---------------------------------------------------------------------------
# token diagnostics


def unique_start_tokens(category: RelationCategory, tokenizer) -> int:
    """Number of distinct first tokens among the pairs' first acceptable objects."""
    return len({tokenizer.tokenize(p.object)[0] for p in category.pairs})


def classify_suffix(prediction: str, subject: str, obj: str, tokenizer=None,
                    min_stem: int = 3) -> SuffixClass:
    """Correct if ``prediction`` is the object's first token; Stemmed if it is a shared
    subject/object prefix of at least ``min_stem`` characters; otherwise Incorrect."""
    first = tokenizer.tokenize(obj)[0] if tokenizer is not None else obj.split()[0]
    if prediction == first:
        return SuffixClass.CORRECT
    if len(prediction) >= min_stem and obj.startswith(prediction) and subject.startswith(prediction):
        return SuffixClass.STEMMED
    return SuffixClass.INCORRECT


# ---------------------------------------------------------------------------
# result files


def results_rows(reports: dict) -> list:
    out = []
    for k, rep in reports.items():
        for r in rep.rows:
            out.append((rep.relation_id, rep.group, k.value, r.layer, r.run_seed,
                        r.faithfulness, r.gold_accuracy, r.n_test))
    return out


def format_results_csv(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    buf.write(",".join(RESULT_COLUMNS) + "\n")
    for row in rows:
        cells = [repr(float(c)) if isinstance(c, float) else str(c) for c in row]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def format_summary_json(reports: Iterable[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
