"""Next-token training of the toy transformer with Adam."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from lrelab import model as M
from lrelab.diff import functional as F
from lrelab.diff import value_and_grad
from lrelab.exceptions import ConfigError, InputError, NumericError, TrainingError
from lrelab.relations import BOS, PAD, RelationCategory, RelationPair, Vocab, build_prompt, \
    icl_for, object_token_ids

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    steps: int = 3000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        for f in ("learning_rate", "batch_size", "epsilon", "grad_clip", "eval_every"):
            if not getattr(self, f) > 0:
                raise ConfigError(f, "must be positive")
        if self.steps < 0:
            raise ConfigError("steps", "must be non-negative")
        for f in ("beta1", "beta2"):
            if not 0.0 < getattr(self, f) < 1.0:
                raise ConfigError(f, "must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed", "must be an unsigned integer")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(sorted(bad)[0], "unknown train config field")
        return cls(**d)

    to_dict = asdict


def encode_corpus(corpus: Sequence[str], vocab: Vocab, max_seq_len: int) -> list:
    """Token arrays ``[<bos>, ...]`` per sentence, cut to ``max_seq_len``."""
    bos = vocab.id(BOS)
    out = []
    for line in corpus:
        ids = [bos] + vocab.encode(vocab.tokenize(line))
        out.append(np.asarray(ids[:max_seq_len], dtype=np.int64))
    return out


def _pad_batch(seqs, pad_id):
    n = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), n), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return tokens


def lm_loss(params, tokens, pad_id):
    """Mean next-token cross-entropy over non-pad targets of a padded batch."""
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = (targets != pad_id).astype(np.float64)
    logp = F.log_softmax(M.lm_logits(params, inputs), axis=-1)
    b, t = np.indices(targets.shape)
    picked = logp[b, t, targets]
    return -(picked * mask).sum() * (1.0 / mask.sum())


class Adam:
    def __init__(self, config: TrainConfig, shapes):
        self.c = config
        self.m = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self.v = OrderedDict((k, np.zeros(s)) for k, s in shapes.items())
        self.t = 0

    def step(self, tensors, grads):
        c = self.c
        self.t += 1
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = min(1.0, c.grad_clip / (norm + 1e-12))
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        out = OrderedDict()
        for k, p in tensors.items():
            g = grads[k] * scale
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            out[k] = p - lr_t * self.m[k] / (np.sqrt(self.v[k]) + c.epsilon)
        return out, norm


def train(params: M.Parameters, corpus: Sequence[str], vocab: Vocab, config: TrainConfig,
          evaluate: Callable[[M.Parameters], float] | None = None):
    """Train on ``corpus`` and return ``(params, curve)``.

    ``curve`` has one ``(step, loss, accuracy)`` row every ``eval_every``
    steps, where loss is the mean over the window and accuracy comes from
    ``evaluate`` (NaN without one).  Data order, like initialisation, is fixed
    by seeds, so equal inputs give bit-identical weights.
    """
    if len(vocab) != params.config.vocab_size:
        raise InputError(f"vocabulary has {len(vocab)} words, model expects {params.config.vocab_size}")
    seqs = encode_corpus(corpus, vocab, params.config.max_seq_len)
    if not seqs:
        raise InputError("empty corpus")
    if config.steps == 0:
        return params, []
    pad = vocab.id(PAD)
    rng = np.random.default_rng(config.seed)
    tensors = OrderedDict((k, np.array(v)) for k, v in params.tensors.items())
    opt = Adam(config, M.param_shapes(params.config))
    order, cursor = rng.permutation(len(seqs)), 0
    curve, window = [], []
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > len(order):
            order, cursor = rng.permutation(len(seqs)), 0
        idx = order[cursor: cursor + config.batch_size]
        cursor += config.batch_size
        batch = _pad_batch([seqs[i] for i in idx], pad)
        current = params.with_tensors(tensors) if step > 1 else params
        try:
            loss, grads = value_and_grad(lambda p: lm_loss(p, batch, pad), current)
        except NumericError as exc:
            raise TrainingError(step, str(exc)) from None
        tensors, _ = opt.step(tensors, grads)
        if not all(np.all(np.isfinite(t)) for t in tensors.values()):
            raise TrainingError(step, "parameters became non-finite")
        window.append(loss)
        if step % config.eval_every == 0 or step == config.steps:
            trained = params.with_tensors(tensors)
            acc = float(evaluate(trained)) if evaluate is not None else float("nan")
            curve.append((step, float(np.mean(window)), acc))
            log.info("step %d loss %.4f acc %.4f", step, curve[-1][1], acc)
            window = []
    return params.with_tensors(tensors), curve


def lm_accuracy(params: M.Parameters, vocab: Vocab, category: RelationCategory,
                eval_pairs: Sequence[RelationPair], icl_pairs: Sequence[RelationPair]) -> float:
    """Fraction of prompts whose top-1 completion is the first token of an acceptable object."""
    if not eval_pairs:
        raise InputError("lm_accuracy needs at least one pair")
    prompts, targets = [], []
    for p in eval_pairs:
        tokens, _ = build_prompt(category, p.subject, icl_for(p, icl_pairs)[:8], vocab)
        prompts.append(tokens)
        targets.append(object_token_ids(p, vocab))
    preds = M.predict_next_batch(params, prompts)
    return sum(y in t for y, t in zip(preds, targets)) / len(eval_pairs)


def write_curve_csv(curve) -> str:
    lines = ["step,loss,accuracy\n"]
    lines += [f"{s},{l!r},{a!r}\n" for s, l, a in curve]
    return "".join(lines)
