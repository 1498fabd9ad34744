"""Synthetic relational corpora for training the toy model.

Two kinds of relation are generated over a common stem inventory:

* a systematic suffixing relation (``plural``), where every subject maps to
  its own suffixed form; ``fusional`` uses one suffix, ``agglutinative``
  stacks a number slot and a case slot so that subjects and objects both
  carry suffixes;
* arbitrary lookups (``color`` by default), a many-to-few map onto a small
  target set, or a random bijection onto fresh words.

Every surface form is a single token.  A fraction of stems is held out: their
pairs never appear in the query frame (the prompt template) but do appear in
an alternate frame, so completion accuracy on them measures generalisation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from lrelab.exceptions import ConfigError
from lrelab.relations import (
    SPECIAL_TOKENS,
    NL,
    RelationCategory,
    RelationGroup,
    RelationPair,
    Vocab,
    render_line,
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
COLOR_WORDS = ("red", "blue", "green", "yellow", "black", "white", "brown", "purple",
               "orange", "gray", "pink", "violet")


@dataclass(frozen=True)
class ArbitrarySpec:
    name: str = "color"
    kind: str = "many_to_few"   # or "bijective"
    n_targets: int = 8
    cue: str = "color"
    alt_cue: str = "paint"
    skew: float = 0.0           # target k drawn with weight 1 / (k + 1) ** skew

    def __post_init__(self):
        if self.kind not in ("many_to_few", "bijective"):
            raise ConfigError("arbitrary.kind", f"unknown kind {self.kind!r}")
        if self.kind == "many_to_few" and self.n_targets < 1:
            raise ConfigError("arbitrary.n_targets", "must be positive")
        if not (self.skew >= 0.0 and np.isfinite(self.skew)):
            raise ConfigError("arbitrary.skew", "must be a non-negative number")


@dataclass(frozen=True)
class SyntheticSpec:
    n_stems: int = 200
    scheme: str = "fusional"            # or "agglutinative"
    suffix: str = "s"
    number_suffix: str = "ler"
    case_suffixes: tuple = ("de", "den")
    cue: str = "plural"
    alt_cue: str = "many"
    arbitrary: tuple = (ArbitrarySpec(),)
    heldout_fraction: float = 0.25
    n_documents: int = 6000
    min_lines: int = 3
    max_lines: int = 9
    alt_fraction: float = 0.5
    vocab_budget: int = 4096
    cue_in_query: bool = True   # False: the query frame is bare and demonstrations identify the relation

    def __post_init__(self):
        arb = tuple(a if isinstance(a, ArbitrarySpec) else ArbitrarySpec(**a) for a in self.arbitrary)
        object.__setattr__(self, "arbitrary", arb)
        object.__setattr__(self, "case_suffixes", tuple(self.case_suffixes))
        if self.scheme not in ("fusional", "agglutinative"):
            raise ConfigError("scheme", f"expected 'fusional' or 'agglutinative', got {self.scheme!r}")
        if not arb:
            raise ConfigError("arbitrary", "at least one arbitrary-mapping relation is required")
        if self.n_stems < 10:
            raise ConfigError("n_stems", "need at least 10 stems")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction", "must lie in [0, 1)")
        if not 1 <= self.min_lines <= self.max_lines:
            raise ConfigError("min_lines", "need 1 <= min_lines <= max_lines")
        if not 0.0 <= self.alt_fraction <= 1.0:
            raise ConfigError("alt_fraction", "must lie in [0, 1]")
        if self.n_documents < 1:
            raise ConfigError("n_documents", "must be positive")
        n_cases = len(self.case_suffixes) + 1 if self.scheme == "agglutinative" else 1
        if self.n_stems * 2 * n_cases > len(_CONSONANTS) ** 2 * len(_VOWELS) ** 2:
            raise ConfigError("n_stems", "stem inventory exhausted")

    def forms_per_stem(self):
        return 2 if self.scheme == "fusional" else 2 * (len(self.case_suffixes) + 1)

    def required_vocab(self):
        n = len(SPECIAL_TOKENS) + self.n_stems * self.forms_per_stem() + 2
        for a in self.arbitrary:
            n += 2 + (a.n_targets if a.kind == "many_to_few" else self.n_stems)
        return n

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "arbitrary" in d:
            d["arbitrary"] = tuple(ArbitrarySpec(**a) for a in d["arbitrary"])
        return cls(**d)


class SyntheticDataset(NamedTuple):
    corpus: list
    categories: list
    vocab: Vocab
    heldout: dict   # category id -> tuple of held-out subjects
    frames: dict    # category id -> alternate-frame template


def _pseudo_words(rng, n, syllables, taken):
    out = []
    while len(out) < n:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                    for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def sample_documents(categories, rng, n_documents, frames=None, heldout=None,
                     min_lines=3, max_lines=9, alt_fraction=0.5) -> list:
    """Documents of ``min_lines``..``max_lines`` completed lines of one relation, joined by ``<nl>``.

    With probability ``alt_fraction`` a document uses the relation's alternate
    frame and may include held-out subjects; otherwise it uses the query
    template and excludes them.
    """
    frames, heldout = frames or {}, heldout or {}
    corpus = []
    for _ in range(n_documents):
        cat = categories[int(rng.integers(len(categories)))]
        alt = cat.id in frames and rng.random() < alt_fraction
        held = set(heldout.get(cat.id, ()))
        pool = list(cat.pairs) if alt else [p for p in cat.pairs if p.subject not in held]
        template = frames[cat.id] if alt else cat.template
        k = int(rng.integers(min_lines, max_lines + 1))
        chosen = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        lines = [" ".join(render_line(template, pool[c].subject, pool[c].object)) for c in chosen]
        corpus.append(f" {NL} ".join(lines))
    return corpus


def _query_frame(spec, cue):
    return f"{cue} {{subject}} {{object}}" if spec.cue_in_query else "{subject} {object}"


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> SyntheticDataset:
    if spec.required_vocab() > spec.vocab_budget:
        raise ConfigError(
            "n_stems", f"{spec.n_stems} stems need {spec.required_vocab()} vocabulary entries, "
                       f"budget is {spec.vocab_budget}")
    rng = np.random.default_rng(seed)
    taken = set(COLOR_WORDS) | set(SPECIAL_TOKENS)
    stems = _pseudo_words(rng, spec.n_stems, 2, taken)

    categories, frames = [], {}
    if spec.scheme == "fusional":
        sys_pairs = [RelationPair(s, (s + spec.suffix,)) for s in stems]
    else:
        cases = ("",) + spec.case_suffixes
        sys_pairs = [RelationPair(s + c, (s + spec.number_suffix + c,))
                     for s, c in itertools.product(stems, cases)]
    sys_cat = RelationCategory(f"S01-{spec.cue}", RelationGroup.INFLECTIONAL,
                               _query_frame(spec, spec.cue), tuple(sys_pairs))
    categories.append(sys_cat)
    frames[sys_cat.id] = f"{spec.alt_cue} {{subject}} {{object}}"

    for i, a in enumerate(spec.arbitrary, start=2):
        if a.kind == "many_to_few":
            if a.n_targets <= len(COLOR_WORDS):
                targets = list(COLOR_WORDS[: a.n_targets])
            else:
                targets = _pseudo_words(rng, a.n_targets, 3, taken)
            weights = 1.0 / np.arange(1, len(targets) + 1) ** a.skew
            assign = rng.choice(len(targets), size=spec.n_stems, p=weights / weights.sum())
            # every target is used at least once when there are enough stems
            k = min(len(targets), spec.n_stems)
            assign[rng.permutation(spec.n_stems)[:k]] = np.arange(k)
            pairs = [RelationPair(s, (targets[k],)) for s, k in zip(stems, assign)]
        else:
            targets = _pseudo_words(rng, spec.n_stems, 3, taken)
            perm = rng.permutation(spec.n_stems)
            pairs = [RelationPair(s, (targets[k],)) for s, k in zip(stems, perm)]
        cat = RelationCategory(f"S{i:02d}-{a.name}", RelationGroup.ENCYCLOPEDIC,
                               _query_frame(spec, a.cue), tuple(pairs))
        categories.append(cat)
        frames[cat.id] = f"{a.alt_cue} {{subject}} {{object}}"

    n_held = int(round(spec.heldout_fraction * spec.n_stems))
    held_stems = set(rng.choice(stems, size=n_held, replace=False).tolist()) if n_held else set()
    heldout = {}
    # stems are two CV syllables, so the first four letters of any form are its stem
    for cat in categories:
        heldout[cat.id] = tuple(p.subject for p in cat.pairs if p.subject[:4] in held_stems)

    corpus = sample_documents(categories, rng, spec.n_documents, frames, heldout,
                              spec.min_lines, spec.max_lines, spec.alt_fraction)

    words = []
    for cat in categories:
        for t in (cat.template, frames[cat.id]):
            words += [w for w in t.split() if not w.startswith("{")]
    words += stems
    for cat in categories:
        for p in cat.pairs:
            words.append(p.subject)
            words.extend(p.objects)
    if spec.scheme == "agglutinative":
        # the full paradigm is in the vocabulary even where no relation uses it
        for s in stems:
            for c in ("",) + spec.case_suffixes:
                words += [s + c, s + spec.number_suffix + c]
    vocab = Vocab.build(words)
    return SyntheticDataset(corpus, categories, vocab, heldout, frames)

