"""Relation datasets: BATS-format files, synthetic relations, prompts and splits."""
from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lrelab import model as M
from lrelab.exceptions import ConfigError, ParseError, SplitError, VocabError

log = logging.getLogger(__name__)

PAD, UNK, BOS, NL = "<pad>", "<unk>", "<bos>", "<nl>"
SPECIAL_TOKENS = (PAD, UNK, BOS, NL)
DEFAULT_TEMPLATE = "{subject} {object}"
N_ICL = 8


class RelationGroup(str, enum.Enum):
    INFLECTIONAL = "Inflectional"
    DERIVATIONAL = "Derivational"
    ENCYCLOPEDIC = "Encyclopedic"
    LEXICOGRAPHIC = "Lexicographic"
    SYNTHETIC = "Synthetic"


# BATS group folder names, in the public layout
BATS_DIRS = {
    RelationGroup.INFLECTIONAL: "1_Inflectional_morphology",
    RelationGroup.DERIVATIONAL: "2_Derivational_morphology",
    RelationGroup.ENCYCLOPEDIC: "3_Encyclopedic_semantics",
    RelationGroup.LEXICOGRAPHIC: "4_Lexicographic_semantics",
    RelationGroup.SYNTHETIC: "5_Synthetic",
}


@dataclass(frozen=True)
class RelationPair:
    subject: str
    objects: tuple

    def __post_init__(self):
        objects = tuple(self.objects)
        object.__setattr__(self, "objects", objects)
        if not self.subject or not self.subject.strip():
            raise ValueError("subject must be non-empty")
        if not objects or any(not o.strip() for o in objects):
            raise ValueError(f"{self.subject!r}: object list must be non-empty")
        if len(set(objects)) != len(objects):
            raise ValueError(f"{self.subject!r}: duplicate objects {objects}")

    @property
    def object(self):
        return self.objects[0]


@dataclass(frozen=True)
class RelationCategory:
    id: str
    group: RelationGroup
    template: str
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "group", RelationGroup(self.group))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        check_template(self.template)
        subjects = [p.subject for p in self.pairs]
        if len(set(subjects)) != len(subjects):
            raise ValueError(f"{self.id}: duplicate subjects")

    def pair(self, subject) -> RelationPair:
        for p in self.pairs:
            if p.subject == subject:
                return p
        raise KeyError(subject)

    def to_dict(self):
        return {"id": self.id, "group": self.group.value, "template": self.template,
                "pairs": [[p.subject, list(p.objects)] for p in self.pairs]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["group"], d["template"],
                   tuple(RelationPair(s, tuple(o)) for s, o in d["pairs"]))


def check_template(template: str) -> None:
    words = template.split()
    if words.count("{subject}") != 1 or words.count("{object}") != 1:
        raise ConfigError("template", f"needs exactly one {{subject}} and one {{object}}: {template!r}")
    i = words.index("{subject}")
    if i + 1 >= len(words) or words[i + 1] != "{object}":
        raise ConfigError("template", f"{{object}} must directly follow {{subject}}: {template!r}")


def render_line(template: str, subject: str, obj: str | None = None) -> list:
    """Words of one template line; with ``obj=None`` the line stops after the subject."""
    out = []
    for w in template.split():
        if w == "{subject}":
            out.extend(subject.split())
            if obj is None:
                return out
        elif w == "{object}":
            out.extend(obj.split())
        else:
            out.append(w)
    return out


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    """Word-level vocabulary. Special tokens occupy ids 0..3."""

    words: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        object.__setattr__(self, "words", words)
        index = {w: i for i, w in enumerate(words)}
        if len(index) != len(words):
            raise ValueError("vocabulary words must be unique")
        if words[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        object.__setattr__(self, "index", index)

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        seen = dict.fromkeys(SPECIAL_TOKENS)
        for w in words:
            seen.setdefault(w)
        return cls(tuple(seen))

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabError(word) from None

    def encode(self, words: Sequence[str]) -> list:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list:
        return [self.words[int(i)] for i in np.atleast_1d(ids)]

    def tokenize(self, text: str) -> list:
        return text.split()

    def first_token(self, word: str) -> str:
        return self.tokenize(word)[0]

    def to_text(self) -> str:
        return "".join(w + "\n" for w in self.words)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(tuple(line for line in text.split("\n") if line))


class SubwordTokenizer:
    """Greedy longest-prefix tokenizer over a fixed piece inventory.

    Characters missing from the inventory become single-character pieces,
    so every string tokenizes.
    """

    def __init__(self, pieces: Iterable[str]):
        self.pieces = frozenset(p for p in pieces if p)
        self._max = max((len(p) for p in self.pieces), default=1)

    @classmethod
    def from_file(cls, path) -> "SubwordTokenizer":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line.strip() for line in text.splitlines() if line.strip())

    def tokenize(self, text: str) -> list:
        out = []
        for word in text.split():
            i = 0
            while i < len(word):
                for n in range(min(self._max, len(word) - i), 0, -1):
                    if word[i:i + n] in self.pieces or n == 1:
                        out.append(word[i:i + n])
                        i += n
                        break
        return out

    def first_token(self, word: str) -> str:
        return self.tokenize(word)[0]


# ---------------------------------------------------------------------------
# BATS files

_BATS_NAME = re.compile(r"^\s*([A-Za-z]\d+)\s*\[(.+)\]\s*$")


def category_id_from_filename(stem: str) -> str:
    m = _BATS_NAME.match(stem)
    if not m:
        return re.sub(r"\s+", "-", stem.strip())
    name = re.sub(r"\s*-\s*|\s+", "-", m.group(2).strip())
    return f"{m.group(1)}-{name}"


def _infer_group(dirname: str, cat_id: str) -> RelationGroup:
    low = dirname.lower()
    for group in RelationGroup:
        if group.value.lower() in low:
            return group
    code = cat_id[:1].upper()
    return {"I": RelationGroup.INFLECTIONAL, "D": RelationGroup.DERIVATIONAL,
            "E": RelationGroup.ENCYCLOPEDIC, "L": RelationGroup.LEXICOGRAPHIC}.get(
        code, RelationGroup.SYNTHETIC)


def parse_bats_lines(text: str, path="<text>") -> list:
    pairs, seen = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip(" \r\n")
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError(path, lineno, "missing tab between subject and objects")
        subject, objs = (part.strip() for part in line.split("\t", 1))
        if not subject:
            raise ParseError(path, lineno, "empty subject")
        objects = []
        for o in objs.split("/"):
            o = o.strip()
            if o and o not in objects:
                objects.append(o)
        if not objects:
            raise ParseError(path, lineno, "empty object list")
        if subject in seen:
            raise ParseError(path, lineno, f"duplicate subject {subject!r} (first on line {seen[subject]})")
        seen[subject] = lineno
        pairs.append(RelationPair(subject, tuple(objects)))
    if not pairs:
        raise ParseError(path, None, "file contains no pairs")
    return pairs


def format_bats_lines(category: RelationCategory) -> str:
    return "".join(f"{p.subject}\t{'/'.join(p.objects)}\n" for p in category.pairs)


def parse_bats_dir(path) -> list:
    """Read every ``*.txt`` category file below ``path``.

    Group comes from the enclosing folder name (``1_Inflectional_morphology``
    and so on), falling back on the category code letter.  An optional
    ``templates.json`` at the root maps category ids to prompt templates.
    """
    root = Path(path)
    if not root.is_dir():
        raise ParseError(root, None, "not a directory")
    templates = {}
    tpl_file = root / "templates.json"
    if tpl_file.exists():
        templates = json.loads(tpl_file.read_text(encoding="utf-8"))
    cats = []
    for f in sorted(root.rglob("*.txt")):
        cat_id = category_id_from_filename(f.stem)
        pairs = parse_bats_lines(f.read_text(encoding="utf-8"), path=f)
        group = _infer_group(f.parent.name if f.parent != root else "", cat_id)
        cats.append(RelationCategory(cat_id, group, templates.get(cat_id, DEFAULT_TEMPLATE), tuple(pairs)))
    if not cats:
        raise ParseError(root, None, "no category files found")
    return cats


def write_bats_dir(categories: Sequence[RelationCategory], path) -> None:
    from lrelab.checkpoint import atomic_write_text

    root = Path(path)
    templates = {}
    for cat in categories:
        m = re.match(r"^([A-Za-z]\d+)-(.+)$", cat.id)
        name = f"{m.group(1)} [{m.group(2)}]" if m else cat.id
        atomic_write_text(root / BATS_DIRS[cat.group] / f"{name}.txt", format_bats_lines(cat))
        if cat.template != DEFAULT_TEMPLATE:
            templates[cat.id] = cat.template
    if templates:
        atomic_write_text(root / "templates.json", json.dumps(templates, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prompts, splits, filtering


def build_prompt(category: RelationCategory, query_subject: str, icl_pairs: Sequence[RelationPair],
                 vocab: Vocab) -> tuple:
    """Token ids of the ICL prompt and the index of the query subject's last token.

    The prompt is ``<bos>``, one completed template line per ICL pair each
    followed by ``<nl>``, then the query line cut right after the subject.
    """
    if any(p.subject == query_subject for p in icl_pairs):
        raise ValueError(f"query subject {query_subject!r} appears among its own ICL examples")
    words = [BOS]
    for p in icl_pairs:
        words += render_line(category.template, p.subject, p.object)
        words.append(NL)
    words += render_line(category.template, query_subject)
    return vocab.encode(words), len(words) - 1


def split_pairs(category: RelationCategory, n_train: int = N_ICL, seed: int = 0,
                pairs: Sequence[RelationPair] | None = None) -> tuple:
    """Seeded disjoint split. Train keeps the sampled order; test keeps category order."""
    pairs = tuple(category.pairs if pairs is None else pairs)
    if n_train < 1 or len(pairs) <= n_train:
        raise SplitError(f"{category.id}: need more than n_train={n_train} pairs, have {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    chosen = set(order[:n_train].tolist())
    train = tuple(pairs[i] for i in order[:n_train])
    test = tuple(p for i, p in enumerate(pairs) if i not in chosen)
    return train, test


def icl_for(query: RelationPair, icl_pairs: Sequence[RelationPair]) -> tuple:
    """ICL examples for ``query``: the given pairs minus the query itself."""
    return tuple(p for p in icl_pairs if p.subject != query.subject)


def object_token_ids(pair: RelationPair, vocab: Vocab) -> set:
    ids = set()
    for o in pair.objects:
        first = vocab.first_token(o)
        if first in vocab:
            ids.add(vocab.id(first))
    return ids


def filter_known(params: M.Parameters, vocab: Vocab, category: RelationCategory,
                 pairs: Sequence[RelationPair], icl_pairs: Sequence[RelationPair]) -> list:
    """Pairs whose prompt the model completes with the first token of an acceptable object.

    Each pair is prompted with ``icl_pairs`` (minus itself) as demonstrations.
    Pairs with no in-vocabulary object are dropped with a warning.
    """
    candidates, prompts = [], []
    for p in pairs:
        targets = object_token_ids(p, vocab)
        if not targets:
            log.warning("%s: dropping %r, no object is in the vocabulary", category.id, p.subject)
            continue
        tokens, _ = build_prompt(category, p.subject, icl_for(p, icl_pairs), vocab)
        candidates.append((p, targets))
        prompts.append(tokens)
    preds = M.predict_next_batch(params, prompts) if prompts else []
    return [p for (p, targets), y in zip(candidates, preds) if y in targets]
