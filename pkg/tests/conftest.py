from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest

from lrelab import model as M
from lrelab.relations import RelationCategory, RelationGroup, RelationPair, Vocab
from lrelab.synthetic import ArbitrarySpec, SyntheticSpec, generate_synthetic
from lrelab.trainer import TrainConfig, train

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "lrelab" / "data"
CONFIG_DIR = DATA_DIR / "configs"
BATS_DIR = DATA_DIR / "bats"
PIECES = DATA_DIR / "tokenizer" / "pieces.txt"

# one line per acceptance criterion, printed again in the terminal summary
VERDICTS: list = []


def record_verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def small_config(**changes) -> M.ModelConfig:
    base = dict(d_model=32, n_layers=4, n_heads=4, d_head=8, d_mlp=64, vocab_size=64,
                max_seq_len=32, seed=3)
    base.update(changes)
    return M.ModelConfig(**base)


def toy_category(n_pairs=20, template="{subject} {object}", group=RelationGroup.SYNTHETIC,
                 cat_id="T01-toy"):
    pairs = tuple(RelationPair(f"w{i}", (f"w{i}x",)) for i in range(n_pairs))
    return RelationCategory(cat_id, group, template, pairs)


def toy_vocab(category) -> Vocab:
    words = []
    for p in category.pairs:
        words += [p.subject, *p.objects]
    return Vocab.build(words + [w for w in category.template.split() if not w.startswith("{")])


def affine_oracle(vocab_size, seed=0, d=16, n_layers=3, max_seq_len=32):
    """A model whose subject-to-object map is ``s + c``.

    Every attention output and MLP output weight is zero, so each block adds
    only its MLP output offset to the residual stream.
    """
    cfg = M.ModelConfig(d_model=d, n_layers=n_layers, n_heads=2, d_head=d // 2, d_mlp=2 * d,
                        vocab_size=vocab_size, max_seq_len=max_seq_len,
                        final_layer_norm=False, seed=seed)
    params = M.build_model(cfg)
    rng = np.random.default_rng(seed + 100)
    t = OrderedDict(params.tensors)
    for l in range(n_layers):
        t[f"blocks.{l}.attn.W_O"] = np.zeros((d, d))
        t[f"blocks.{l}.mlp.W_out"] = np.zeros((2 * d, d))
        t[f"blocks.{l}.mlp.b_out"] = rng.standard_normal(d)
    return M.Parameters(cfg, t)


@pytest.fixture(scope="session")
def random_params():
    return M.build_model(small_config())


@pytest.fixture(scope="session")
def toy():
    """Random model over a 20-pair toy relation."""
    cat = toy_category()
    vocab = toy_vocab(cat)
    params = M.build_model(small_config(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=2))
    return params, vocab, cat


TINY_SPEC = SyntheticSpec(n_stems=30, n_documents=800, max_lines=6, cue_in_query=False,
                          arbitrary=(ArbitrarySpec(n_targets=3, skew=1.0),))


@pytest.fixture(scope="session")
def tiny_trained():
    """A 2-layer model trained for a few seconds; knows most pairs of both relations."""
    ds = generate_synthetic(TINY_SPEC, 0)
    cfg = M.ModelConfig(d_model=32, n_layers=2, n_heads=4, d_head=8, d_mlp=64,
                        vocab_size=len(ds.vocab), max_seq_len=32)
    params, curve = train(M.build_model(cfg), ds.corpus, ds.vocab,
                          TrainConfig(steps=600, batch_size=16, eval_every=100, learning_rate=0.01))
    return params, ds, curve
