import numpy as np
import pytest

from lrelab import model as M
from lrelab.exceptions import ConfigError, InputError, TrainingError
from lrelab.relations import Vocab
from lrelab.synthetic import generate_synthetic
from lrelab.trainer import TrainConfig, encode_corpus, lm_accuracy, lm_loss, train, write_curve_csv
from conftest import TINY_SPEC, toy_category, toy_vocab


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(TINY_SPEC, 0)
    cfg = M.ModelConfig(d_model=16, n_layers=2, n_heads=2, d_head=8, d_mlp=32,
                        vocab_size=len(ds.vocab), max_seq_len=32)
    return M.build_model(cfg), ds


def test_zero_steps_returns_input(setup):
    params, ds = setup
    out, curve = train(params, ds.corpus, ds.vocab, TrainConfig(steps=0))
    assert out is params and curve == []


def test_same_seed_bit_identical(setup):
    params, ds = setup
    cfg = TrainConfig(steps=6, batch_size=8, eval_every=3)
    a, ca = train(params, ds.corpus, ds.vocab, cfg)
    b, cb = train(params, ds.corpus, ds.vocab, cfg)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a.tensors)
    assert [r[:2] for r in ca] == [r[:2] for r in cb]
    c, _ = train(params, ds.corpus, ds.vocab, TrainConfig(steps=6, batch_size=8, seed=1))
    assert not a.equals(c)


def test_curve_rows(setup):
    params, ds = setup
    _, curve = train(params, ds.corpus, ds.vocab, TrainConfig(steps=5, batch_size=8, eval_every=2),
                     evaluate=lambda p: 0.5)
    assert [r[0] for r in curve] == [2, 4, 5]
    assert all(r[2] == 0.5 and np.isfinite(r[1]) for r in curve)
    assert write_curve_csv(curve).splitlines()[0] == "step,loss,accuracy"


def test_tiny_run_loss_decreases(tiny_trained):
    _, _, curve = tiny_trained
    losses = [r[1] for r in curve]
    assert losses[-1] < losses[0]
    assert all(b <= a + 0.02 for a, b in zip(losses, losses[1:]))


def test_vocab_size_must_match(setup):
    params, ds = setup
    with pytest.raises(InputError):
        train(params, ds.corpus, Vocab.build(["a"]), TrainConfig(steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(setup):
    params, ds = setup
    with pytest.raises(TrainingError) as exc:
        train(params, ds.corpus, ds.vocab, TrainConfig(steps=3, learning_rate=1e300, grad_clip=1e300))
    assert exc.value.step >= 1


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(steps=-1), dict(batch_size=0),
                                dict(beta1=1.0), dict(beta2=0.0), dict(grad_clip=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_unknown_config_field():
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_dict({"lr": 1})
    assert exc.value.field == "lr"


def test_encode_corpus_prepends_bos_and_truncates():
    vocab = Vocab.build(["a", "b"])
    seqs = encode_corpus(["a b a b a", "b"], vocab, max_seq_len=4)
    assert [s.tolist() for s in seqs] == [[2, 4, 5, 4], [2, 5]]


def test_loss_ignores_padding(setup):
    params, _ = setup
    tokens = np.array([[2, 5, 6, 7]])
    padded = np.array([[2, 5, 6, 7, 0, 0]])
    assert np.isclose(lm_loss(params, tokens, 0), lm_loss(params, padded, 0), atol=1e-12)


# ---------------------------------------------------------------------------
# lm_accuracy


def _stub(vocab, cat, perfect):
    """Final-norm-free model whose logits are either uniform or spike on the object."""
    cfg = M.ModelConfig(d_model=len(vocab), n_layers=1, n_heads=1, d_head=len(vocab), d_mlp=4,
                        vocab_size=len(vocab), max_seq_len=32, final_layer_norm=False)
    p = M.build_model(cfg)
    d = len(vocab)
    E = np.zeros((d, d))
    if perfect:
        for pair in cat.pairs:
            E[vocab.id(pair.subject), vocab.id(pair.object)] = 1.0
    return p.replace(embed__W_E=E, embed__W_pos=np.zeros((32, d)),
                     blocks__0__attn__W_O=np.zeros((d, d)), blocks__0__mlp__W_out=np.zeros((4, d)),
                     unembed__W_U=np.eye(d))


def test_perfect_stub_scores_one():
    cat = toy_category()
    vocab = toy_vocab(cat)
    assert lm_accuracy(_stub(vocab, cat, True), vocab, cat, cat.pairs[8:], cat.pairs[:8]) == 1.0


def test_uniform_stub_scores_chance():
    cat = toy_category()
    vocab = toy_vocab(cat)
    # uniform logits always pick token 0 (padding), so accuracy sits at or below chance
    acc = lm_accuracy(_stub(vocab, cat, False), vocab, cat, cat.pairs[8:], cat.pairs[:8])
    assert acc <= 1 / len(vocab)


def test_empty_pairs():
    cat = toy_category()
    with pytest.raises(InputError):
        lm_accuracy(None, toy_vocab(cat), cat, [], cat.pairs[:8])
