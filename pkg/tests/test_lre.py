import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from lrelab import model as M
from lrelab.diff import jacobian, make_map
from lrelab.evaluation import faithfulness
from lrelab.exceptions import EstimationError, FormatError, NumericError, OperatorError
from lrelab.lre import (
    DEFAULT_BETA,
    N_SAMPLES,
    JacobianSample,
    LinearRelationalEmbedding,
    OperatorKind,
    RelationalOperator,
    apply,
    collect_samples,
    estimate,
    load_operator,
    operator_from_samples,
    sample_prompt,
    save_operator,
)
from lrelab.relations import build_prompt, split_pairs
from conftest import affine_oracle, small_config, toy_category, toy_vocab


def _op(kind, d=4, seed=0, beta=1.0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, d)) if kind in ("affine", "linear") else None
    b = rng.standard_normal(d) if kind != "linear" else None
    return RelationalOperator(kind, W, b, beta, 1, "r", ("a",))


def test_default_constants():
    assert DEFAULT_BETA == 7.0
    assert N_SAMPLES == 8


# ---------------------------------------------------------------------------
# apply


def test_apply_forms():
    s = np.array([1.0, -2.0, 0.5, 3.0])
    aff, lin, bias = _op("affine", beta=7.0), _op("linear"), _op("bias")
    np.testing.assert_allclose(apply(aff, s), 7.0 * aff.W @ s + aff.b, rtol=1e-15)
    np.testing.assert_allclose(apply(lin, s), lin.W @ s, rtol=1e-15)
    np.testing.assert_array_equal(apply(bias, s), s + bias.b)
    tr = RelationalOperator("translation", None, bias.b, 1.0, 1, "r", ("a",))
    np.testing.assert_array_equal(apply(tr, s), s + bias.b)


def test_identity_and_zero_offset():
    s = np.arange(4.0)
    np.testing.assert_array_equal(apply(RelationalOperator("linear", np.eye(4), None, 1, 0, "r", ("a",)), s), s)
    np.testing.assert_array_equal(apply(RelationalOperator("bias", None, np.zeros(4), 1, 0, "r", ("a",)), s), s)


@settings(max_examples=60, deadline=None)
@given(st.integers(-30, 30), st.booleans(), st.integers(0, 2 ** 16))
def test_linear_homogeneity_power_of_two_is_bit_exact(exponent, negative, seed):
    alpha = (-1.0 if negative else 1.0) * 2.0 ** exponent
    op = _op("linear", d=8, seed=seed)
    s = np.random.default_rng(seed + 1).standard_normal(8)
    assert apply(op, alpha * s).tobytes() == (alpha * apply(op, s)).tobytes()


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False).filter(lambda a: a == 0 or abs(a) > 1e-100),
       st.integers(0, 2 ** 16))
def test_linear_homogeneity_within_rounding(alpha, seed):
    op = _op("linear", d=8, seed=seed)
    s = np.random.default_rng(seed + 1).standard_normal(8)
    # one rounding per product and per addition, plus the scaling itself
    bound = abs(alpha) * (np.abs(op.W) @ np.abs(s)) * 10 * np.finfo(float).eps
    assert np.all(np.abs(apply(op, alpha * s) - alpha * apply(op, s)) <= bound)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_affine_at_beta_one_is_linear_plus_b(seed):
    aff = _op("affine", d=8, seed=seed)
    lin = RelationalOperator("linear", aff.W, None, 1.0, 1, "r", ("a",))
    s = np.random.default_rng(seed + 1).standard_normal(8)
    assert np.max(np.abs(apply(aff, s) - (apply(lin, s) + aff.b))) <= 1e-12


def test_apply_batches():
    op = _op("affine", d=4)
    S = np.random.default_rng(1).standard_normal((5, 4))
    np.testing.assert_allclose(apply(op, S), np.stack([apply(op, s) for s in S]), rtol=1e-14)


@pytest.mark.parametrize("kind,W,b", [("linear", np.eye(2), np.zeros(2)), ("bias", np.eye(2), np.zeros(2)),
                                      ("affine", None, np.zeros(2)), ("translation", None, None)])
def test_kind_field_mismatch(kind, W, b):
    with pytest.raises(OperatorError):
        RelationalOperator(kind, W, b, 1.0, 0, "r", ("a",))


def test_operator_invariants():
    with pytest.raises(OperatorError):
        RelationalOperator("linear", np.eye(2), None, 0.0, 0, "r", ("a",))
    with pytest.raises(OperatorError):
        RelationalOperator("linear", np.full((2, 2), np.nan), None, 1.0, 0, "r", ("a",))
    with pytest.raises(OperatorError):
        RelationalOperator("linear", np.eye(2), None, 1.0, 0, "r", ("a", "b"), n_samples=3)
    with pytest.raises(OperatorError):
        apply(_op("linear", d=4), np.zeros(3))
    assert _op("linear").n_samples == 1


# ---------------------------------------------------------------------------
# estimation


def test_affine_oracle_is_reproduced_exactly():
    cat = toy_category()
    vocab = toy_vocab(cat)
    params = affine_oracle(len(vocab))
    train, test = split_pairs(cat, 1, seed=0)
    op = estimate(params, vocab, cat, train, 1, "affine", beta=1.0)
    tokens, pos = build_prompt(cat, test[0].subject, train, vocab)
    fmap = make_map(params, tokens, pos, 1)
    S = np.random.default_rng(0).standard_normal((100, params.config.d_model)) * 3
    assert np.max(np.abs(apply(op, S) - fmap(S))) <= 1e-8
    assert faithfulness(params, vocab, cat, op, test) == 1.0


def test_identical_samples_average_to_themselves(toy):
    params, vocab, cat = toy
    sample = collect_samples(params, vocab, cat, cat.pairs[:3], 1)[0]
    for n in (1, 2, 3, 5, 8):
        op = operator_from_samples([sample] * n, "affine")
        assert np.array_equal(op.W, sample.W)
        assert np.array_equal(op.b, sample.o - sample.W @ sample.s)


def test_estimate_follows_sample_formula(toy):
    params, vocab, cat = toy
    train = cat.pairs[:4]
    op = estimate(params, vocab, cat, train, 1, "affine", beta=7.0)
    Ws, bs = [], []
    for p in train:
        tokens, pos = build_prompt(cat, p.subject, [q for q in train if q is not p], vocab)
        f = make_map(params, tokens, pos, 1)
        res = jacobian(f, f.base_state)
        Ws.append(res.W)
        bs.append(res.value - res.W @ f.base_state)
    np.testing.assert_allclose(op.W, np.mean(Ws, axis=0), atol=1e-13)
    np.testing.assert_allclose(op.b, np.mean(bs, axis=0), atol=1e-13)
    assert op.n_samples == 4 and op.sample_ids == tuple(p.subject for p in train)
    assert op.beta == 7.0 and op.source_layer == 1 and op.relation_id == cat.id


def test_translation_is_mean_offset(toy):
    params, vocab, cat = toy
    train = cat.pairs[:4]
    op = estimate(params, vocab, cat, train, 1, "translation")
    diffs = []
    for p in train:
        f = make_map(params, *sample_prompt(vocab, cat, p, train), 1)
        diffs.append(f.clean_output - f.base_state)
    np.testing.assert_allclose(op.b, np.mean(diffs, axis=0), atol=1e-13)
    assert op.W is None


def test_bias_reuses_jacobian_offset(toy):
    params, vocab, cat = toy
    samples = collect_samples(params, vocab, cat, cat.pairs[:5], 1)
    aff = operator_from_samples(samples, "affine")
    bias = operator_from_samples(samples, "bias")
    assert np.array_equal(aff.b, bias.b) and bias.W is None


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(5)))
def test_estimate_is_permutation_invariant(order):
    cat = toy_category()
    vocab = toy_vocab(cat)
    params = M.build_model(small_config(vocab_size=len(vocab), d_model=8, n_heads=2, d_head=4, n_layers=2))
    samples = collect_samples(params, vocab, cat, cat.pairs[:5], 1)
    base = operator_from_samples(samples, "affine")
    perm = operator_from_samples([samples[i] for i in order], "affine")
    assert np.array_equal(base.W, perm.W) and np.array_equal(base.b, perm.b)


def test_empty_training_set(toy):
    params, vocab, cat = toy
    with pytest.raises(EstimationError):
        estimate(params, vocab, cat, [], 1)
    with pytest.raises(EstimationError):
        operator_from_samples([], "linear")


def test_non_finite_jacobian_names_sample():
    s = JacobianSample("bad", np.zeros(2), np.array([[np.nan, 0], [0, 1]]), np.zeros(2))
    with pytest.raises(NumericError, match="bad"):
        operator_from_samples([s], "linear")


def test_forward_and_fd_estimates_agree(toy):
    params, vocab, cat = toy
    a = estimate(params, vocab, cat, cat.pairs[:3], 1, "linear", method="forward")
    b = estimate(params, vocab, cat, cat.pairs[:3], 1, "linear", method="fd")
    np.testing.assert_allclose(a.W, b.W, atol=1e-6)


# ---------------------------------------------------------------------------
# files


@pytest.mark.parametrize("kind", [k.value for k in OperatorKind])
def test_operator_round_trip(tmp_path, kind):
    op = _op(kind, d=6, beta=7.0)
    save_operator(tmp_path / "op.lrel", op)
    loaded = load_operator(tmp_path / "op.lrel")
    assert loaded == op
    for name in ("W", "b"):
        a, b = getattr(op, name), getattr(loaded, name)
        assert (a is None and b is None) or a.tobytes() == b.tobytes()


def test_truncated_operator_file(tmp_path):
    save_operator(tmp_path / "op.lrel", _op("affine", d=6))
    data = (tmp_path / "op.lrel").read_bytes()
    (tmp_path / "op.lrel").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_operator(tmp_path / "op.lrel")


def test_operator_dimension_mismatch_names_both(tmp_path):
    save_operator(tmp_path / "op.lrel", _op("linear", d=6))
    with pytest.raises(FormatError, match=r"d=6.*d_model=32"):
        load_operator(tmp_path / "op.lrel", expected_dim=32)


def test_model_file_is_not_an_operator(tmp_path, random_params):
    from lrelab.checkpoint import save_model
    save_model(tmp_path / "m.lrel", random_params)
    with pytest.raises(FormatError, match="not an operator"):
        load_operator(tmp_path / "m.lrel")


# ---------------------------------------------------------------------------
# estimator interface


def test_estimator_wraps_functional_api(toy):
    params, vocab, cat = toy
    train, test = split_pairs(cat, 8, seed=1)
    est = LinearRelationalEmbedding(params, vocab, cat, source_layer=1, kind="affine", beta=3.0)
    assert est.fit(train) is est
    op = estimate(params, vocab, cat, train, 1, "affine", 3.0)
    assert est.operator_ == op
    assert est.score(test) == faithfulness(params, vocab, cat, op, test)
    S = est.subject_states(test)
    np.testing.assert_array_equal(est.transform(test), apply(op, S))
    assert est.predict(test).shape == (len(test),)
    assert clone(est).get_params()["beta"] == 3.0


def test_unfitted_estimator(toy):
    from sklearn.exceptions import NotFittedError
    params, vocab, cat = toy
    with pytest.raises(NotFittedError):
        LinearRelationalEmbedding(params, vocab, cat).transform_states(np.zeros((1, 16)))
