import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrelab import model as M
from lrelab.exceptions import ConfigError, InputError
from conftest import small_config


# ---------------------------------------------------------------------------
# straight-line oracle: scalar loops over positions, heads and units


def _ln(v, w, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * wi + bi for x, wi, bi in zip(v, w, b)]


def _matvec(v, W):
    return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def oracle_trace(params, tokens):
    c = params.config
    T = {k: np.asarray(v).tolist() for k, v in params.tensors.items()}
    n, H, dh = len(tokens), c.n_heads, c.d_head
    x = [[e + p for e, p in zip(T["embed.W_E"][t], T["embed.W_pos"][i])] for i, t in enumerate(tokens)]
    xs = [x]
    for l in range(c.n_layers):
        g = lambda k: T[f"blocks.{l}.{k}"]
        h = [_ln(v, g("ln1.w"), g("ln1.b")) for v in x]
        q = [_matvec(v, g("attn.W_Q")) for v in h]
        k = [_matvec(v, g("attn.W_K")) for v in h]
        val = [_matvec(v, g("attn.W_V")) for v in h]
        a = []
        for i in range(n):
            z = [0.0] * c.d_model
            for hd in range(H):
                sl = slice(hd * dh, (hd + 1) * dh)
                scores = [sum(qq * kk for qq, kk in zip(q[i][sl], k[j][sl])) / math.sqrt(dh)
                          for j in range(i + 1)]
                top = max(scores)
                w = [math.exp(s - top) for s in scores]
                tot = sum(w)
                for j in range(i + 1):
                    for u in range(dh):
                        z[hd * dh + u] += w[j] / tot * val[j][sl][u]
            a.append(_matvec(z, g("attn.W_O")))
        m = []
        for i in range(n):
            u = x[i] if c.wiring is M.Wiring.PARALLEL else [p + q_ for p, q_ in zip(x[i], a[i])]
            hid = [_gelu(s + bb) for s, bb in zip(_matvec(_ln(u, g("ln2.w"), g("ln2.b")), g("mlp.W_in")),
                                                  g("mlp.b_in"))]
            m.append([s + bb for s, bb in zip(_matvec(hid, g("mlp.W_out")), g("mlp.b_out"))])
        x = [[p + q_ + r for p, q_, r in zip(x[i], a[i], m[i])] for i in range(n)]
        xs.append(x)
    return np.array(xs)


def _perturbed(params, seed):
    """Random non-trivial norms and offsets so the oracle exercises every term."""
    rng = np.random.default_rng(seed)
    t = OrderedDict()
    for k, v in params.tensors.items():
        v = np.array(v)
        t[k] = v + 0.1 * rng.standard_normal(v.shape) if k.endswith((".w", ".b", "b_in", "b_out")) else v
    return M.Parameters(params.config, t)


@pytest.mark.parametrize("wiring", ["parallel", "sequential"])
def test_trace_matches_straight_line_oracle(wiring):
    cfg = M.ModelConfig(d_model=8, n_layers=2, n_heads=2, d_head=4, d_mlp=16, vocab_size=12,
                        max_seq_len=8, wiring=wiring, seed=7)
    params = _perturbed(M.build_model(cfg), 1)
    tr = M.forward_trace(params, [3, 7])
    np.testing.assert_allclose(tr.x, oracle_trace(params, [3, 7]), atol=1e-6, rtol=0)


def test_oracle_frozen_values():
    # x^L at the last position from the scalar oracle, seed-7 model, tokens [3, 7]
    cfg = M.ModelConfig(d_model=8, n_layers=2, n_heads=2, d_head=4, d_mlp=16, vocab_size=12,
                        max_seq_len=8, seed=7)
    params = _perturbed(M.build_model(cfg), 1)
    frozen = [-0.62093956137, 0.18513505927, 0.00595287763, -0.42254508345,
              0.06576750053, -2.03713886090, 0.70850462922, -1.51045642536]
    np.testing.assert_allclose(M.forward_trace(params, [3, 7]).x[-1, -1], frozen, atol=1e-6)


# ---------------------------------------------------------------------------
# config and construction


def test_build_is_deterministic():
    a = M.build_model(small_config(seed=7))
    b = M.build_model(small_config(seed=7))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a.tensors)
    assert not np.array_equal(a["embed.W_E"], M.build_model(small_config(seed=8))["embed.W_E"])


def test_indivisible_heads_names_field():
    with pytest.raises(ConfigError) as exc:
        M.ModelConfig(d_model=8, n_heads=3, d_head=3)
    assert exc.value.field == "n_heads"


@pytest.mark.parametrize("field,value", [("d_model", 0), ("n_layers", 0), ("vocab_size", -1),
                                         ("max_seq_len", 1), ("d_mlp", 0)])
def test_bad_sizes_rejected(field, value):
    kw = dict(d_model=8, n_heads=2, d_head=4)
    kw[field] = value
    with pytest.raises(ConfigError) as exc:
        M.ModelConfig(**kw)
    assert exc.value.field == field


def test_wiring_from_string():
    assert M.ModelConfig(wiring="Sequential").wiring is M.Wiring.SEQUENTIAL
    with pytest.raises(ConfigError):
        M.ModelConfig(wiring="diagonal")


def test_shape_audit():
    cfg = small_config(d_model=32, n_layers=4, vocab_size=64, decoder_bias=True)
    params = M.build_model(cfg)
    d = 32
    expected = {"embed.W_E": (64, d), "embed.W_pos": (32, d), "ln_final.w": (d,), "ln_final.b": (d,),
                "unembed.W_U": (d, 64), "unembed.b_U": (64,)}
    for l in range(4):
        p = f"blocks.{l}."
        expected.update({p + "ln1.w": (d,), p + "ln1.b": (d,), p + "ln2.w": (d,), p + "ln2.b": (d,),
                         p + "attn.W_Q": (d, d), p + "attn.W_K": (d, d), p + "attn.W_V": (d, d),
                         p + "attn.W_O": (d, d), p + "mlp.W_in": (d, 64), p + "mlp.b_in": (64,),
                         p + "mlp.W_out": (64, d), p + "mlp.b_out": (d,)})
    assert {k: v.shape for k, v in params.tensors.items()} == expected
    assert all(np.all(np.isfinite(v)) for v in params.tensors.values())


def test_optional_tensors_follow_flags():
    params = M.build_model(small_config(final_layer_norm=False, decoder_bias=False))
    assert "ln_final.w" not in params.tensors and "unembed.b_U" not in params.tensors


def test_parameters_are_read_only(random_params):
    with pytest.raises(ValueError):
        random_params["embed.W_E"][0, 0] = 1.0
    with pytest.raises(TypeError):
        random_params.tensors["embed.W_E"] = None


def test_parameters_reject_bad_shape_and_nan(random_params):
    with pytest.raises(ConfigError):
        random_params.replace(embed__W_E=np.zeros((3, 3)))
    bad = np.array(random_params["embed.W_E"])
    bad[0, 0] = np.nan
    with pytest.raises(InputError):
        random_params.replace(embed__W_E=bad)


# ---------------------------------------------------------------------------
# forward_trace


def test_residual_identity(random_params):
    tr = M.forward_trace(random_params, [1, 5, 9, 2, 33, 63])
    for l in range(1, 5):
        assert np.max(np.abs(tr.x[l] - (tr.x[l - 1] + tr.a[l - 1] + tr.m[l - 1]))) <= 1e-6


def test_trace_shapes(random_params):
    tr = M.forward_trace(random_params, [1, 2, 3])
    assert tr.x.shape == (5, 3, 32) and tr.a.shape == (4, 3, 32) and tr.m.shape == (4, 3, 32)
    assert tr.logits.shape == (64,)
    np.testing.assert_array_equal(tr.x[0], random_params["embed.W_E"][[1, 2, 3]] + random_params["embed.W_pos"][:3])


def test_zero_sublayers_pass_embeddings_through():
    cfg = small_config(final_layer_norm=False)
    params = M.build_model(cfg)
    zeros = {f"blocks__{l}__{n}": np.zeros(params[f"blocks.{l}.{n.replace('__', '.')}"].shape)
             for l in range(4) for n in ("attn__W_O", "mlp__W_out")}
    params = params.replace(**zeros)
    tr = M.forward_trace(params, [4, 8, 15, 16])
    np.testing.assert_array_equal(tr.x[-1], tr.x[0])


def test_single_token_attention_reads_itself(random_params):
    a1 = M.forward_trace(random_params, [9]).a[:, 0]
    a2 = M.forward_trace(random_params, [9, 40, 2]).a[:, 0]
    np.testing.assert_allclose(a1, a2, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 63), min_size=1, max_size=12), st.integers(1, 12))
def test_causal_truncation(tokens, k):
    params = M.build_model(small_config())
    k = min(k, len(tokens))
    full = M.forward_trace(params, tokens)
    part = M.forward_trace(params, tokens[:k])
    assert np.max(np.abs(full.x[:, :k] - part.x)) <= 1e-6


def test_wirings_agree_without_mlp():
    traces = []
    for wiring in ("parallel", "sequential"):
        params = M.build_model(small_config(wiring=wiring))
        zeros = {f"blocks__{l}__mlp__{n}": np.zeros(params[f"blocks.{l}.mlp.{n}"].shape)
                 for l in range(4) for n in ("W_in", "b_in", "W_out", "b_out")}
        traces.append(M.forward_trace(params.replace(**zeros), [3, 1, 4, 1, 5]))
    np.testing.assert_array_equal(traces[0].x, traces[1].x)


def test_wirings_differ_with_mlp():
    a = M.forward_trace(M.build_model(small_config(wiring="parallel")), [3, 1, 4])
    b = M.forward_trace(M.build_model(small_config(wiring="sequential")), [3, 1, 4])
    assert not np.allclose(a.x[-1], b.x[-1])


def test_trace_is_deterministic(random_params):
    a = M.forward_trace(random_params, [5, 6, 7])
    b = M.forward_trace(random_params, [5, 6, 7])
    assert a.x.tobytes() == b.x.tobytes() and a.logits.tobytes() == b.logits.tobytes()


@pytest.mark.parametrize("tokens,match", [([0, 64], "out of range"), ([-1], "out of range"),
                                          (list(range(33)), "exceeds"), ([], "non-empty")])
def test_bad_tokens(random_params, tokens, match):
    with pytest.raises(InputError, match=match):
        M.forward_trace(random_params, tokens)


# ---------------------------------------------------------------------------
# prediction and decoding


def test_argmax_unique_and_tie():
    assert M.argmax_token(np.array([0.1, 3.0, -2.0])) == 1
    assert M.argmax_token(np.zeros(9)) == 0
    assert M.argmax_token(np.array([1.0, 2.0, 2.0])) == 1


def test_predict_next_matches_logits(random_params):
    tr = M.forward_trace(random_params, [7, 3, 22])
    assert M.predict_next(random_params, [7, 3, 22]) == int(np.argmax(tr.logits))


def test_batch_prediction_matches_single(random_params):
    prompts = [[1, 2, 3], [4, 5], [6, 7, 8], [9]]
    assert M.predict_next_batch(random_params, prompts) == [M.predict_next(random_params, p) for p in prompts]


def test_zero_state_decodes_uniform():
    params = M.build_model(small_config(final_layer_norm=False))
    np.testing.assert_allclose(M.decode_distribution(params, np.zeros(32)), np.full(64, 1 / 64), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=32, max_size=32))
def test_decode_is_a_distribution_with_logit_argmax(state):
    params = M.build_model(small_config())
    prob = M.decode_distribution(params, np.array(state))
    assert np.all((prob >= 0) & (prob <= 1))
    assert abs(prob.sum() - 1.0) <= 1e-6
    logits = M.decode_logits(params, np.array(state))
    # softmax can round near-tied logits to equal probabilities
    assert logits[np.argmax(prob)] >= logits.max() - 1e-12 * max(1.0, np.abs(logits).max())


def test_decode_final_state_agrees_with_predict(random_params):
    tokens = [11, 12, 13, 14]
    state = M.forward_trace(random_params, tokens).final_state
    assert int(np.argmax(M.decode_distribution(random_params, state))) == M.predict_next(random_params, tokens)


def test_decode_rejects_non_finite(random_params):
    with pytest.raises(InputError):
        M.decode_distribution(random_params, np.full(32, np.inf))
    with pytest.raises(InputError):
        M.decode_distribution(random_params, np.zeros(31))
