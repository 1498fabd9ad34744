"""A small pre-norm decoder-only transformer in float64 numpy.

Every layer adds an attention output ``a`` and an MLP output ``m`` to the
residual stream, ``x[l] = x[l-1] + a[l] + m[l]``.  With ``Wiring.PARALLEL``
the MLP reads the normalised ``x[l-1]`` (GPT-J style); with
``Wiring.SEQUENTIAL`` it reads the normalised ``x[l-1] + a[l]`` (Llama style).

The block code is written against :mod:`lrelab.diff.functional`, so the same
functions run on plain arrays, on tangent-carrying values and on taped values.
"""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from lrelab.diff import functional as F
from lrelab.exceptions import ConfigError, InputError

_NEG_INF = -1e30


class Wiring(str, enum.Enum):
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_head: int = 16
    d_mlp: int = 256
    vocab_size: int = 512
    max_seq_len: int = 40
    wiring: Wiring = Wiring.PARALLEL
    final_layer_norm: bool = True
    decoder_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "wiring", _coerce_wiring(self.wiring))
        for f in ("d_model", "n_layers", "n_heads", "d_head", "d_mlp", "vocab_size", "max_seq_len"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f, f"must be a positive integer, got {v!r}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len", "must be at least 2")
        if self.d_model % self.n_heads:
            raise ConfigError(
                "n_heads", f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                "d_head", f"n_heads*d_head = {self.n_heads * self.d_head} != d_model={self.d_model}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError("seed", f"must be an unsigned integer, got {self.seed!r}")

    def to_dict(self):
        d = asdict(self)
        d["wiring"] = self.wiring.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)


def _coerce_wiring(w):
    if isinstance(w, Wiring):
        return w
    try:
        return Wiring(str(w).lower())
    except ValueError:
        raise ConfigError("wiring", f"expected 'parallel' or 'sequential', got {w!r}") from None


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Tensor names and shapes in the fixed order used for checkpoints."""
    c = config
    d = c.d_model
    shapes = OrderedDict()
    shapes["embed.W_E"] = (c.vocab_size, d)
    shapes["embed.W_pos"] = (c.max_seq_len, d)
    for l in range(c.n_layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.w"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[p + "attn." + name] = (d, d)
        shapes[p + "ln2.w"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.W_in"] = (d, c.d_mlp)
        shapes[p + "mlp.b_in"] = (c.d_mlp,)
        shapes[p + "mlp.W_out"] = (c.d_mlp, d)
        shapes[p + "mlp.b_out"] = (d,)
    if c.final_layer_norm:
        shapes["ln_final.w"] = (d,)
        shapes["ln_final.b"] = (d,)
    shapes["unembed.W_U"] = (d, c.vocab_size)
    if c.decoder_bias:
        shapes["unembed.b_U"] = (c.vocab_size,)
    return shapes


@dataclass(frozen=True)
class Parameters:
    """Immutable model weights.

    ``tensors`` maps the names from :func:`param_shapes` to read-only arrays.
    Use :meth:`replace` to derive modified copies.
    """

    config: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigError("tensors", f"missing {sorted(missing)}, unexpected {sorted(extra)}")
        frozen = OrderedDict()
        for name, shape in expected.items():
            t = self.tensors[name]
            if isinstance(t, np.ndarray) or np.isscalar(t) or isinstance(t, (list, tuple)):
                t = np.array(t, dtype=np.float64)
                if t.shape != shape:
                    raise ConfigError(name, f"shape {t.shape} != expected {shape}")
                if not np.all(np.isfinite(t)):
                    raise InputError(f"{name}: non-finite entries")
                t.flags.writeable = False
            elif tuple(t.shape) != shape:  # traced values used while differentiating
                raise ConfigError(name, f"shape {tuple(t.shape)} != expected {shape}")
            frozen[name] = t
        object.__setattr__(self, "tensors", MappingProxyType(frozen))

    def __getitem__(self, name):
        return self.tensors[name]

    def __reduce__(self):
        return Parameters, (self.config, OrderedDict(self.tensors))

    def replace(self, **updates):
        """Copy with some tensors swapped; keys use ``__`` in place of ``.``."""
        tensors = OrderedDict(self.tensors)
        for key, val in updates.items():
            name = key.replace("__", ".")
            if name not in tensors:
                raise KeyError(name)
            tensors[name] = val
        return Parameters(self.config, tensors)

    def with_tensors(self, tensors):
        return Parameters(self.config, OrderedDict((k, tensors[k]) for k in self.tensors))

    def layer(self, l):
        p = f"blocks.{l}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def equals(self, other) -> bool:
        return self.config == other.config and all(
            np.array_equal(a, other.tensors[k]) for k, a in self.tensors.items())


@dataclass(frozen=True)
class ActivationTrace:
    """Residual states ``x`` (L+1, n, d), sublayer outputs ``a``/``m`` (L, n, d)."""

    tokens: tuple
    x: np.ndarray
    a: np.ndarray
    m: np.ndarray
    logits: np.ndarray

    @property
    def final_state(self):
        return self.x[-1, -1]


def build_model(config: ModelConfig) -> Parameters:
    """Deterministic scaled-Gaussian initialisation from ``config.seed``."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("config", f"expected ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    tensors = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            t = np.ones(shape)
        elif leaf in ("b", "b_in", "b_out", "b_U"):
            t = np.zeros(shape)
        elif leaf in ("W_E", "W_pos"):
            t = rng.standard_normal(shape) / np.sqrt(d)
        elif leaf in ("W_O", "W_out"):
            t = rng.standard_normal(shape) / np.sqrt(shape[0]) * out_scale
        else:
            t = rng.standard_normal(shape) / np.sqrt(shape[0])
        tensors[name] = t
    return Parameters(config, tensors)


# ----------------------------------------------------------------------------
# generic building blocks (arrays, Dual or Var)


def _split_heads(t, n_heads):
    shape = t.shape
    t = t.reshape(shape[:-1] + (n_heads, shape[-1] // n_heads))
    return t.swapaxes(-2, -3)  # (..., H, n, dh)


def _merge_heads(t):
    t = t.swapaxes(-2, -3)  # (..., n, H, dh)
    shape = t.shape
    return t.reshape(shape[:-2] + (shape[-2] * shape[-1],))


def attention_kv(params, l, x):
    """Keys and values (H, n, dh) for layer ``l`` given its input ``x``."""
    lp = params.layer(l)
    h = F.layer_norm(x, lp["ln1.w"], lp["ln1.b"])
    H = params.config.n_heads
    return _split_heads(h @ lp["attn.W_K"], H), _split_heads(h @ lp["attn.W_V"], H)


def attention(params, l, x, past=None):
    """Causal multi-head attention output of layer ``l`` for positions in ``x``.

    ``past`` optionally holds keys and values of earlier positions that are
    not part of ``x``; queries in ``x`` attend to them and to ``x`` causally.
    """
    lp = params.layer(l)
    H = params.config.n_heads
    dh = params.config.d_head
    h = F.layer_norm(x, lp["ln1.w"], lp["ln1.b"])
    q = _split_heads(h @ lp["attn.W_Q"], H)
    k = _split_heads(h @ lp["attn.W_K"], H)
    v = _split_heads(h @ lp["attn.W_V"], H)
    n_q = x.shape[-2]
    n_past = 0
    if past is not None:
        k_past, v_past = past
        n_past = k_past.shape[-2]
        batch = q.shape[:-3]
        k = F.concatenate([np.broadcast_to(k_past, batch + k_past.shape), k], axis=-2)
        v = F.concatenate([np.broadcast_to(v_past, batch + v_past.shape), v], axis=-2)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    rows = np.arange(n_q)[:, None] + n_past
    cols = np.arange(n_past + n_q)[None, :]
    scores = scores + np.where(cols <= rows, 0.0, _NEG_INF)
    z = F.softmax(scores, axis=-1) @ v
    return _merge_heads(z) @ lp["attn.W_O"]


def mlp(params, l, u):
    lp = params.layer(l)
    h = F.layer_norm(u, lp["ln2.w"], lp["ln2.b"])
    return F.gelu(h @ lp["mlp.W_in"] + lp["mlp.b_in"]) @ lp["mlp.W_out"] + lp["mlp.b_out"]


def block(params, l, x, past=None):
    """One layer: returns ``(x_next, a, m)``."""
    a = attention(params, l, x, past)
    if params.config.wiring is Wiring.PARALLEL:
        m = mlp(params, l, x)
    else:
        m = mlp(params, l, x + a)
    return x + a + m, a, m


def embed(params, tokens):
    tokens = np.asarray(tokens)
    return params["embed.W_E"][tokens] + params["embed.W_pos"][: tokens.shape[-1]]


def unembed(params, x):
    """Decoder logits: optional final norm, then the linear head."""
    c = params.config
    if c.final_layer_norm:
        x = F.layer_norm(x, params["ln_final.w"], params["ln_final.b"])
    logits = x @ params["unembed.W_U"]
    if c.decoder_bias:
        logits = logits + params["unembed.b_U"]
    return logits


def lm_logits(params, tokens):
    """Logits at every position for a batch of equal-length sequences."""
    x = embed(params, tokens)
    for l in range(params.config.n_layers):
        x, _, _ = block(params, l, x)
    return unembed(params, x)


# ----------------------------------------------------------------------------
# public operations


def check_tokens(params: Parameters, tokens: Sequence[int]) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 1 or t.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if not np.issubdtype(t.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {t.dtype}")
    c = params.config
    if t.size > c.max_seq_len:
        raise InputError(f"sequence length {t.size} exceeds max_seq_len={c.max_seq_len}")
    bad = (t < 0) | (t >= c.vocab_size)
    if bad.any():
        raise InputError(f"token id {int(t[bad][0])} out of range [0, {c.vocab_size})")
    return t.astype(np.int64)


def forward_trace(params: Parameters, tokens: Sequence[int]) -> ActivationTrace:
    t = check_tokens(params, tokens)
    x = embed(params, t)
    xs, As, Ms = [x], [], []
    for l in range(params.config.n_layers):
        x, a, m = block(params, l, x)
        xs.append(x)
        As.append(a)
        Ms.append(m)
    d = params.config.d_model
    empty = np.zeros((0, t.size, d))
    return ActivationTrace(
        tokens=tuple(int(i) for i in t),
        x=np.stack(xs),
        a=np.stack(As) if As else empty,
        m=np.stack(Ms) if Ms else empty,
        logits=unembed(params, x[-1]),
    )


def argmax_token(logits) -> int:
    # np.argmax returns the first maximum, i.e. the smallest token id on ties
    return int(np.argmax(logits))


def predict_next(params: Parameters, tokens: Sequence[int]) -> int:
    return argmax_token(forward_trace(params, tokens).logits)


def predict_next_batch(params: Parameters, prompts) -> list:
    """Next-token predictions for many prompts, batching equal lengths together."""
    prompts = [check_tokens(params, t) for t in prompts]
    out = [0] * len(prompts)
    by_len = {}
    for i, t in enumerate(prompts):
        by_len.setdefault(t.size, []).append(i)
    for idx in by_len.values():
        logits = lm_logits(params, np.stack([prompts[i] for i in idx]))[:, -1]
        for i, row in zip(idx, logits):
            out[i] = argmax_token(row)
    return out


def decode_logits(params: Parameters, state) -> np.ndarray:
    """Logits for one or more residual states of shape (..., d)."""
    s = np.asarray(state, dtype=np.float64)
    if s.shape[-1:] != (params.config.d_model,):
        raise InputError(f"state must end in dimension {params.config.d_model}, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InputError("state contains non-finite values")
    return unembed(params, s)


def decode_distribution(params: Parameters, state) -> np.ndarray:
    logits = decode_logits(params, state)
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def decode_argmax(params: Parameters, state):
    logits = decode_logits(params, state)
    if logits.ndim == 1:
        return argmax_token(logits)
    return np.argmax(logits, axis=-1)

