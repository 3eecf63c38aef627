"""Toy masked-language transformer with a tied vocabulary decoder.

The LM head multiplies the final hidden states by the transposed
embedding matrix, so the same ``tok_emb`` tensor feeds both the input
lookup and the per-position word-prediction logits. Task logits are read
off those word-prediction logits at a blank position, restricted to the
verbalizer tokens.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, VocabularyError
from .tensor import Tensor

LN_EPS = 1e-5
MASK_FILL = -1e9
INIT_STD = 0.02


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 32
    heads: int = 2
    vocab: int = 256
    max_seq: int = 64
    ffn_mult: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("layers", "hidden", "heads", "vocab", "max_seq", "ffn_mult"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        if self.hidden % self.heads:
            raise ConfigError("heads", f"{self.heads} does not divide hidden={self.hidden}")
        if self.vocab < 4:
            raise ConfigError("vocab", "must be at least 4 to hold the special tokens")
        if self.max_seq < 2:
            raise ConfigError("max_seq", "must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def expected_param_count(cfg: ModelConfig) -> int:
    h, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    per_layer = 4 * h * h + (h * f + f) + (f * h + h) + 4 * h
    return cfg.vocab * h + cfg.max_seq * h + cfg.layers * per_layer + 2 * h


@dataclass
class ForwardTrace:
    emb: Tensor
    hidden_states: list[Tensor]
    attentions: list[Tensor]
    queries: list[Tensor]
    keys: list[Tensor]
    values: list[Tensor]
    final: Tensor
    lm_logits: Tensor
    pad_mask: np.ndarray

    def feature(self, name: str) -> Tensor:
        """Look up a feature by its display name (Emb, HS1, Att1, Q1, K1, V1, ...)."""
        if name == "Emb":
            return self.emb
        for prefix, series in (("HS", self.hidden_states), ("Att", self.attentions),
                               ("Q", self.queries), ("K", self.keys), ("V", self.values)):
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                idx = int(name[len(prefix):]) - 1
                if 0 <= idx < len(series):
                    return series[idx]
        raise KeyError(f"unknown feature {name!r}")

    def feature_names(self) -> list[str]:
        names = ["Emb"]
        for i in range(1, len(self.hidden_states) + 1):
            names += [f"HS{i}", f"Att{i}", f"Q{i}", f"K{i}", f"V{i}"]
        return names


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], verbalizer=()):
        self.config = config
        self.params = params
        self.verbalizer = [int(v) for v in verbalizer]
        self._check_verbalizer()

    def _check_verbalizer(self) -> None:
        for tok in self.verbalizer:
            if not 0 <= tok < self.config.vocab:
                raise ConfigError("verbalizer", f"token id {tok} outside vocabulary of {self.config.vocab}")

    @property
    def tok_emb(self) -> Tensor:
        return self.params["tok_emb"]

    def set_verbalizer(self, ids) -> None:
        self.verbalizer = [int(v) for v in ids]
        self._check_verbalizer()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "TransformerModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def clone(self) -> "TransformerModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return TransformerModel(copy.deepcopy(self.config), params, list(self.verbalizer))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init(config: ModelConfig, verbalizer=()) -> TransformerModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, f = config.hidden, config.ffn_mult * config.hidden
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = T.parameter(_trunc_normal(rng, shape, INIT_STD))

    def const(name, shape, value):
        params[name] = T.parameter(np.full(shape, value))

    normal("tok_emb", (config.vocab, h))
    normal("pos_emb", (config.max_seq, h))
    for i in range(config.layers):
        p = f"layers.{i}."
        const(p + "ln1.gain", (h,), 1.0)
        const(p + "ln1.bias", (h,), 0.0)
        for w in ("wq", "wk", "wv", "wo"):
            normal(p + "attn." + w, (h, h))
        const(p + "ln2.gain", (h,), 1.0)
        const(p + "ln2.bias", (h,), 0.0)
        normal(p + "ffn.w1", (h, f))
        const(p + "ffn.b1", (f,), 0.0)
        normal(p + "ffn.w2", (f, h))
        const(p + "ffn.b2", (h,), 0.0)
    const("ln_f.gain", (h,), 1.0)
    const("ln_f.bias", (h,), 0.0)
    return TransformerModel(config, params, verbalizer)


def _split_heads(x: Tensor, B: int, L: int, H: int, d: int) -> Tensor:
    return x.reshape(B, L, H, d).transpose(0, 2, 1, 3)


def forward(model: TransformerModel, x, pad_mask=None) -> tuple[ForwardTrace, Tensor]:
    """Run the transformer on token ids ``x`` (B x l).

    ``pad_mask`` is a boolean B x l array, True at padding. Padded key
    positions receive an additive -1e9 before the attention softmax.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x[None, :]
    B, L = x.shape
    if L > cfg.max_seq:
        raise ConfigError("max_seq", f"sequence length {L} exceeds max_seq={cfg.max_seq}")
    bad = np.argwhere((x < 0) | (x >= cfg.vocab))
    if len(bad):
        b, pos = bad[0]
        raise VocabularyError(f"token id {x[b, pos]} at position ({b}, {pos}) outside vocabulary of {cfg.vocab}")
    if pad_mask is None:
        pad_mask = np.zeros((B, L), dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)

    P = model.params
    H, d = cfg.heads, cfg.head_dim
    emb = T.take_rows(P["tok_emb"], x) + P["pos_emb"][:L]
    attn_bias = Tensor(np.where(pad_mask, MASK_FILL, 0.0)[:, None, None, :])
    scale = 1.0 / math.sqrt(d)

    hs, atts, qs, ks, vs = [], [], [], [], []
    h = emb
    for i in range(cfg.layers):
        p = f"layers.{i}."
        a = T.layer_norm(h, P[p + "ln1.gain"], P[p + "ln1.bias"], LN_EPS)
        q = _split_heads(a @ P[p + "attn.wq"], B, L, H, d)
        k = _split_heads(a @ P[p + "attn.wk"], B, L, H, d)
        v = _split_heads(a @ P[p + "attn.wv"], B, L, H, d)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + attn_bias
        att = T.softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.hidden)
        h = h + ctx @ P[p + "attn.wo"]
        f = T.layer_norm(h, P[p + "ln2.gain"], P[p + "ln2.bias"], LN_EPS)
        f = T.gelu(f @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        h = h + f
        hs.append(h)
        atts.append(att)
        qs.append(q)
        ks.append(k)
        vs.append(v)

    final = T.layer_norm(h, P["ln_f.gain"], P["ln_f.bias"], LN_EPS)
    logits = final @ P["tok_emb"].T
    trace = ForwardTrace(emb, hs, atts, qs, ks, vs, final, logits, pad_mask)
    return trace, logits


def task_logits(model: TransformerModel, trace: ForwardTrace, blank_positions) -> Tensor:
    """Gather the word-prediction logits at each blank, restricted to verbalizer tokens."""
    if not model.verbalizer:
        raise ConfigError("verbalizer", "empty verbalizer")
    model._check_verbalizer()
    logits = trace.lm_logits
    B, L, _ = logits.shape
    blanks = np.asarray(blank_positions, dtype=np.int64).reshape(-1)
    if blanks.shape[0] != B:
        raise ConfigError("blank_position", f"expected {B} blank positions, got {blanks.shape[0]}")
    if ((blanks < 0) | (blanks >= L)).any():
        raise ConfigError("blank_position", f"blank positions {blanks.tolist()} outside length {L}")
    verb = np.asarray(model.verbalizer, dtype=np.int64)
    return logits[np.arange(B)[:, None], blanks[:, None], verb[None, :]]
