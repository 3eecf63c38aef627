import numpy as np
import pytest

from wpdistill import tensor as T
from wpdistill.errors import ConfigError, VocabularyError
from wpdistill.model import (ForwardTrace, ModelConfig, TransformerModel, expected_param_count, forward, init,
                             task_logits)
from wpdistill.tensor import Tensor, finite_diff_check


def small(seed=0, **kw):
    cfg = dict(layers=2, hidden=16, heads=2, vocab=32, max_seq=8, seed=seed)
    cfg.update(kw)
    return init(ModelConfig(**cfg), verbalizer=[3, 7])


def enumerate_count(cfg: ModelConfig) -> int:
    """Count parameters by listing each declared tensor shape by hand."""
    h, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    shapes = [(cfg.vocab, h), (cfg.max_seq, h), (h,), (h,)]
    for _ in range(cfg.layers):
        shapes += [(h,), (h,), (h, h), (h, h), (h, h), (h, h), (h,), (h,), (h, f), (f,), (f, h), (h,)]
    return sum(int(np.prod(s)) for s in shapes)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = small(5), small(5)
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_different_seed_differs(self):
        assert not np.array_equal(small(1).tok_emb.data, small(2).tok_emb.data)

    def test_embedding_shape(self):
        assert small().tok_emb.shape == (32, 16)

    @pytest.mark.parametrize("layers,hidden,heads,vocab", [(2, 16, 2, 32), (4, 64, 4, 256), (1, 8, 1, 5)])
    def test_parameter_count(self, layers, hidden, heads, vocab):
        cfg = ModelConfig(layers=layers, hidden=hidden, heads=heads, vocab=vocab, max_seq=8)
        model = init(cfg)
        assert model.num_parameters() == enumerate_count(cfg) == expected_param_count(cfg)

    def test_truncated_normal(self):
        w = init(ModelConfig(vocab=256, hidden=64, heads=4)).tok_emb.data
        assert np.abs(w).max() <= 0.04
        assert 0.012 < w.std() < 0.02

    @pytest.mark.parametrize("field,kw", [
        ("heads", dict(hidden=10, heads=3)),
        ("vocab", dict(vocab=3)),
        ("max_seq", dict(max_seq=1)),
        ("layers", dict(layers=0)),
        ("hidden", dict(hidden=-4)),
    ])
    def test_invalid_config_names_field(self, field, kw):
        with pytest.raises(ConfigError) as exc:
            init(ModelConfig(**kw))
        assert exc.value.field == field


class TestForward:
    def test_shape(self, rng):
        model = small()
        trace, logits = forward(model, rng.integers(0, 32, size=(2, 8)))
        assert logits.shape == (2, 8, 32)
        assert trace.attentions[0].shape == (2, 2, 8, 8)
        assert trace.queries[1].shape == (2, 2, 8, 8)
        assert trace.hidden_states[0].shape == (2, 8, 16)

    def test_zero_weights_give_uniform(self, rng):
        model = small()
        for k, p in model.params.items():
            if "gain" not in k:
                p.data[...] = 0.0
        _, logits = forward(model, rng.integers(0, 32, size=(2, 8)))
        probs = T.softmax(logits).data
        np.testing.assert_allclose(probs, 1.0 / 32, atol=1e-15)

    def test_hand_one_layer(self):
        """h=2, v=2: attention and FFN contribute nothing, so f_t is the normalized embedding sum."""
        model = init(ModelConfig(layers=1, hidden=2, heads=1, vocab=4, max_seq=2, ffn_mult=1))
        P = model.params
        for k, p in P.items():
            if "gain" not in k:
                p.data[...] = 0.0
        P["tok_emb"].data[:] = [[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [0.5, 0.5]]
        P["pos_emb"].data[:] = [[0.0, 1.0], [1.0, 0.0]]
        _, logits = forward(model, np.array([[2, 0]]))
        e = np.array([[3.0, 2.0], [2.0, 0.0]])
        ft = (e - e.mean(1, keepdims=True)) / np.sqrt(e.var(1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(logits.data[0], ft @ P["tok_emb"].data.T, atol=1e-14)

    def test_weight_tying(self, rng):
        model = small()
        x = rng.integers(0, 32, size=(1, 8))
        trace0, logits0 = forward(model, x)
        model.tok_emb.data[x[0, 0]] += 0.5
        trace1, logits1 = forward(model, x)
        assert not np.allclose(trace0.emb.data, trace1.emb.data)
        unused = [i for i in range(32) if i not in x]
        assert unused
        # the decoder column of a token absent from the input still moves with W_v
        model.tok_emb.data[unused[0]] += rng.normal(size=16)
        _, logits2 = forward(model, x)
        assert not np.allclose(logits1.data[..., unused[0]], logits2.data[..., unused[0]])
        np.testing.assert_array_equal(np.delete(logits1.data, unused[0], -1), np.delete(logits2.data, unused[0], -1))

    def test_pad_tokens_never_influence_non_pad(self, rng):
        model = small()
        x = rng.integers(4, 32, size=(2, 8))
        pad = np.zeros((2, 8), dtype=bool)
        pad[:, 5:] = True
        _, a = forward(model, x, pad)
        x2 = x.copy()
        x2[:, 5:] = rng.integers(0, 32, size=(2, 3))
        _, b = forward(model, x2, pad)
        assert a.data[:, :5].tobytes() == b.data[:, :5].tobytes()

    def test_attention_rows_are_distributions(self, rng):
        model = small()
        pad = np.zeros((2, 8), dtype=bool)
        pad[1, 3:] = True
        trace, _ = forward(model, rng.integers(0, 32, size=(2, 8)), pad)
        for att in trace.attentions:
            np.testing.assert_allclose(att.data.sum(-1), 1.0, atol=1e-9)
            assert att.data[1, :, :, 3:].max() < 1e-300

    def test_deterministic(self, rng):
        model, x = small(), rng.integers(0, 32, size=(3, 8))
        assert forward(model, x)[1].data.tobytes() == forward(model, x)[1].data.tobytes()

    def test_out_of_range_id_reports_position(self):
        x = np.zeros((2, 4), dtype=np.int64)
        x[1, 2] = 40
        with pytest.raises(VocabularyError, match=r"\(1, 2\)"):
            forward(small(), x)

    def test_too_long(self):
        with pytest.raises(ConfigError):
            forward(small(), np.zeros((1, 9), dtype=np.int64))

    def test_feature_lookup(self, rng):
        trace, _ = forward(small(), rng.integers(0, 32, size=(1, 8)))
        assert trace.feature("HS2") is trace.hidden_states[1]
        assert trace.feature("Emb") is trace.emb
        assert trace.feature_names()[:3] == ["Emb", "HS1", "Att1"]
        with pytest.raises(KeyError):
            trace.feature("HS3")

    def test_parameter_gradients(self, rng):
        model = small(hidden=8, heads=2, vocab=12, layers=1, max_seq=4)
        x = rng.integers(0, 12, size=(2, 4))
        pad = np.array([[0, 0, 0, 1], [0, 0, 0, 0]], dtype=bool)
        w = Tensor(rng.normal(size=(2, 4, 12)))
        params = model.parameters()

        def f(_):
            return (T.log_softmax(forward(model, x, pad)[1]) * w).sum()

        assert finite_diff_check(f, params) <= 1e-5


class TestTaskLogits:
    def test_shape(self, rng):
        model = small()
        trace, _ = forward(model, rng.integers(0, 32, size=(3, 8)))
        assert task_logits(model, trace, [1, 2, 7]).shape == (3, 2)

    def test_gather_oracle(self, rng):
        model = small()
        trace, logits = forward(model, rng.integers(0, 32, size=(3, 8)))
        blanks = [1, 2, 7]
        fl = task_logits(model, trace, blanks).data
        oracle = np.array([[logits.data[b, blanks[b], v] for v in (3, 7)] for b in range(3)])
        np.testing.assert_array_equal(fl, oracle)

    def test_uniform_logits_tie(self, rng):
        model = small()
        for k, p in model.params.items():
            if "gain" not in k:
                p.data[...] = 0.0
        trace, _ = forward(model, rng.integers(0, 32, size=(2, 8)))
        fl = task_logits(model, trace, [0, 0]).data
        assert np.all(fl == fl[:, :1])

    def test_bad_verbalizer(self):
        with pytest.raises(ConfigError):
            small().set_verbalizer([3, 99])

    def test_bad_blank(self, rng):
        model = small()
        trace, _ = forward(model, rng.integers(0, 32, size=(1, 8)))
        with pytest.raises(ConfigError):
            task_logits(model, trace, [8])


def test_clone_is_independent():
    a = small()
    b = a.clone()
    b.tok_emb.data[0, 0] += 1.0
    assert a.tok_emb.data[0, 0] != b.tok_emb.data[0, 0]
    assert isinstance(b, TransformerModel) and b.verbalizer == [3, 7]
