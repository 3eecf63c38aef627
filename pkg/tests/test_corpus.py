from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpdistill.corpus import (CLS_MASKED, CLS_PAD, CLS_UNMASKED, DEFAULT_TEMPLATE, MASK, NO_TARGET, PAD, UNK,
                              TaskExample, Vocabulary, build_vocab, make_mlm_batches, make_task_batches,
                              mask_task_batch, read_task_file, render_task, render_task_batch, tokenize,
                              write_task_file)
from wpdistill.errors import ConfigError, InputError, LabelError
from wpdistill.synth import ZipfLanguage, corpus_of_size, zipf_corpus


@pytest.fixture(scope="module")
def zipf_docs():
    return zipf_corpus(60, ZipfLanguage.create(n_types=120, seed=3), seed=4)


def task_vocab():
    return build_vocab(["the cat sat on the mat", "a dog ran"], 32, ["yes", "no", ":"])


class TestBuildVocab:
    def test_counting(self):
        vocab = build_vocab(["a a b"], 5)
        assert len(vocab) == 5
        assert vocab.freq[vocab.id_of("a")] == 2
        assert vocab.freq[vocab.id_of("b")] == 1

    def test_unseen_is_unk(self):
        assert build_vocab(["a a b"], 5).id_of("zebra") == build_vocab(["a a b"], 5).unk_id

    def test_lowercases(self):
        vocab = build_vocab(["A a B"], 5)
        assert vocab.freq[vocab.id_of("a")] == 2 and vocab.encode("B") == [vocab.id_of("b")]

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            build_vocab(["", "   "], 10)

    def test_specials_first_and_dense(self):
        vocab = build_vocab(["x y z"], 8, ["yes"])
        assert vocab.tokens[:4] == [PAD, MASK, UNK, "yes"]
        assert sorted(vocab.index.values()) == list(range(len(vocab)))

    def test_freq_matches_independent_counter(self, zipf_docs):
        vocab = build_vocab(zipf_docs, 64)
        counts = Counter(t for d in zipf_docs for t in d.lower().split())
        kept = set(vocab.tokens)
        for tok, i in vocab.index.items():
            if tok not in (PAD, MASK, UNK):
                assert vocab.freq[i] == counts[tok]
        assert vocab.freq[vocab.unk_id] == sum(n for t, n in counts.items() if t not in kept)
        assert sum(vocab.freq) == sum(counts.values())
        ordinary = [counts[t] for t in vocab.tokens[3:]]
        assert ordinary == sorted(ordinary, reverse=True)
        assert min(ordinary) >= max(n for t, n in counts.items() if t not in kept)

    def test_roundtrip_file(self, tmp_path, zipf_docs):
        vocab = build_vocab(zipf_docs, 40)
        vocab.save(tmp_path / "v.txt")
        again = Vocabulary.load(tmp_path / "v.txt")
        assert again.tokens == vocab.tokens and again.freq == vocab.freq
        first = (tmp_path / "v.txt").read_text().splitlines()[0]
        assert first == f"{PAD}\t0"

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["ab", "cd", "ef", "gh", "ij"]), min_size=1, max_size=40))
    def test_encode_decode_identity(self, words):
        vocab = build_vocab([" ".join(words)], 20)
        ids = vocab.encode(words)
        assert vocab.unk_id not in ids
        assert vocab.decode(ids) == words


class TestMLMBatches:
    def test_tiny_mask_rate_masks_nothing(self, zipf_docs):
        vocab = build_vocab(zipf_docs, 64)
        for batch in make_mlm_batches(vocab, zipf_docs, 16, 8, mask_rate=1e-12):
            assert not (batch.classes == CLS_MASKED).any()
            assert np.array_equal(batch.classes == CLS_UNMASKED, batch.x != vocab.pad_id)

    def test_short_sequence_padded_never_masked(self):
        vocab = build_vocab(["a b c"], 8)
        batch = next(make_mlm_batches(vocab, ["a b c"], 8, 1, mask_rate=0.99, seed=0))
        assert (batch.classes[0, 3:] == CLS_PAD).all()
        assert (batch.x[0, 3:] == vocab.pad_id).all()
        assert (batch.targets[0, 3:] == NO_TARGET).all()

    def test_masked_fraction_binomial(self):
        lang = ZipfLanguage.create(seed=2)
        docs = corpus_of_size(60_000, lang, seed=5)
        vocab = build_vocab(docs, 256)
        n = masked = 0
        for batch in make_mlm_batches(vocab, docs, 64, 16, mask_rate=0.15, seed=9):
            n += int((batch.classes != CLS_PAD).sum())
            masked += int((batch.classes == CLS_MASKED).sum())
        sigma = np.sqrt(0.15 * 0.85 / n)
        assert abs(masked / n - 0.15) <= 3 * sigma

    def test_invariants(self, zipf_docs):
        vocab = build_vocab(zipf_docs, 64)
        for batch in make_mlm_batches(vocab, zipf_docs, 16, 8, seed=1):
            batch.validate(vocab.mask_id)
            assert not ((batch.classes == CLS_MASKED) & (batch.x == vocab.pad_id)).any()
            masked = batch.classes == CLS_MASKED
            assert (batch.targets[masked] != vocab.mask_id).all()

    def test_deterministic(self, zipf_docs):
        vocab = build_vocab(zipf_docs, 64)
        a = list(make_mlm_batches(vocab, zipf_docs, 16, 8, seed=4))
        b = list(make_mlm_batches(vocab, zipf_docs, 16, 8, seed=4))
        assert all(x.x.tobytes() == y.x.tobytes() and x.classes.tobytes() == y.classes.tobytes()
                   for x, y in zip(a, b))

    def test_l_over_max_seq(self, zipf_docs):
        with pytest.raises(ConfigError):
            next(make_mlm_batches(build_vocab(zipf_docs, 64), zipf_docs, 16, 4, max_seq=8))

    @pytest.mark.parametrize("rate", [0.0, 1.0, -0.1])
    def test_mask_rate_bounds(self, zipf_docs, rate):
        with pytest.raises(ConfigError):
            next(make_mlm_batches(build_vocab(zipf_docs, 64), zipf_docs, 16, 4, mask_rate=rate))

    def test_repeat_cycles(self):
        vocab = build_vocab(["a b c"], 8)
        stream = make_mlm_batches(vocab, ["a b c", "b c"], 4, 2, repeat=True)
        assert len([next(stream) for _ in range(5)]) == 5


class TestRenderTask:
    def test_two_token_text(self):
        vocab = task_vocab()
        b = render_task(TaskExample(["the", "cat"], 1), DEFAULT_TEMPLATE, vocab, 8, [3, 4])
        assert b.blank_position.tolist() == [3]
        assert b.x[0, 3] == vocab.mask_id
        assert b.x[0, :3].tolist() == [vocab.id_of("the"), vocab.id_of("cat"), vocab.id_of(":")]
        assert (b.classes[0, 4:] == CLS_PAD).all()
        assert b.targets[0, 3] == 4 and b.labels.tolist() == [1]

    def test_empty_text(self):
        b = render_task(TaskExample([], 0), DEFAULT_TEMPLATE, task_vocab(), 8, [3, 4])
        assert b.blank_position.tolist() == [1]

    def test_truncates_text_not_blank(self):
        vocab = task_vocab()
        b = render_task(TaskExample("the cat sat on the mat".split(), 0), DEFAULT_TEMPLATE, vocab, 4, [3, 4])
        assert b.blank_position.tolist() == [3]
        assert vocab.decode(b.x[0, :2]) == ["the", "cat"]

    def test_hand_layout_batch(self):
        vocab = task_vocab()
        texts = [["the"], [], ["a", "dog", "ran"], ["cat", "sat"]]
        b = render_task_batch([TaskExample(t, i % 2) for i, t in enumerate(texts)], DEFAULT_TEMPLATE, vocab, 6,
                              [3, 4])
        P, M, U = CLS_PAD, CLS_MASKED, CLS_UNMASKED
        expected = [[U, U, M, P, P, P],
                    [U, M, P, P, P, P],
                    [U, U, U, U, M, P],
                    [U, U, U, M, P, P]]
        assert b.classes.tolist() == expected
        assert b.blank_position.tolist() == [2, 1, 4, 3]
        b.validate(vocab.mask_id)

    def test_bad_label(self):
        with pytest.raises(LabelError):
            render_task(TaskExample(["a"], 2), DEFAULT_TEMPLATE, task_vocab(), 8, [3, 4])

    def test_template_needs_one_blank(self):
        with pytest.raises(ConfigError):
            render_task(TaskExample(["a"], 0), "[x] [MASK] [MASK]", task_vocab(), 8, [3, 4])

    def test_mask_task_batch_keeps_blank(self, rng):
        vocab = task_vocab()
        b = render_task_batch([TaskExample("the cat sat on".split(), 0)] * 8, DEFAULT_TEMPLATE, vocab, 8, [3, 4])
        m = mask_task_batch(b, vocab.mask_id, 0.5, rng)
        assert (m.classes[np.arange(8), m.blank_position] == CLS_MASKED).all()
        assert (m.targets[np.arange(8), m.blank_position] == 3).all()
        m.validate(vocab.mask_id)
        assert (m.classes == CLS_MASKED).sum() > 8

    def test_task_batches_cover_examples(self):
        vocab = task_vocab()
        exs = [TaskExample(["the"], i % 2) for i in range(7)]
        batches = list(make_task_batches(exs, DEFAULT_TEMPLATE, vocab, 6, [3, 4], B=3, seed=0))
        assert [len(b.labels) for b in batches] == [3, 3, 1]
        assert sorted(np.concatenate([b.labels for b in batches]).tolist()) == sorted(e.label for e in exs)


def test_task_file_roundtrip(tmp_path):
    exs = [TaskExample(["a", "b"], 0), TaskExample(["c"], 1)]
    write_task_file(tmp_path / "t.tsv", exs)
    assert read_task_file(tmp_path / "t.tsv") == exs


def test_task_file_bad_line(tmp_path):
    (tmp_path / "t.tsv").write_text("no tab here\n")
    with pytest.raises(InputError):
        read_task_file(tmp_path / "t.tsv")


def test_tokenize():
    assert tokenize("  Hello   World\t") == ["hello", "world"]
