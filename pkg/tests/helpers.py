"""Small shared fixtures for pipeline-level tests."""

from __future__ import annotations

from functools import lru_cache

from wpdistill.corpus import DEFAULT_TEMPLATE, build_vocab, template_literals
from wpdistill.model import ModelConfig
from wpdistill.pipeline import DataBundle, StageSpec, TEACHER_PRETRAIN, train_teacher
from wpdistill.synth import VERBALIZER_WORDS, ZipfLanguage, cloze_task, corpus_of_size, cue_sets

SEQ = 16


@lru_cache(maxsize=None)
def tiny_data(seed: int = 0) -> DataBundle:
    lang = ZipfLanguage.create(n_types=80, seed=seed)
    corpus = corpus_of_size(6_000, lang, seed=seed + 1, min_len=8, max_len=20)
    valid = corpus_of_size(1_500, lang, seed=seed + 2, min_len=8, max_len=20)
    cues = cue_sets((4, 20), 3, seed=seed)
    train = cloze_task(48, lang, cues, text_len=(3, 8), seed=seed + 3)
    evals = cloze_task(24, lang, cues, text_len=(3, 8), seed=seed + 4)
    vocab = build_vocab(corpus, 48, VERBALIZER_WORDS + template_literals(DEFAULT_TEMPLATE))
    return DataBundle(vocab, corpus, valid, train, evals, list(VERBALIZER_WORDS), DEFAULT_TEMPLATE, SEQ,
                      eval_batch_size=16)


def teacher_config(vocab: int, seed: int = 0) -> ModelConfig:
    return ModelConfig(layers=2, hidden=16, heads=2, vocab=vocab, max_seq=SEQ, seed=seed)


def student_config(vocab: int, seed: int = 1) -> ModelConfig:
    return ModelConfig(layers=1, hidden=8, heads=2, vocab=vocab, max_seq=SEQ, seed=seed)


@lru_cache(maxsize=None)
def tiny_teacher(seed: int = 0):
    data = tiny_data(seed)
    pre, _, _ = train_teacher(teacher_config(len(data.vocab), seed), data,
                              StageSpec(TEACHER_PRETRAIN, 30, 8, 3e-3, seed=seed))
    return pre


def fresh_teacher(seed: int = 0):
    return tiny_teacher(seed).clone()
