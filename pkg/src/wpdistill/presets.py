"""Desk-scale defaults and the seeded smoke setup."""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import DEFAULT_TEMPLATE, build_vocab, template_literals
from .model import ModelConfig
from .pipeline import (DataBundle, GLMDSchedule, PRETRAIN_DISTILL, STUDENT_FINETUNE, STUDENT_PRETRAIN, StageSpec,
                       TASK_DISTILL_SP, TASK_DISTILL_ST, TEACHER_FINETUNE, TEACHER_PRETRAIN)
from .synth import VERBALIZER_WORDS, ZipfLanguage, cloze_task, corpus_of_size, cue_sets

VOCAB_SIZE = 256
SEQ_LEN = 64


def teacher_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(layers=4, hidden=64, heads=4, vocab=VOCAB_SIZE, max_seq=SEQ_LEN, seed=seed)


def student_config(seed: int = 1) -> ModelConfig:
    return ModelConfig(layers=2, hidden=32, heads=2, vocab=VOCAB_SIZE, max_seq=SEQ_LEN, seed=seed)


@dataclass
class SmokeSizes:
    corpus_bytes: int = 100_000
    valid_bytes: int = 10_000
    task_train: int = 400
    task_eval: int = 200
    teacher_pretrain_steps: int = 2000
    teacher_finetune_steps: int = 400
    pretrain_distill_steps: int = 1000
    task_sp_steps: int = 200
    task_st_steps: int = 200
    batch_size: int = 16
    teacher_lr: float = 2e-3
    student_lr: float = 2e-3
    teacher_finetune_lr: float = 2e-3
    # the task phases trade task accuracy against forgetting of the corpus language model
    task_sp_lr: float = 1e-4
    task_st_lr: float = 5e-4


def smoke_data(seed: int = 0, sizes: SmokeSizes | None = None) -> DataBundle:
    sizes = sizes or SmokeSizes()
    lang = ZipfLanguage.create(seed=seed)
    corpus = corpus_of_size(sizes.corpus_bytes, lang, seed=seed + 1)
    valid = corpus_of_size(sizes.valid_bytes, lang, seed=seed + 2)
    cues = cue_sets(seed=seed)
    task_train = cloze_task(sizes.task_train, lang, cues, seed=seed + 3)
    task_eval = cloze_task(sizes.task_eval, lang, cues, seed=seed + 4)
    specials = VERBALIZER_WORDS + template_literals(DEFAULT_TEMPLATE)
    vocab = build_vocab(corpus, VOCAB_SIZE, specials)
    return DataBundle(vocab, corpus, valid, task_train, task_eval, list(VERBALIZER_WORDS), DEFAULT_TEMPLATE,
                      SEQ_LEN)


def teacher_stages(sizes: SmokeSizes | None = None, seed: int = 0) -> tuple[StageSpec, StageSpec]:
    s = sizes or SmokeSizes()
    return (StageSpec(TEACHER_PRETRAIN, s.teacher_pretrain_steps, s.batch_size, s.teacher_lr, seed=seed),
            StageSpec(TEACHER_FINETUNE, s.teacher_finetune_steps, s.batch_size, s.teacher_finetune_lr, seed=seed))


def glmd_schedule(sizes: SmokeSizes | None = None, seed: int = 0) -> GLMDSchedule:
    s = sizes or SmokeSizes()
    return GLMDSchedule(StageSpec(PRETRAIN_DISTILL, s.pretrain_distill_steps, s.batch_size, s.student_lr, seed=seed),
                        StageSpec(TASK_DISTILL_SP, s.task_sp_steps, s.batch_size, s.task_sp_lr, seed=seed),
                        StageSpec(TASK_DISTILL_ST, s.task_st_steps, s.batch_size, s.task_st_lr, seed=seed))


def baseline_stages(sizes: SmokeSizes | None = None, seed: int = 0) -> tuple[StageSpec, StageSpec]:
    """Hard-label-only student with the same step and batch budget as the three distillation phases."""
    s = sizes or SmokeSizes()
    return (StageSpec(STUDENT_PRETRAIN, s.pretrain_distill_steps, s.batch_size, s.student_lr, seed=seed),
            StageSpec(STUDENT_FINETUNE, s.task_sp_steps + s.task_st_steps, s.batch_size, s.task_st_lr, seed=seed))
