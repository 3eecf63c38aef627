"""Training stages and the three-phase distillation schedule.

Phase order is fixed: word-prediction distillation on the pre-training
corpus against the pre-trained teacher, word-prediction distillation on
masked task sequences against the fine-tuned teacher, then soft-target
distillation of the task logits. Every stage starts from a fresh Adam
state and ends with a checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .compress import (CompressionMap, SimilarityKind, apply_to_batch, build_compression, compress_model,
                       map_teacher_tokens)
from .corpus import (DEFAULT_TEMPLATE, Batch, TaskExample, Vocabulary, make_mlm_batches, make_task_batches,
                     mask_task_batch)
from .distill import (DistillConfig, hard_target_loss, init_projections, inter_loss, layer_pairing,
                      mask_vector, masked_lm_loss, soft_target_loss, word_prediction_loss)
from .errors import ConfigError, NumericError, TrainingAbort
from .model import ModelConfig, TransformerModel, forward, init, task_logits
from .optim import AdamConfig, TrainState, adam_step, lr_at
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

TEACHER_PRETRAIN = "teacher_pretrain"
TEACHER_FINETUNE = "teacher_finetune"
STUDENT_PRETRAIN = "student_pretrain"
PRETRAIN_DISTILL = "pretrain_distill"
TASK_DISTILL_SP = "task_distill_sp"
TASK_DISTILL_ST = "task_distill_st"
STUDENT_FINETUNE = "student_finetune"

KINDS = (TEACHER_PRETRAIN, TEACHER_FINETUNE, STUDENT_PRETRAIN, PRETRAIN_DISTILL, TASK_DISTILL_SP,
         TASK_DISTILL_ST, STUDENT_FINETUNE)
NEEDS_TEACHER = (PRETRAIN_DISTILL, TASK_DISTILL_SP, TASK_DISTILL_ST)
MLM_KINDS = (TEACHER_PRETRAIN, STUDENT_PRETRAIN, PRETRAIN_DISTILL)

METRIC_FIELDS = ("step", "stage", "loss", "lr", "ppl")


@dataclass
class StageSpec:
    kind: str
    steps: int
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown stage kind {self.kind!r}")
        if self.steps < 0:
            raise ConfigError("steps", "must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size", "must be positive")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr", "must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio", "must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DataBundle:
    vocab: Vocabulary
    corpus: list[str]
    valid: list[str]
    task_train: list[TaskExample]
    task_eval: list[TaskExample]
    verbalizer_words: list[str]
    template: str = DEFAULT_TEMPLATE
    seq_len: int = 64
    mask_rate: float = 0.15
    eval_seed: int = 12345
    eval_batch_size: int = 32

    @property
    def verbalizer(self) -> list[int]:
        return [self.vocab.id_of(w) for w in self.verbalizer_words]

    def mlm_stream(self, batch_size: int, seed: int) -> Iterator[Batch]:
        return make_mlm_batches(self.vocab, self.corpus, self.seq_len, batch_size, self.mask_rate, seed,
                                repeat=True)

    def task_stream(self, batch_size: int, seed: int) -> Iterator[Batch]:
        return make_task_batches(self.task_train, self.template, self.vocab, self.seq_len, self.verbalizer,
                                 batch_size, seed, repeat=True)

    def valid_batches(self) -> list[Batch]:
        return list(make_mlm_batches(self.vocab, self.valid, self.seq_len, self.eval_batch_size, self.mask_rate,
                                     self.eval_seed, shuffle=False))

    def task_eval_batches(self) -> list[Batch]:
        return list(make_task_batches(self.task_eval, self.template, self.vocab, self.seq_len, self.verbalizer,
                                      self.eval_batch_size, shuffle=False))


@dataclass
class MetricRow:
    step: int
    stage: str
    loss: float
    lr: float
    ppl: float | None = None

    def as_csv(self) -> list[str]:
        return [str(self.step), self.stage, repr(self.loss), repr(self.lr),
                "" if self.ppl is None else repr(self.ppl)]


def write_metrics(path: str | Path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(row.as_csv())


@dataclass
class StageResult:
    model: TransformerModel
    metrics: list[MetricRow]
    checkpoint: Path | None = None


@dataclass
class StageContext:
    """Everything a loss needs besides the student and the batch."""
    teacher: TransformerModel | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    cmap: CompressionMap | None = None
    map_teacher: bool = False
    projections: list[Tensor] | None = None


def _student_side(batch: Batch, ctx: StageContext) -> Batch:
    return batch if ctx.cmap is None else apply_to_batch(batch, ctx.cmap, "student")


def _teacher_side(batch: Batch, ctx: StageContext) -> Batch:
    if ctx.cmap is not None and ctx.map_teacher:
        return map_teacher_tokens(batch, ctx.cmap)
    return batch if ctx.cmap is None else apply_to_batch(batch, ctx.cmap, "teacher")


def word_prediction_step_loss(student: TransformerModel, batch: Batch, ctx: StageContext) -> Tensor:
    tb, sb = _teacher_side(batch, ctx), _student_side(batch, ctx)
    with no_grad():
        t_trace, t_logits = forward(ctx.teacher, tb.x, tb.pad_mask)
    # a fixed memory layout keeps reductions bit-identical whether or not columns are gathered
    t = t_logits.data
    if ctx.cmap is not None:
        # compare over the kept columns only; the softmax inside the loss renormalizes them
        t = t[..., ctx.cmap.kept]
    # a fixed memory layout keeps reductions bit-identical whether or not columns were gathered
    t = np.ascontiguousarray(t)
    s_trace, s_logits = forward(student, sb.x, sb.pad_mask)
    mv = mask_vector(batch, ctx.distill.include_unmasked, ctx.distill.use_mask_vector)
    loss = word_prediction_loss(s_logits, t, mv, ctx.distill)
    if ctx.distill.add_inter:
        loss = loss + inter_loss(s_trace, t_trace, ctx.projections)
    return loss


def soft_target_step_loss(student: TransformerModel, batch: Batch, ctx: StageContext) -> Tensor:
    tb, sb = _teacher_side(batch, ctx), _student_side(batch, ctx)
    with no_grad():
        t_trace, _ = forward(ctx.teacher, tb.x, tb.pad_mask)
        f_t = task_logits(ctx.teacher, t_trace, tb.blank_position)
    s_trace, _ = forward(student, sb.x, sb.pad_mask)
    f_s = task_logits(student, s_trace, sb.blank_position)
    d = ctx.distill
    loss = soft_target_loss(f_s, f_t.data, d.tau_st, d.divergence_st, d.kl_direction)
    if d.add_hard:
        loss = loss + hard_target_loss(f_s, sb.labels)
    return loss


def mlm_step_loss(student: TransformerModel, batch: Batch, ctx: StageContext) -> Tensor:
    sb = _student_side(batch, ctx)
    _, logits = forward(student, sb.x, sb.pad_mask)
    return masked_lm_loss(logits, sb.targets)


def task_step_loss(student: TransformerModel, batch: Batch, ctx: StageContext) -> Tensor:
    sb = _student_side(batch, ctx)
    trace, _ = forward(student, sb.x, sb.pad_mask)
    return hard_target_loss(task_logits(student, trace, sb.blank_position), sb.labels)


_LOSSES: dict[str, Callable[[TransformerModel, Batch, StageContext], Tensor]] = {
    TEACHER_PRETRAIN: mlm_step_loss,
    STUDENT_PRETRAIN: mlm_step_loss,
    TEACHER_FINETUNE: task_step_loss,
    STUDENT_FINETUNE: task_step_loss,
    PRETRAIN_DISTILL: word_prediction_step_loss,
    TASK_DISTILL_SP: word_prediction_step_loss,
    TASK_DISTILL_ST: soft_target_step_loss,
}


def _batches(spec: StageSpec, data: DataBundle) -> Iterator[Batch]:
    if spec.kind in MLM_KINDS:
        yield from data.mlm_stream(spec.batch_size, spec.seed)
        return
    stream = data.task_stream(spec.batch_size, spec.seed)
    if spec.kind != TASK_DISTILL_SP:
        yield from stream
        return
    # task text is masked with the pre-training policy; the blank stays masked
    rng = np.random.default_rng([spec.seed, 1])
    mask_id = data.vocab.mask_id
    for batch in stream:
        yield mask_task_batch(batch, mask_id, data.mask_rate, rng)


def run_stage(
    spec: StageSpec,
    student: TransformerModel,
    data: DataBundle,
    teacher: TransformerModel | None = None,
    distill: DistillConfig | None = None,
    cmap: CompressionMap | None = None,
    map_teacher: bool = False,
    out_dir: str | Path | None = None,
    on_step: Callable[[int, TransformerModel, float], None] | None = None,
    evaluate: bool = True,
) -> StageResult:
    """Train ``student`` in place for ``spec.steps`` steps of ``spec.kind``.

    Emits one metric row per step; the final row carries the validation
    perplexity. A non-finite loss aborts the stage after saving the last
    good parameters to ``out_dir``.
    """
    spec.validate()
    distill = distill or DistillConfig()
    distill.validate()
    if spec.kind in NEEDS_TEACHER and teacher is None:
        raise ConfigError("teacher", f"stage {spec.kind} needs a teacher")
    ctx = StageContext(teacher, distill, cmap, map_teacher)

    params = dict(student.params)
    for p in params.values():
        p.requires_grad = True
    if distill.add_inter and spec.kind in (PRETRAIN_DISTILL, TASK_DISTILL_SP):
        pairs = layer_pairing(student.config.layers, teacher.config.layers)
        ctx.projections = init_projections(student.config.hidden, teacher.config.hidden, len(pairs), spec.seed)
        params.update({f"inter_proj.{k}": p for k, p in enumerate(ctx.projections)})

    loss_fn = _LOSSES[spec.kind]
    adam = AdamConfig(weight_decay=spec.weight_decay, grad_clip=spec.grad_clip)
    state = TrainState()
    metrics: list[MetricRow] = []
    stream = _batches(spec, data) if spec.steps else iter(())
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / f"ckpt_{spec.kind}" if out is not None else None
    meta = {"stage": spec.to_dict(), "distill": distill.to_dict()}

    last_good = {k: p.data.copy() for k, p in student.params.items()}

    def abort(step: int, reason: str) -> TrainingAbort:
        # roll back to the parameters that last produced a finite loss
        for k, p in student.params.items():
            p.data = last_good[k]
        if ckpt_path is not None:
            save_checkpoint(student, ckpt_path, {**meta, "aborted_at": step})
        return TrainingAbort(step, f"{reason} in {spec.kind}")

    for step in range(1, spec.steps + 1):
        batch = next(stream)
        lr = lr_at(step - 1, spec.steps, spec.peak_lr, spec.warmup_ratio)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = loss_fn(student, batch, ctx)
        except NumericError:
            raise abort(step, "non-finite activations") from None
        value = loss.item()
        if not np.isfinite(value):
            raise abort(step, "non-finite loss")
        last_good = {k: p.data.copy() for k, p in student.params.items()}
        for p in params.values():
            p.grad = None
        with np.errstate(over="ignore", invalid="ignore"):
            backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        try:
            adam_step(params, grads, state, lr, adam)
        except TrainingAbort:
            raise abort(step, "non-finite gradient") from None
        metrics.append(MetricRow(step, spec.kind, value, lr))
        if on_step is not None:
            on_step(step, student, value)
        if step % 100 == 0:
            log.info("%s step %d/%d loss %.5f lr %.2e", spec.kind, step, spec.steps, value, lr)

    for p in student.params.values():
        p.grad = None
    if evaluate and metrics:
        metrics[-1].ppl = analysis.perplexity(student, data.valid_batches(), cmap)
    if ckpt_path is not None:
        save_checkpoint(student, ckpt_path, {**meta, "final_loss": metrics[-1].loss if metrics else None})
    return StageResult(student, metrics, ckpt_path)


@dataclass
class CompressionSettings:
    r_v: float = 0.5
    similarity: str = SimilarityKind.INNER_PRODUCT.value
    map_teacher: bool = False


@dataclass
class GLMDSchedule:
    pretrain: StageSpec = field(default_factory=lambda: StageSpec(PRETRAIN_DISTILL, 1000))
    task_sp: StageSpec = field(default_factory=lambda: StageSpec(TASK_DISTILL_SP, 200))
    task_st: StageSpec = field(default_factory=lambda: StageSpec(TASK_DISTILL_ST, 200))

    def phases(self) -> list[StageSpec]:
        expected = (PRETRAIN_DISTILL, TASK_DISTILL_SP, TASK_DISTILL_ST)
        specs = [self.pretrain, self.task_sp, self.task_st]
        for spec, kind in zip(specs, expected):
            if spec.kind != kind:
                raise ConfigError("kind", f"phase expects {kind}, got {spec.kind}")
        return specs


def evaluate_model(model: TransformerModel, data: DataBundle, cmap: CompressionMap | None = None) -> dict:
    return {"ppl": analysis.perplexity(model, data.valid_batches(), cmap),
            "task_acc": analysis.task_accuracy(model, data.task_eval_batches(), cmap)}


def _handoff(result: StageResult) -> TransformerModel:
    # continuing from the stored checkpoint makes a chained run identical to resuming phases separately
    if result.checkpoint is None:
        return result.model
    model, _ = load_checkpoint(result.checkpoint)
    return model


def init_student(student_config: ModelConfig, data: DataBundle, cmap: CompressionMap | None) -> TransformerModel:
    student = init(student_config, data.verbalizer)
    if student_config.vocab != len(data.vocab):
        raise ConfigError("student.vocab", f"{student_config.vocab} differs from vocabulary size {len(data.vocab)}")
    return compress_model(student, cmap) if cmap is not None else student


def run_glmd(
    teacher_pretrained: TransformerModel,
    student_config: ModelConfig,
    data: DataBundle,
    distill: DistillConfig | None = None,
    schedule: GLMDSchedule | None = None,
    compression: CompressionSettings | None = None,
    teacher_finetuned: TransformerModel | None = None,
    out_dir: str | Path | None = None,
) -> tuple[TransformerModel, dict]:
    """Distill a fresh student through the three phases.

    ``teacher_pretrained`` drives phase 1 and supplies the embedding rows for
    vocabulary compression; ``teacher_finetuned`` (defaulting to the
    pre-trained teacher) drives phases 2 and 3.
    """
    distill = distill or DistillConfig()
    distill.validate()
    schedule = schedule or GLMDSchedule()
    phases = schedule.phases()
    teacher_ft = teacher_finetuned or teacher_pretrained
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    cmap = None
    if compression is not None:
        cmap = build_compression(data.vocab, teacher_pretrained.tok_emb, compression.r_v,
                                 SimilarityKind(compression.similarity))
        if out is not None:
            cmap.save(out / "compression_map.tsv")
    map_teacher = bool(compression and compression.map_teacher)

    student = init_student(student_config, data, cmap)
    if out is not None:
        save_checkpoint(student, out / "ckpt_init", {"stage": "init"})
        student, _ = load_checkpoint(out / "ckpt_init")

    report = {"initial": evaluate_model(student, data, cmap), "phases": [],
              "compression": None if cmap is None else {"r_v": cmap.r_v, "kept": cmap.size, "v": cmap.v,
                                                        "similarity": cmap.kind.value,
                                                        "map_teacher": map_teacher},
              "student_parameters": student.num_parameters()}
    metrics: list[MetricRow] = []
    teachers = {PRETRAIN_DISTILL: teacher_pretrained, TASK_DISTILL_SP: teacher_ft, TASK_DISTILL_ST: teacher_ft}
    for spec in phases:
        before = report["phases"][-1]["after"] if report["phases"] else report["initial"]
        result = run_stage(spec, student, data, teachers[spec.kind], distill, cmap, map_teacher, out)
        student = _handoff(result)
        after = evaluate_model(student, data, cmap)
        report["phases"].append({"kind": spec.kind, "steps": spec.steps, "before": before, "after": after,
                                 "final_loss": result.metrics[-1].loss if result.metrics else None})
        metrics.extend(result.metrics)
    report["final"] = report["phases"][-1]["after"]
    if out is not None:
        write_metrics(out / "metrics.csv", metrics)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    report["metrics"] = metrics
    return student, report


def run_hard_label_baseline(
    student_config: ModelConfig,
    data: DataBundle,
    pretrain: StageSpec,
    finetune: StageSpec,
    out_dir: str | Path | None = None,
) -> tuple[TransformerModel, dict]:
    """Masked-LM pre-training followed by label-only fine-tuning, no teacher."""
    if pretrain.kind != STUDENT_PRETRAIN or finetune.kind != STUDENT_FINETUNE:
        raise ConfigError("kind", "baseline expects student_pretrain then student_finetune")
    student = init_student(student_config, data, None)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(student, out / "ckpt_init", {"stage": "init"})
        student, _ = load_checkpoint(out / "ckpt_init")
    report = {"initial": evaluate_model(student, data), "phases": []}
    metrics: list[MetricRow] = []
    for spec in (pretrain, finetune):
        result = run_stage(spec, student, data, out_dir=out)
        student = _handoff(result)
        report["phases"].append({"kind": spec.kind, "steps": spec.steps, "after": evaluate_model(student, data)})
        metrics.extend(result.metrics)
    report["final"] = report["phases"][-1]["after"]
    if out is not None:
        write_metrics(out / "metrics.csv", metrics)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    report["metrics"] = metrics
    return student, report


def train_teacher(config: ModelConfig, data: DataBundle, pretrain: StageSpec, finetune: StageSpec | None = None,
                  out_dir: str | Path | None = None) -> tuple[TransformerModel, TransformerModel | None, list[MetricRow]]:
    """Pre-train (and optionally fine-tune) a teacher. Returns (pre-trained, fine-tuned, metrics)."""
    if config.vocab != len(data.vocab):
        raise ConfigError("teacher.vocab", f"{config.vocab} differs from vocabulary size {len(data.vocab)}")
    model = init(config, data.verbalizer)
    out = Path(out_dir) if out_dir is not None else None
    result = run_stage(pretrain, model, data, out_dir=out)
    pretrained = _handoff(result)
    metrics = list(result.metrics)
    finetuned = None
    if finetune is not None:
        ft = run_stage(finetune, pretrained.clone(), data, out_dir=out)
        finetuned = _handoff(ft)
        metrics += ft.metrics
    return pretrained, finetuned, metrics
