"""Diagnostics: rank correlation, feature distances, coverage curves, perplexity."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Batch, Vocabulary, tokenize
from .errors import DegenerateBatchError, DimensionError, InputError, UndefinedCorrelationError
from .model import ForwardTrace, TransformerModel, forward, task_logits
from .tensor import no_grad

RAW = "raw"
DOT_PRODUCT = "dot_product"
MSE = "mse"
KL_TAU1 = "kl_tau1"


# -- rank correlation ----------------------------------------------------
def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise InputError(f"series lengths differ: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise InputError("need at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return min(1.0, max(-1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


# -- feature distances ---------------------------------------------------
def pairwise_dot(H: np.ndarray) -> np.ndarray:
    """H H^T / sqrt(width) over the last two axes."""
    H = np.asarray(H, dtype=np.float64)
    return (H @ np.swapaxes(H, -1, -2)) / math.sqrt(H.shape[-1])


def _feature_array(trace: ForwardTrace, name: str) -> np.ndarray:
    f = trace.feature(name).data
    if name.startswith("Att"):
        return f.mean(axis=1)
    if name[0] in "QKV":
        B, H, L, d = f.shape
        return f.transpose(0, 2, 1, 3).reshape(B, L, H * d)
    return f


def _softmax_rows(x: np.ndarray, col_mask: np.ndarray | None) -> np.ndarray:
    if col_mask is not None:
        x = np.where(col_mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def feature_distance(trace_s: ForwardTrace, trace_t: ForwardTrace, name: str, transform: str = DOT_PRODUCT,
                     metric: str = MSE, teacher_name: str | None = None) -> float:
    """Distance between one student feature and its teacher counterpart.

    Attention maps are averaged over heads; Q/K/V are concatenated across
    heads. The result is averaged over batch rows and non-pad positions.
    """
    fs = _feature_array(trace_s, name)
    ft = _feature_array(trace_t, teacher_name or name)
    if transform == DOT_PRODUCT:
        fs, ft = pairwise_dot(fs), pairwise_dot(ft)
    elif transform != RAW:
        raise InputError(f"unknown transform {transform!r}")
    if fs.shape != ft.shape:
        raise DimensionError(f"{name}: student {fs.shape} vs teacher {ft.shape} under {transform} transform")

    keep = ~trace_s.pad_mask
    positional = transform == DOT_PRODUCT or name.startswith("Att")
    col_mask = keep[:, None, :] if positional else None
    if metric == MSE:
        sq = (fs - ft) ** 2
        if col_mask is not None:
            per_row = (sq * col_mask).sum(axis=-1) / np.maximum(col_mask.sum(axis=-1), 1)
        else:
            per_row = sq.mean(axis=-1)
    elif metric == KL_TAU1:
        if name.startswith("Att") and transform == RAW:
            p_s, p_t = fs, ft
        else:
            p_s, p_t = _softmax_rows(fs, col_mask), _softmax_rows(ft, col_mask)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p_t > 0, p_t * (np.log(p_t) - np.log(np.maximum(p_s, 1e-300))), 0.0)
        per_row = terms.sum(axis=-1)
    else:
        raise InputError(f"unknown metric {metric!r}")
    n = int(keep.sum())
    if n == 0:
        raise DegenerateBatchError("no non-pad positions")
    return float((per_row * keep).sum() / n)


def feature_specs(trace_s: ForwardTrace, trace_t: ForwardTrace) -> list[tuple[str, str, str, str]]:
    """(student feature, teacher feature, transform, metric) combinations worth reporting."""
    from .distill import layer_pairing

    pairs = [("Emb", "Emb")]
    for i, j in layer_pairing(len(trace_s.hidden_states), len(trace_t.hidden_states)):
        pairs += [(f"{p}{i}", f"{p}{j}") for p in ("HS", "Att", "Q", "K", "V")]
    specs = []
    for s, t in pairs:
        specs.append((s, t, DOT_PRODUCT, MSE))
        if _feature_array(trace_s, s).shape == _feature_array(trace_t, t).shape:
            specs.append((s, t, RAW, MSE))
        if s.startswith("Att"):
            specs.append((s, t, RAW, KL_TAU1))
    return specs


@dataclass
class CorrelationReport:
    rho: dict[tuple[str, str, str], float] = field(default_factory=dict)
    errors: dict[tuple[str, str, str], str] = field(default_factory=dict)
    # (step, loss, key, distance)
    series: list[tuple[int, float, tuple[str, str, str], float]] = field(default_factory=list)

    @classmethod
    def from_series(cls, series: Iterable[tuple[int, float, tuple[str, str, str], float]]) -> "CorrelationReport":
        series = list(series)
        by_key: dict[tuple[str, str, str], list[tuple[float, float]]] = {}
        for _, loss, key, dist in series:
            by_key.setdefault(key, []).append((loss, dist))
        report = cls(series=series)
        for key, pts in by_key.items():
            try:
                report.rho[key] = spearman([p[1] for p in pts], [p[0] for p in pts])
            except (UndefinedCorrelationError, InputError) as exc:
                report.errors[key] = str(exc)
        return report

    def write(self, rho_path: str | Path, series_path: str | Path | None = None) -> None:
        with open(rho_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "transform", "metric", "rho"])
            for key in sorted(set(self.rho) | set(self.errors)):
                w.writerow([*key, repr(self.rho[key]) if key in self.rho else "undefined"])
        if series_path is not None:
            with open(series_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "loss", "feature", "distance"])
                for step, loss, key, dist in self.series:
                    w.writerow([step, repr(loss), "/".join(key), repr(dist)])

    @classmethod
    def read_series(cls, path: str | Path) -> "CorrelationReport":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["step"]), float(row["loss"]), tuple(row["feature"].split("/")),
                             float(row["distance"])))
        return cls.from_series(rows)


# -- coverage ------------------------------------------------------------
@dataclass
class CoverageCurve:
    x: np.ndarray
    y: np.ndarray

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "fraction"])
            for r, f in zip(self.x, self.y):
                w.writerow([int(r), repr(float(f))])


def frequency_ranking(vocab: Vocabulary) -> list[int]:
    return sorted(range(len(vocab)), key=lambda i: (-vocab.freq[i], i))


def coverage_curve(vocab: Vocabulary, dataset: Iterable[str | Sequence[str]]) -> CoverageCurve:
    """Fraction of dataset token occurrences covered by the top-x corpus-frequency tokens."""
    counts = np.zeros(len(vocab), dtype=np.int64)
    for item in dataset:
        toks = tokenize(item) if isinstance(item, str) else item
        for i in vocab.encode(toks):
            counts[i] += 1
    total = int(counts.sum())
    if total == 0:
        raise InputError("empty dataset")
    cum = np.cumsum(counts[frequency_ranking(vocab)])
    return CoverageCurve(np.arange(1, len(vocab) + 1), cum / total)


# -- model evaluation ----------------------------------------------------
def _student_batch(batch: Batch, cmap) -> Batch:
    if cmap is None:
        return batch
    from .compress import apply_to_batch
    return apply_to_batch(batch, cmap, "student")


def masked_nll(model: TransformerModel, batches: Iterable[Batch], cmap=None) -> tuple[float, int]:
    total, count = 0.0, 0
    with no_grad():
        for batch in batches:
            b = _student_batch(batch, cmap)
            pos = np.nonzero(b.targets >= 0)
            if len(pos[0]) == 0:
                continue
            _, logits = forward(model, b.x, b.pad_mask)
            z = logits.data[pos]
            zmax = z.max(axis=-1, keepdims=True)
            logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
            total -= float(logp[np.arange(len(pos[0])), b.targets[pos]].sum())
            count += len(pos[0])
    return total, count


def perplexity(model: TransformerModel, batches: Iterable[Batch], cmap=None) -> float:
    """exp of the mean negative log-likelihood over MASKED positions."""
    total, count = masked_nll(model, batches, cmap)
    if count == 0:
        raise DegenerateBatchError("no masked positions to evaluate")
    return math.exp(total / count)


def task_accuracy(model: TransformerModel, batches: Iterable[Batch], cmap=None) -> float:
    correct, n = 0, 0
    with no_grad():
        for batch in batches:
            b = _student_batch(batch, cmap)
            trace, _ = forward(model, b.x, b.pad_mask)
            pred = task_logits(model, trace, b.blank_position).data.argmax(axis=-1)
            correct += int((pred == b.labels).sum())
            n += len(b.labels)
    if n == 0:
        raise InputError("no task examples to evaluate")
    return correct / n


def correlation_run(teacher: TransformerModel, student: TransformerModel, data, distill_config, spec,
                    snapshot_every: int = 50, probe: Batch | None = None, cmap=None) -> CorrelationReport:
    """Distill ``student`` with ``spec`` and correlate feature distances with the word-prediction loss.

    At step 0, every ``snapshot_every`` steps and at the end, the loss and
    each feature distance are measured on a fixed probe batch.
    """
    from .compress import apply_to_batch
    from .distill import mask_vector, word_prediction_loss
    from .pipeline import run_stage

    if probe is None:
        probe = data.valid_batches()[0]
    sb = probe if cmap is None else apply_to_batch(probe, cmap, "student")
    with no_grad():
        t_trace, t_logits = forward(teacher, probe.x, probe.pad_mask)
    t = t_logits.data if cmap is None else t_logits.data[..., cmap.kept]
    mv = mask_vector(probe, distill_config.include_unmasked, distill_config.use_mask_vector)
    series: list = []
    specs: list = []

    def snapshot(step: int, model: TransformerModel) -> None:
        with no_grad():
            s_trace, s_logits = forward(model, sb.x, sb.pad_mask)
            loss = word_prediction_loss(s_logits, t, mv, distill_config).item()
        if not specs:
            specs.extend(feature_specs(s_trace, t_trace))
        for s_name, t_name, transform, metric in specs:
            dist = feature_distance(s_trace, t_trace, s_name, transform, metric, teacher_name=t_name)
            series.append((step, loss, (s_name, transform, metric), dist))

    n_snaps = 1 + spec.steps // snapshot_every + (1 if spec.steps % snapshot_every else 0)
    if n_snaps < 2:
        raise InputError("need at least two snapshots; lower snapshot_every or add steps")
    snapshot(0, student)

    def on_step(step: int, model: TransformerModel, _loss: float) -> None:
        if step % snapshot_every == 0 or step == spec.steps:
            snapshot(step, model)

    run_stage(spec, student, data, teacher, distill_config, cmap, on_step=on_step, evaluate=False)
    return CorrelationReport.from_series(series)
