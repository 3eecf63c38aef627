"""Distillation objectives.

All teacher-side inputs are treated as constants: they are read through
``.data`` so no gradient ever reaches them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Batch, CLS_MASKED, CLS_PAD
from .errors import ConfigError, DegenerateBatchError, DimensionError, LabelError
from .model import ForwardTrace
from .tensor import Tensor

KL = "kl"
MSE = "mse"
TEACHER_REF = "teacher_ref"
STUDENT_REF = "student_ref"


@dataclass
class DistillConfig:
    tau_sp: float = 15.0
    tau_st: float = 1.0
    divergence_sp: str = KL
    divergence_st: str = KL
    use_mask_vector: bool = True
    include_unmasked: bool = True
    add_inter: bool = False
    add_hard: bool = False
    kl_direction: str = TEACHER_REF

    def validate(self) -> None:
        for name in ("tau_sp", "tau_st"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "temperature must be positive")
        for name in ("divergence_sp", "divergence_st"):
            if getattr(self, name) not in (KL, MSE):
                raise ConfigError(name, f"must be '{KL}' or '{MSE}'")
        if self.kl_direction not in (TEACHER_REF, STUDENT_REF):
            raise ConfigError("kl_direction", f"must be '{TEACHER_REF}' or '{STUDENT_REF}'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskVector:
    m_p: np.ndarray
    active_count: int


def mask_vector(batch: Batch, include_unmasked: bool = True, use_mask: bool = True) -> MaskVector:
    """Per-position loss weights.

    Default: 1 at MASKED and UNMASKED positions, 0 at PAD. Without
    ``include_unmasked`` only MASKED positions are active. With
    ``use_mask=False`` every position, PAD included, is active.
    """
    if not use_mask:
        m = np.ones(batch.classes.shape)
    elif include_unmasked:
        m = (batch.classes != CLS_PAD).astype(np.float64)
    else:
        m = (batch.classes == CLS_MASKED).astype(np.float64)
    return MaskVector(m, int(m.sum()))


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_rows(student_logits: Tensor, teacher_logits, tau: float, direction: str = TEACHER_REF) -> Tensor:
    """tau^2 * KL between softened distributions, one value per row (last axis reduced)."""
    t = _const(teacher_logits)
    if student_logits.shape != t.shape:
        raise DimensionError(f"student logits {student_logits.shape} vs teacher logits {t.shape}")
    if not tau > 0:
        raise ConfigError("tau", "temperature must be positive")
    log_p = T.log_softmax(student_logits * (1.0 / tau), axis=-1)
    log_q = _log_softmax_np(t / tau)
    if direction == TEACHER_REF:
        rows = (Tensor(np.exp(log_q)) * (Tensor(log_q) - log_p)).sum(axis=-1)
    elif direction == STUDENT_REF:
        rows = (T.exp(log_p) * (log_p - Tensor(log_q))).sum(axis=-1)
    else:
        raise ConfigError("kl_direction", f"unknown direction {direction!r}")
    return rows * (tau * tau)


def soft_kl(student_logits: Tensor, teacher_logits, tau: float, direction: str = TEACHER_REF) -> Tensor:
    """tau^2 KL(teacher || student) of softened distributions, averaged over leading rows."""
    rows = kl_rows(student_logits, teacher_logits, tau, direction)
    return rows.mean() if rows.ndim else rows


def mse_rows(student_logits: Tensor, teacher_logits) -> Tensor:
    t = _const(teacher_logits)
    if student_logits.shape != t.shape:
        raise DimensionError(f"student logits {student_logits.shape} vs teacher logits {t.shape}")
    diff = student_logits - Tensor(t)
    return (diff * diff).mean(axis=-1)


def word_prediction_loss(student_lm_logits: Tensor, teacher_lm_logits, m_p, config: DistillConfig) -> Tensor:
    """Masked per-position soft-target loss over word-prediction logits.

    Per-position divergences are weighted by ``m_p`` and averaged over
    the active positions of the whole batch.
    """
    mask = m_p.m_p if isinstance(m_p, MaskVector) else np.asarray(m_p, dtype=np.float64)
    active = float(mask.sum()) if not isinstance(m_p, MaskVector) else float(m_p.active_count)
    if active <= 0:
        raise DegenerateBatchError("mask vector has no active positions")
    if config.divergence_sp == KL:
        per_pos = kl_rows(student_lm_logits, teacher_lm_logits, config.tau_sp, config.kl_direction)
    else:
        per_pos = mse_rows(student_lm_logits, teacher_lm_logits)
    if per_pos.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match positions {per_pos.shape}")
    return (per_pos * Tensor(mask)).sum() * (1.0 / active)


def soft_target_loss(f_l_student: Tensor, f_l_teacher, tau_st: float = 1.0, divergence: str = KL,
                     direction: str = TEACHER_REF) -> Tensor:
    if divergence == MSE:
        return mse_rows(f_l_student, f_l_teacher).mean()
    return soft_kl(f_l_student, f_l_teacher, tau_st, direction)


def hard_target_loss(f_l_student: Tensor, y) -> Tensor:
    """Mean cross-entropy of the class logits against integer labels."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    B, C = f_l_student.shape
    if y.shape[0] != B:
        raise DimensionError(f"{y.shape[0]} labels for {B} rows")
    if ((y < 0) | (y >= C)).any():
        raise LabelError(f"labels {y.tolist()} outside 0..{C - 1}")
    logp = T.log_softmax(f_l_student, axis=-1)
    return -logp[np.arange(B), y].mean()


def masked_lm_loss(lm_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy at positions carrying a target (NO_TARGET elsewhere)."""
    pos = np.nonzero(targets >= 0)
    n = len(pos[0])
    if n == 0:
        raise DegenerateBatchError("batch has no masked positions")
    logp = T.log_softmax(lm_logits, axis=-1)
    return -logp[pos + (targets[pos],)].sum() * (1.0 / n)


# -- intermediate-feature loss (ablation only) ----------------------------
def layer_pairing(student_layers: int, teacher_layers: int) -> list[tuple[int, int]]:
    """Student layer i (1-based) paired with teacher layer ceil(i * L_T / L_S)."""
    if student_layers <= 0 or teacher_layers <= 0:
        raise ConfigError("layers", "layer counts must be positive")
    if student_layers > teacher_layers:
        raise ConfigError("layers", f"no uniform pairing from {student_layers} student to {teacher_layers} teacher layers")
    return [(i, math.ceil(i * teacher_layers / student_layers)) for i in range(1, student_layers + 1)]


def _mean_heads(att: Tensor) -> Tensor:
    return att.mean(axis=1)


def inter_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, projections: list[Tensor] | None = None,
               pairing: list[tuple[int, int]] | None = None) -> Tensor:
    """Hidden-state MSE (after a linear projection) plus attention KL at tau=1, summed over paired layers.

    Attention maps are averaged over heads on each side so that models with
    different head counts stay comparable. Only non-pad query rows count.
    """
    if pairing is None:
        pairing = layer_pairing(len(trace_s.hidden_states), len(trace_t.hidden_states))
    keep = ~trace_s.pad_mask
    n_rows = int(keep.sum())
    if n_rows == 0:
        raise DegenerateBatchError("no non-pad positions")
    w = Tensor(keep.astype(np.float64))
    total = None
    for k, (i, j) in enumerate(pairing):
        hs = trace_s.hidden_states[i - 1]
        ht = trace_t.hidden_states[j - 1].data
        proj = projections[k] if projections is not None else None
        if proj is not None:
            hs = hs @ proj
        if hs.shape != ht.shape:
            raise DimensionError(f"hidden states {hs.shape} vs {ht.shape}; supply a projection")
        diff = hs - Tensor(ht)
        mse = ((diff * diff).mean(axis=-1) * w).sum() * (1.0 / n_rows)

        a_s = _mean_heads(trace_s.attentions[i - 1])
        a_t = trace_t.attentions[j - 1].data.mean(axis=1)
        # attention maps are probabilities already; pad keys carry exactly zero mass
        with np.errstate(divide="ignore"):
            log_t = np.where(a_t > 0, np.log(np.where(a_t > 0, a_t, 1.0)), 0.0)
        log_s = T.log(a_s + Tensor(np.where(a_t > 0, 0.0, 1.0)))
        kl = (Tensor(a_t) * (Tensor(log_t) - log_s)).sum(axis=-1)
        att = (kl * w).sum() * (1.0 / n_rows)
        term = mse + att
        total = term if total is None else total + term
    return total


def init_projections(student_hidden: int, teacher_hidden: int, n_pairs: int, seed: int = 0) -> list[Tensor]:
    """Learnable student->teacher hidden-state projections; identity when widths match."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        if student_hidden == teacher_hidden:
            w = np.eye(student_hidden)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(student_hidden), size=(student_hidden, teacher_hidden))
        out.append(T.parameter(w))
    return out
