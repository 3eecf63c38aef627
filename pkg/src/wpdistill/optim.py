"""Adam with decoupled weight decay, global-norm clipping and a linear schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingAbort
from .tensor import Tensor


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 0.1


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup from 0 to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    warmup = warmup_ratio * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState,
              lr: float, config: AdamConfig) -> float:
    """One in-place update. Returns the pre-clip gradient norm."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingAbort(state.step + 1, f"non-finite gradient in {name}")
    grads, norm = clip_grads(grads, config.grad_clip)
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return norm
