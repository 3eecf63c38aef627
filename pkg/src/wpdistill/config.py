"""Run configuration: a JSON document with strict keys and documented defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .corpus import DEFAULT_TEMPLATE, Vocabulary, build_vocab, read_corpus, read_task_file, template_literals
from .distill import DistillConfig
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import (CompressionSettings, DataBundle, GLMDSchedule, PRETRAIN_DISTILL, STUDENT_FINETUNE,
                       STUDENT_PRETRAIN, StageSpec, TASK_DISTILL_SP, TASK_DISTILL_ST, TEACHER_FINETUNE,
                       TEACHER_PRETRAIN)


def _stage(steps: int, lr: float) -> dict:
    return {"steps": steps, "batch_size": 16, "peak_lr": lr, "warmup_ratio": 0.1, "weight_decay": 0.1,
            "grad_clip": 0.1}


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "corpus": None,
        "valid": None,
        "task_train": None,
        "task_eval": None,
        "vocab_size": 256,
        "verbalizer": ["yes", "no"],
        "template": DEFAULT_TEMPLATE,
        "seq_len": 64,
        "mask_rate": 0.15,
    },
    "teacher": {"layers": 4, "hidden": 64, "heads": 4, "max_seq": 64, "ffn_mult": 4},
    "student": {"layers": 2, "hidden": 32, "heads": 2, "max_seq": 64, "ffn_mult": 4},
    "teacher_stages": {
        TEACHER_PRETRAIN: _stage(2000, 2e-3),
        TEACHER_FINETUNE: _stage(400, 2e-3),
    },
    "stages": {
        PRETRAIN_DISTILL: _stage(1000, 2e-3),
        TASK_DISTILL_SP: _stage(200, 1e-4),
        TASK_DISTILL_ST: _stage(200, 5e-4),
    },
    "baseline_stages": {
        STUDENT_PRETRAIN: _stage(1000, 2e-3),
        STUDENT_FINETUNE: _stage(400, 5e-4),
    },
    "distill": DistillConfig().to_dict(),
    "compression": {"enabled": True, "r_v": 0.5, "similarity": "inner", "map_teacher": False},
    "teacher_checkpoint": {"pretrained": None, "finetuned": None},
    "analysis": {"snapshot_every": 50, "steps": 500},
}

_PATH_KEYS = {("data", "corpus"), ("data", "valid"), ("data", "task_train"), ("data", "task_eval"),
              ("teacher_checkpoint", "pretrained"), ("teacher_checkpoint", "finetuned"), ("output_dir",)}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _resolve_paths(cfg: dict, root: Path) -> None:
    for keys in _PATH_KEYS:
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        value = node[keys[-1]]
        if value is not None and not Path(value).is_absolute():
            node[keys[-1]] = str((root / value).resolve())


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Merge a config file (and then ``overrides``) over the defaults; unknown keys are rejected."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("--config", "top level must be an object")
        cfg = _merge(cfg, doc)
        _resolve_paths(cfg, path.parent)
    else:
        _resolve_paths(cfg, Path.cwd())
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    distill_config(cfg).validate()
    model_config(cfg, "teacher").validate()
    model_config(cfg, "student").validate()
    for section in ("teacher_stages", "stages", "baseline_stages"):
        for kind in cfg[section]:
            stage_spec(cfg, section, kind).validate()
    comp = cfg["compression"]
    if not 0 < comp["r_v"] <= 1:
        raise ConfigError("compression.r_v", "must lie in (0, 1]")
    if comp["similarity"] not in ("inner", "cosine", "neg-euclid", "unk"):
        raise ConfigError("compression.similarity", f"unknown similarity {comp['similarity']!r}")
    if not 0 < cfg["data"]["mask_rate"] < 1:
        raise ConfigError("data.mask_rate", "must lie in (0, 1)")


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def model_config(cfg: dict, role: str, vocab: int | None = None) -> ModelConfig:
    seed = cfg["seed"] + (0 if role == "teacher" else 1)
    size = vocab if vocab is not None else cfg["data"]["vocab_size"]
    try:
        return ModelConfig(vocab=size, seed=seed, **cfg[role])
    except TypeError as exc:
        raise ConfigError(role, str(exc)) from None


def stage_spec(cfg: dict, section: str, kind: str) -> StageSpec:
    return StageSpec(kind=kind, seed=cfg["seed"], **cfg[section][kind])


def distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(**cfg["distill"])


def schedule(cfg: dict) -> GLMDSchedule:
    return GLMDSchedule(*(stage_spec(cfg, "stages", k) for k in (PRETRAIN_DISTILL, TASK_DISTILL_SP, TASK_DISTILL_ST)))


def compression(cfg: dict) -> CompressionSettings | None:
    comp = cfg["compression"]
    if not comp["enabled"]:
        return None
    return CompressionSettings(comp["r_v"], comp["similarity"], comp["map_teacher"])


def require_path(cfg: dict, key: str) -> str:
    value = cfg["data"][key]
    if not value:
        raise ConfigError(f"data.{key}", "path required")
    if not Path(value).exists():
        raise ConfigError(f"data.{key}", f"no such file {value}")
    return value


def build_vocabulary(cfg: dict, corpus: list[str]) -> Vocabulary:
    d = cfg["data"]
    return build_vocab(corpus, d["vocab_size"], list(d["verbalizer"]) + template_literals(d["template"]))


def load_data(cfg: dict, need_task: bool = True) -> DataBundle:
    d = cfg["data"]
    corpus = read_corpus(require_path(cfg, "corpus"))
    valid = read_corpus(require_path(cfg, "valid"))
    task_train = read_task_file(require_path(cfg, "task_train")) if need_task or d["task_train"] else []
    task_eval = read_task_file(require_path(cfg, "task_eval")) if need_task or d["task_eval"] else []
    vocab = build_vocabulary(cfg, corpus)
    return DataBundle(vocab, corpus, valid, task_train, task_eval, list(d["verbalizer"]), d["template"],
                      d["seq_len"], d["mask_rate"])
