"""Checkpoint directories: ``manifest.json`` plus a little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import ModelConfig, TransformerModel
from .tensor import Tensor

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


def save_checkpoint(model: TransformerModel, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, p in model.params.items():
            raw = np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": "wpdistill-checkpoint/1",
        "dtype": "float32-le",
        "model_config": model.config.to_dict(),
        "verbalizer": list(model.verbalizer),
        "metadata": metadata or {},
        "tensors": index,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise InputError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    params = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise InputError(f"{path / BLOB} truncated at tensor {entry['name']}")
        arr = np.frombuffer(blob[start:start + n], dtype=_LE_F32).astype(np.float64)
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]), requires_grad=True)
    config = ModelConfig(**manifest["model_config"])
    return TransformerModel(config, params, manifest.get("verbalizer", [])), manifest


def round_to_storage(model: TransformerModel) -> TransformerModel:
    """Quantize parameters in place to the precision a checkpoint stores."""
    for p in model.params.values():
        p.data = p.data.astype(_LE_F32).astype(np.float64)
    return model
