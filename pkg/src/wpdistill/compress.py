"""Frequency-based vocabulary compression.

Keeps the ``ceil(v * r_v)`` most frequent token ids (specials always
kept), sends every other id to its most similar kept id in the teacher's
pre-trained embedding space, and slices embedding rows down to the kept
set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Batch, NO_TARGET, Vocabulary
from .errors import ConfigError, ContractError, VocabularyError
from .model import TransformerModel
from .tensor import Tensor


class SimilarityKind(str, enum.Enum):
    INNER_PRODUCT = "inner"
    COSINE = "cosine"
    NEG_EUCLIDEAN = "neg-euclid"
    UNK_REPLACE = "unk"


def _as_array(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def select_kept(freq: Sequence[int], r_v: float, special_ids: Sequence[int] = ()) -> list[int]:
    """Top ``ceil(v * r_v)`` ids by frequency, specials forced in, ties to the lower id.

    The result is ordered by original id.
    """
    if not 0.0 < r_v <= 1.0:
        raise ConfigError("r_v", f"must lie in (0, 1], got {r_v}")
    if isinstance(freq, Vocabulary):
        special_ids = list(special_ids) or freq.special_ids
        freq = freq.freq
    v = len(freq)
    n_keep = math.ceil(v * r_v)
    specials = sorted(set(int(i) for i in special_ids))
    if n_keep < len(specials):
        raise ConfigError("r_v", f"keeps {n_keep} tokens but {len(specials)} special tokens are required")
    kept = set(specials)
    ranked = sorted(range(v), key=lambda i: (-freq[i], i))
    for i in ranked:
        if len(kept) == n_keep:
            break
        kept.add(i)
    return sorted(kept)


def similarity_scores(query: np.ndarray, rows: np.ndarray, kind: SimilarityKind) -> np.ndarray:
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.INNER_PRODUCT:
        return rows @ query
    if kind is SimilarityKind.COSINE:
        denom = np.linalg.norm(rows, axis=1) * np.linalg.norm(query)
        return (rows @ query) / np.where(denom == 0.0, 1.0, denom)
    if kind is SimilarityKind.NEG_EUCLIDEAN:
        diff = rows - query
        return -np.sqrt((diff * diff).sum(axis=1))
    raise ContractError(f"similarity kind {kind.value} has no score")


def token_mapping(w_m: int, kept: Sequence[int], teacher_emb, kind: SimilarityKind = SimilarityKind.INNER_PRODUCT,
                  unk_id: int | None = None) -> int:
    """Most similar kept id to ``w_m`` under the teacher embedding rows."""
    kind = SimilarityKind(kind)
    kept = list(kept)
    if w_m in set(kept):
        raise ContractError(f"token {w_m} is kept; only dropped tokens are mapped")
    if kind is SimilarityKind.UNK_REPLACE:
        if unk_id is None:
            raise ContractError("UNK replacement needs unk_id")
        return int(unk_id)
    W = _as_array(teacher_emb)
    scores = similarity_scores(W[w_m], W[kept], kind)
    # argmax returns the first maximum and kept is ascending, so ties go to the lower id
    return int(kept[int(np.argmax(scores))])


def weight_mapping(teacher_emb, kept: Sequence[int]) -> np.ndarray:
    """Rows of the embedding matrix at ``kept``, in kept order."""
    kept = list(kept)
    if len(set(kept)) != len(kept):
        raise ContractError("duplicate ids in kept set")
    W = _as_array(teacher_emb)
    if kept and (min(kept) < 0 or max(kept) >= W.shape[0]):
        raise ContractError(f"kept ids outside 0..{W.shape[0] - 1}")
    return W[np.asarray(kept, dtype=np.int64)].copy()


@dataclass
class CompressionMap:
    v: int
    r_v: float
    kept: list[int]
    remap: np.ndarray      # original id -> kept original id
    kind: SimilarityKind = SimilarityKind.INNER_PRODUCT

    def __post_init__(self):
        self.kept = [int(k) for k in self.kept]
        self.remap = np.asarray(self.remap, dtype=np.int64)
        self.new_id = np.full(self.v, -1, dtype=np.int64)
        self.new_id[np.asarray(self.kept, dtype=np.int64)] = np.arange(len(self.kept))

    @property
    def size(self) -> int:
        return len(self.kept)

    def student_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.v):
            raise VocabularyError(f"ids outside the mapped vocabulary of {self.v}")
        return self.new_id[self.remap[ids]]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"v={self.v}\tr_v={self.r_v!r}\tkept={len(self.kept)}\tsim={SimilarityKind(self.kind).value}\n")
            for old in range(self.v):
                mapped = int(self.remap[old])
                fh.write(f"{old}\t{mapped}\t{int(self.new_id[mapped])}\n")

    @classmethod
    def load(cls, path: str | Path) -> "CompressionMap":
        with open(path, encoding="utf-8") as fh:
            header = dict(field.split("=", 1) for field in fh.readline().strip().split("\t"))
            rows = [line.split("\t") for line in fh if line.strip()]
        v = int(header["v"])
        remap = np.zeros(v, dtype=np.int64)
        for old, mapped, _ in rows:
            remap[int(old)] = int(mapped)
        kept = sorted({int(m) for m in remap})
        cmap = cls(v, float(header["r_v"]), kept, remap, SimilarityKind(header.get("sim", "inner")))
        if len(kept) != int(header["kept"]):
            raise VocabularyError(f"{path}: header says {header['kept']} kept ids, table has {len(kept)}")
        return cmap


def build_compression(vocab: Vocabulary, teacher_emb, r_v: float,
                      kind: SimilarityKind = SimilarityKind.INNER_PRODUCT) -> CompressionMap:
    """Select kept ids and map every dropped id onto one of them.

    ``teacher_emb`` must be the pre-trained teacher's vocabulary matrix.
    """
    kind = SimilarityKind(kind)
    W = _as_array(teacher_emb)
    if W.shape[0] != len(vocab):
        raise ConfigError("teacher", f"embedding has {W.shape[0]} rows, vocabulary has {len(vocab)}")
    kept = select_kept(vocab.freq, r_v, vocab.special_ids)
    remap = np.arange(len(vocab), dtype=np.int64)
    kept_set = set(kept)
    dropped = [i for i in range(len(vocab)) if i not in kept_set]
    if dropped:
        if kind is SimilarityKind.UNK_REPLACE:
            remap[dropped] = vocab.unk_id
        else:
            K = W[kept]
            if kind is SimilarityKind.INNER_PRODUCT:
                scores = W[dropped] @ K.T
            elif kind is SimilarityKind.COSINE:
                Kn = np.linalg.norm(K, axis=1)
                Dn = np.linalg.norm(W[dropped], axis=1)
                denom = Dn[:, None] * Kn[None, :]
                scores = (W[dropped] @ K.T) / np.where(denom == 0.0, 1.0, denom)
            else:
                diff = W[dropped][:, None, :] - K[None, :, :]
                scores = -np.sqrt((diff * diff).sum(axis=-1))
            remap[dropped] = np.asarray(kept)[np.argmax(scores, axis=1)]
    return CompressionMap(len(vocab), r_v, kept, remap, kind)


def apply_to_batch(batch: Batch, cmap: CompressionMap, side: str = "student") -> Batch:
    """Rewrite a batch for the given side.

    Student inputs and targets are remapped and re-indexed into the
    compressed vocabulary. Teacher batches are returned unchanged.
    """
    if side == "teacher":
        return batch
    if side != "student":
        raise ContractError(f"side must be 'student' or 'teacher', got {side!r}")
    out = batch.copy()
    out.x = cmap.student_ids(batch.x)
    has_target = batch.targets != NO_TARGET
    out.targets = np.where(has_target, cmap.student_ids(np.where(has_target, batch.targets, 0)), NO_TARGET)
    return out


def map_teacher_tokens(batch: Batch, cmap: CompressionMap) -> Batch:
    """Replace dropped ids in the teacher's input by their mapped kept id (original id space).

    Only used by the teacher-side token-mapping ablation.
    """
    out = batch.copy()
    out.x = cmap.remap[batch.x]
    return out


def compress_model(model: TransformerModel, cmap: CompressionMap) -> TransformerModel:
    """Copy of ``model`` with its vocabulary matrix sliced to the kept rows."""
    if model.config.vocab != cmap.v:
        raise ConfigError("vocab", f"model vocabulary {model.config.vocab} differs from map size {cmap.v}")
    out = model.clone()
    out.config.vocab = cmap.size
    out.params["tok_emb"] = Tensor(weight_mapping(model.tok_emb, cmap.kept), requires_grad=True)
    out.set_verbalizer([int(cmap.new_id[cmap.remap[t]]) for t in model.verbalizer])
    return out
