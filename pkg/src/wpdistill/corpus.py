"""Whitespace tokenization, frequency-counted vocabularies and batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError, LabelError, VocabularyError

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
BASE_SPECIALS = (PAD, MASK, UNK)

# position classes
CLS_PAD, CLS_MASKED, CLS_UNMASKED = 0, 1, 2

NO_TARGET = -1


def tokenize(line: str) -> list[str]:
    return line.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    freq: list[int]
    specials: tuple[str, ...] = BASE_SPECIALS
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        if len(self.freq) != len(self.tokens):
            raise VocabularyError("freq table length differs from token list")
        for tok in BASE_SPECIALS:
            if tok not in self.index:
                raise VocabularyError(f"missing special token {tok}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def special_ids(self) -> list[int]:
        return [self.index[t] for t in self.specials]

    def id_of(self, token: str) -> int:
        if token in self.index:
            return self.index[token]
        return self.index.get(token.lower(), self.unk_id)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        toks = tokenize(text) if isinstance(text, str) else text
        return [self.id_of(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, n in zip(self.tokens, self.freq):
                fh.write(f"{tok}\t{n}\n")

    @classmethod
    def load(cls, path: str | Path, specials: Sequence[str] | None = None) -> "Vocabulary":
        tokens, freq = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, n = line.rsplit("\t", 1)
                tokens.append(tok)
                freq.append(int(n))
        if specials is None:
            # specials are stored first, followed by ordinary tokens in frequency order
            specials = tuple(t for t in tokens if t in BASE_SPECIALS)
        return cls(tokens, freq, tuple(specials))


def build_vocab(corpus: Iterable[str], max_size: int, extra_specials: Sequence[str] = ()) -> Vocabulary:
    """Count whitespace tokens and keep the most frequent ones.

    Specials come first (PAD, MASK, UNK, then ``extra_specials``), followed
    by ordinary tokens sorted by descending count (ties alphabetical).
    Occurrences of dropped tokens are credited to UNK so that the
    frequency table sums to the corpus token count.
    """
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(tokenize(line))
    if not counts:
        raise InputError("empty corpus")
    specials = list(BASE_SPECIALS)
    for tok in extra_specials:
        if tok not in specials:
            specials.append(tok)
    if max_size < len(specials):
        raise ConfigError("max_size", f"{max_size} is smaller than the {len(specials)} special tokens")

    special_set = set(specials)
    ranked = sorted((t for t in counts if t not in special_set), key=lambda t: (-counts[t], t))
    kept = ranked[: max_size - len(specials)]
    dropped = sum(counts[t] for t in ranked[len(kept):])

    tokens = specials + kept
    freq = [counts.get(t, 0) for t in tokens]
    freq[tokens.index(UNK)] += dropped
    return Vocabulary(tokens, freq, tuple(specials))


def read_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


@dataclass
class Batch:
    x: np.ndarray                 # B x l token ids
    classes: np.ndarray           # B x l, CLS_PAD / CLS_MASKED / CLS_UNMASKED
    targets: np.ndarray           # B x l, original id at MASKED positions, NO_TARGET elsewhere
    blank_position: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def pad_mask(self) -> np.ndarray:
        return self.classes == CLS_PAD

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    def copy(self) -> "Batch":
        return Batch(self.x.copy(), self.classes.copy(), self.targets.copy(),
                     None if self.blank_position is None else self.blank_position.copy(),
                     None if self.labels is None else self.labels.copy())

    def validate(self, mask_id: int) -> None:
        masked = self.classes == CLS_MASKED
        if not np.array_equal(self.x == mask_id, masked):
            raise InputError("MASK ids and MASKED classes disagree")
        if not np.array_equal(self.targets != NO_TARGET, masked):
            raise InputError("targets must be defined exactly at MASKED positions")


def stack_batches(rows: Sequence[Batch]) -> Batch:
    blank = None if rows[0].blank_position is None else np.concatenate([r.blank_position for r in rows])
    labels = None if rows[0].labels is None else np.concatenate([r.labels for r in rows])
    return Batch(np.concatenate([r.x for r in rows]), np.concatenate([r.classes for r in rows]),
                 np.concatenate([r.targets for r in rows]), blank, labels)


def chunk_documents(vocab: Vocabulary, corpus: Iterable[str], l: int) -> list[list[int]]:
    seqs = []
    for line in corpus:
        ids = vocab.encode(line)
        for start in range(0, len(ids), l):
            seqs.append(ids[start:start + l])
    return seqs


def mask_sequences(vocab: Vocabulary, seqs: Sequence[Sequence[int]], l: int,
                   mask_rate: float, rng: np.random.Generator) -> Batch:
    B = len(seqs)
    x = np.full((B, l), vocab.pad_id, dtype=np.int64)
    classes = np.full((B, l), CLS_PAD, dtype=np.int8)
    for b, s in enumerate(seqs):
        x[b, :len(s)] = s
        classes[b, :len(s)] = CLS_UNMASKED
    draw = rng.random((B, l)) < mask_rate
    masked = draw & (classes == CLS_UNMASKED)
    targets = np.where(masked, x, NO_TARGET)
    x = np.where(masked, vocab.mask_id, x)
    classes = np.where(masked, CLS_MASKED, classes).astype(np.int8)
    return Batch(x, classes, targets)


def make_mlm_batches(
    vocab: Vocabulary,
    corpus: Iterable[str],
    l: int,
    B: int,
    mask_rate: float = 0.15,
    seed: int = 0,
    max_seq: int | None = None,
    shuffle: bool = True,
    repeat: bool = False,
    drop_last: bool = False,
) -> Iterator[Batch]:
    """Yield masked-LM batches.

    Each document is chunked into pieces of at most ``l`` ids and
    right-padded. Every non-pad position is replaced by MASK independently
    with probability ``mask_rate``. With ``repeat`` the stream cycles
    forever, reshuffling each epoch; output depends only on ``seed``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError("mask_rate", f"must lie in (0, 1), got {mask_rate}")
    if max_seq is not None and l > max_seq:
        raise ConfigError("seq_len", f"{l} exceeds max_seq={max_seq}")
    if B <= 0:
        raise ConfigError("batch_size", "must be positive")
    seqs = chunk_documents(vocab, corpus, l)
    if not seqs:
        raise InputError("corpus produced no sequences")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(seqs)) if shuffle else np.arange(len(seqs))
        for start in range(0, len(order), B):
            idx = order[start:start + B]
            if drop_last and len(idx) < B:
                break
            yield mask_sequences(vocab, [seqs[i] for i in idx], l, mask_rate, rng)
        if not repeat:
            return


@dataclass
class TaskExample:
    text: list[str]
    label: int


def read_task_file(path: str | Path) -> list[TaskExample]:
    """Task files hold one ``label<TAB>text`` record per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise InputError(f"{path}:{lineno}: expected 'label<TAB>text'")
            label, text = line.split("\t", 1)
            out.append(TaskExample(tokenize(text), int(label)))
    return out


def write_task_file(path: str | Path, examples: Iterable[TaskExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{' '.join(ex.text)}\n")


TEXT_SLOT = "[x]"
DEFAULT_TEMPLATE = "[x] : [MASK]"


def template_literals(template: str) -> list[str]:
    return [t for t in template.split() if t not in (TEXT_SLOT, MASK)]


def render_task(example: TaskExample, template: str, vocab: Vocabulary, l: int,
                verbalizer: Sequence[int]) -> Batch:
    """Render one example into a single-row batch with the blank slot MASKED.

    The target at the blank is the verbalizer token of the label. When the
    rendering does not fit in ``l`` positions, text tokens are dropped from
    the end of the text; template tokens and the blank are never cut.
    """
    parts = template.split()
    if parts.count(MASK) != 1:
        raise ConfigError("template", f"needs exactly one {MASK} slot: {template!r}")
    if parts.count(TEXT_SLOT) > 1:
        raise ConfigError("template", f"at most one {TEXT_SLOT} slot allowed: {template!r}")
    if not 0 <= example.label < len(verbalizer):
        raise LabelError(f"label {example.label} outside verbalizer of size {len(verbalizer)}")
    fixed = len(parts) - parts.count(TEXT_SLOT)
    if fixed > l:
        raise ConfigError("seq_len", f"template needs {fixed} positions but l={l}")
    text_ids = vocab.encode(example.text)[: l - fixed]

    ids: list[int] = []
    blank = -1
    for part in parts:
        if part == TEXT_SLOT:
            ids.extend(text_ids)
        elif part == MASK:
            blank = len(ids)
            ids.append(vocab.mask_id)
        else:
            ids.append(vocab.id_of(part))
    x = np.full((1, l), vocab.pad_id, dtype=np.int64)
    classes = np.full((1, l), CLS_PAD, dtype=np.int8)
    x[0, :len(ids)] = ids
    classes[0, :len(ids)] = CLS_UNMASKED
    classes[0, blank] = CLS_MASKED
    targets = np.full((1, l), NO_TARGET, dtype=np.int64)
    targets[0, blank] = verbalizer[example.label]
    return Batch(x, classes, targets, np.array([blank]), np.array([example.label]))


def render_task_batch(examples: Sequence[TaskExample], template: str, vocab: Vocabulary, l: int,
                      verbalizer: Sequence[int]) -> Batch:
    return stack_batches([render_task(ex, template, vocab, l, verbalizer) for ex in examples])


def make_task_batches(examples: Sequence[TaskExample], template: str, vocab: Vocabulary, l: int,
                      verbalizer: Sequence[int], B: int, seed: int = 0, shuffle: bool = True,
                      repeat: bool = False) -> Iterator[Batch]:
    if not examples:
        raise InputError("no task examples")
    rendered = [render_task(ex, template, vocab, l, verbalizer) for ex in examples]
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(rendered)) if shuffle else np.arange(len(rendered))
        for start in range(0, len(order), B):
            yield stack_batches([rendered[i] for i in order[start:start + B]])
        if not repeat:
            return


def mask_task_batch(batch: Batch, mask_id: int, mask_rate: float, rng: np.random.Generator) -> Batch:
    """Apply the masked-LM policy to the text of a rendered task batch.

    The blank stays MASKED; other non-pad positions are masked independently
    with probability ``mask_rate`` and get their original id as target.
    """
    out = batch.copy()
    draw = (rng.random(out.x.shape) < mask_rate) & (out.classes == CLS_UNMASKED)
    out.targets = np.where(draw, out.x, out.targets)
    out.x = np.where(draw, mask_id, out.x)
    out.classes = np.where(draw, CLS_MASKED, out.classes).astype(np.int8)
    return out
