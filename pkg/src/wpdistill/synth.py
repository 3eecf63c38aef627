"""Seeded synthetic data: a Zipfian bigram corpus and a two-class cloze task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TaskExample

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

VERBALIZER_WORDS = ["yes", "no"]


def word_forms(n: int) -> list[str]:
    """``n`` distinct pronounceable lowercase words, deterministic."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    if n > len(syllables) * (len(syllables) + 1):
        raise ValueError(f"cannot build {n} distinct words")
    out = list(syllables[:n])
    for a in syllables:
        for b in syllables:
            if len(out) >= n:
                return out
            out.append(a + b)
    return out


@dataclass
class ZipfLanguage:
    words: list[str]
    unigram: np.ndarray        # Zipf marginal
    successors: np.ndarray     # n x k preferred next-word indices
    follow_prob: float

    @classmethod
    def create(cls, n_types: int = 400, exponent: float = 1.1, n_successors: int = 3,
               follow_prob: float = 0.6, seed: int = 0) -> "ZipfLanguage":
        rng = np.random.default_rng(seed)
        ranks = np.arange(1, n_types + 1, dtype=np.float64)
        unigram = ranks ** -exponent
        unigram /= unigram.sum()
        successors = rng.choice(n_types, size=(n_types, n_successors), p=unigram)
        return cls(word_forms(n_types), unigram, successors, follow_prob)

    def sample(self, length: int, rng: np.random.Generator) -> list[str]:
        n = len(self.words)
        idx = [int(rng.choice(n, p=self.unigram))]
        for _ in range(length - 1):
            if rng.random() < self.follow_prob:
                idx.append(int(self.successors[idx[-1], rng.integers(self.successors.shape[1])]))
            else:
                idx.append(int(rng.choice(n, p=self.unigram)))
        return [self.words[i] for i in idx]


def zipf_corpus(n_docs: int, lang: ZipfLanguage, min_len: int = 24, max_len: int = 64,
                seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(lang.sample(int(rng.integers(min_len, max_len + 1)), rng)) for _ in range(n_docs)]


def corpus_of_size(n_bytes: int, lang: ZipfLanguage, seed: int = 0, **kw) -> list[str]:
    """Documents totalling roughly ``n_bytes`` of UTF-8 text."""
    rng = np.random.default_rng(seed)
    docs, total = [], 0
    min_len, max_len = kw.get("min_len", 24), kw.get("max_len", 64)
    while total < n_bytes:
        doc = " ".join(lang.sample(int(rng.integers(min_len, max_len + 1)), rng))
        docs.append(doc)
        total += len(doc.encode("utf-8")) + 1
    return docs


def cue_sets(cue_rank_range: tuple[int, int] = (8, 40), n_cues: int = 4, seed: int = 0) -> list[np.ndarray]:
    """Word indices signalling each class; fixed by ``seed`` so train and eval splits agree."""
    lo, hi = cue_rank_range
    pool = np.random.default_rng(seed).permutation(np.arange(lo, hi))[: 2 * n_cues]
    return [pool[:n_cues], pool[n_cues:]]


def cloze_task(n: int, lang: ZipfLanguage, cues: list[np.ndarray] | None = None,
               text_len: tuple[int, int] = (6, 14), seed: int = 0) -> list[TaskExample]:
    """Two-class examples: the label is the class whose cue words dominate the text.

    Cue words are drawn from mid-frequency corpus words, so they survive
    vocabulary compression. Each text mixes filler corpus words with one
    to three cues of its class and possibly one cue of the other class.
    """
    cues = cues if cues is not None else cue_sets()
    cue_words = {lang.words[int(i)] for c in cues for i in c}
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(2))
        words = [w for w in lang.sample(int(rng.integers(*text_len)), rng) if w not in cue_words]
        own = int(rng.integers(1, 4))
        other = int(rng.integers(0, own))
        inserts = [lang.words[int(rng.choice(cues[label]))] for _ in range(own)]
        inserts += [lang.words[int(rng.choice(cues[1 - label]))] for _ in range(other)]
        for w in inserts:
            words.insert(int(rng.integers(len(words) + 1)), w)
        out.append(TaskExample(words, label))
    return out
