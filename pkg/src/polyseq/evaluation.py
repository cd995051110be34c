"""Corpus BLEU-4, validation NLL and corpus statistics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .generator import StartMode, sequence_nll
from .neural_core import ParamSet
from .tokenizer import NUM_RESERVED, Vocabulary, pcs_name

MAX_ORDER = 4
SMOOTHING = 1e-9

# pitch-set occurrence buckets, largest first
CHORD_BUCKETS = (
    (10001, None), (5000, 10000), (2000, 4999), (1000, 1999), (500, 999),
    (250, 499), (100, 249), (10, 99), (1, 9),
)


class EmptyCorpus(ValueError):
    pass


@dataclass
class BleuReport:
    bleu4: float
    precisions: list[float]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)

    def tsv(self) -> str:
        cols = [self.bleu4, *self.precisions, self.brevity_penalty]
        return "\t".join(f"{x:.6f}" for x in cols) + f"\t{self.candidate_length}\t{self.reference_length}"

    def summary(self) -> str:
        p = ", ".join(f"p{n + 1}={x:.4f}" for n, x in enumerate(self.precisions))
        return (f"BLEU-4 {self.bleu4:.4f} ({p}; BP={self.brevity_penalty:.4f}; "
                f"candidate tokens {self.candidate_length}, reference tokens {self.reference_length})")


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidates: Iterable[Sequence[int]], references: Iterable[Sequence[int]]) -> BleuReport:
    """Corpus BLEU-4 with the whole reference corpus as every candidate's reference set."""
    cands = [tuple(int(t) for t in c) for c in candidates]
    refs = [tuple(int(t) for t in r) for r in references]
    if not cands or not refs:
        raise EmptyCorpus("BLEU needs at least one candidate and one reference")

    max_ref = [Counter() for _ in range(MAX_ORDER)]
    for ref in refs:
        for n in range(MAX_ORDER):
            for gram, count in _ngrams(ref, n + 1).items():
                if count > max_ref[n][gram]:
                    max_ref[n][gram] = count
    ref_lengths = sorted({len(r) for r in refs})

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    cand_len = ref_len = 0
    for cand in cands:
        cand_len += len(cand)
        ref_len += min(ref_lengths, key=lambda r: (abs(r - len(cand)), r))
        for n in range(MAX_ORDER):
            grams = _ngrams(cand, n + 1)
            totals[n] += sum(grams.values())
            matches[n] += sum(min(c, max_ref[n][g]) for g, c in grams.items())

    precisions = [m / t if t and m else SMOOTHING for m, t in zip(matches, totals)]
    if cand_len == 0:
        bp = 0.0
    elif cand_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / cand_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, bp, cand_len, ref_len, matches, totals)


def validation_nll(params: ParamSet, corpus: np.ndarray, mode: StartMode = StartMode.UNCONDITIONAL,
                   batch_size: int = 256) -> float:
    """Teacher-forced NLL in nats/token; no dropout, no updates."""
    corpus = np.asarray(corpus)
    if len(corpus) == 0:
        raise EmptyCorpus("validation corpus is empty")
    total = 0.0
    count = 0
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i:i + batch_size]
        scored = chunk.shape[0] * (chunk.shape[1] - StartMode(mode).offset)
        total += sequence_nll(params, chunk, mode) * scored
        count += scored
    return total / count


@dataclass
class CorpusStats:
    pieces: int = 0
    tokens: int = 0
    vocab_size: int = 0
    top_words: list[tuple[int, int]] = field(default_factory=list)
    chord_counts: dict[tuple[int, ...], int] = field(default_factory=dict)
    chord_histogram: dict[str, list[str]] = field(default_factory=dict)


def bucket_label(lo: int, hi: int | None) -> str:
    return f">{lo - 1}" if hi is None else f"{lo}-{hi}"


def chord_histogram(chord_counts: dict[tuple[int, ...], int]) -> dict[str, list[str]]:
    hist: dict[str, list[str]] = {}
    for pcs, count in sorted(chord_counts.items(), key=lambda kv: (-kv[1], kv[0])):
        for lo, hi in CHORD_BUCKETS:
            if count >= lo and (hi is None or count <= hi):
                hist.setdefault(bucket_label(lo, hi), []).append(pcs_name(pcs))
                break
    return hist


def corpus_stats(corpus: Sequence[Sequence[int]], vocab: Vocabulary | None, top_k: int = 10) -> CorpusStats:
    """Exact token and chord pitch-set tallies over an encoded corpus."""
    counts = Counter(int(t) for piece in corpus for t in piece)
    stats = CorpusStats(
        pieces=len(corpus),
        tokens=sum(counts.values()),
        vocab_size=len(vocab) if vocab is not None else 0,
        top_words=sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k],
    )
    if vocab is not None:
        chords: Counter = Counter()
        for token, count in counts.items():
            if token >= NUM_RESERVED:
                word = vocab.word_of(token)
                if word.chord_pcs is not None:
                    chords[word.chord_pcs] += count
        stats.chord_counts = dict(chords)
        stats.chord_histogram = chord_histogram(stats.chord_counts)
    return stats
