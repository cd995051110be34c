"""Synthetic token corpora with known entropy.

Ids 0 and 1 stay reserved (start/rest) so the corpora are drop-in
replacements for tokenized MIDI.

* ``markov``: a 2-state chain; state 0 emits uniformly from ids 1..7,
  state 1 from ids 8..15 (vocab 16). The state is visible from the token.
* ``chords``: a 4-chord progression, one chord per 4-token bar. Bar starts
  take a chord tone, other steps move the melody a semitone up or down.
  Token = 2 + 12 * chord + melody pitch class (vocab 50). The validation
  split covers most legal 4-grams, so BLEU tracks grammaticality.
* ``motif``: one of 8 fixed motifs of length 4, repeated (vocab 18).
"""

from __future__ import annotations

import math

import numpy as np

MARKOV_TRANSITIONS = np.array([[0.8, 0.2], [0.3, 0.7]])
MARKOV_EMITS = (np.arange(1, 8), np.arange(8, 16))

CHORD_COUNT = 4
BAR = 4
CHORD_TONES = (0, 4, 7)
MELODY_STEPS = (-1, 1)

MOTIF_COUNT = 8
MOTIF_LEN = 4

GRAMMARS = ("markov", "chords", "motif")


def _entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def markov_stationary() -> np.ndarray:
    vals, vecs = np.linalg.eig(MARKOV_TRANSITIONS.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return pi / pi.sum()


def vocab_size(grammar: str) -> int:
    return {"markov": 16, "chords": 2 + 12 * CHORD_COUNT, "motif": 2 + 16}[grammar]


def entropy_rate(grammar: str) -> float:
    """Asymptotic entropy per token in nats."""
    if grammar == "markov":
        pi = markov_stationary()
        emit = sum(pi[s] * math.log(len(MARKOV_EMITS[s])) for s in range(2))
        return float(sum(pi[s] * _entropy(MARKOV_TRANSITIONS[s]) for s in range(2)) + emit)
    if grammar == "chords":
        return (math.log(len(CHORD_TONES)) + (BAR - 1) * math.log(len(MELODY_STEPS))) / BAR
    if grammar == "motif":
        return 0.0
    raise ValueError(f"unknown grammar {grammar!r}")


def optimal_nll(grammar: str, seq_len: int) -> float:
    """Expected per-token NLL of the true model on sequences of ``seq_len`` tokens.

    This is the mean of the per-position conditional entropies, so it
    includes the extra uncertainty of the first token(s).
    """
    if grammar == "markov":
        pi = markov_stationary()
        emit = sum(pi[s] * math.log(len(MARKOV_EMITS[s])) for s in range(2))
        first = _entropy(pi) + emit
        return (first + (seq_len - 1) * entropy_rate("markov")) / seq_len
    if grammar == "chords":
        total = math.log(CHORD_COUNT)
        for pos in range(seq_len):
            total += math.log(len(CHORD_TONES)) if pos % BAR == 0 else math.log(len(MELODY_STEPS))
        return total / seq_len
    if grammar == "motif":
        return (math.log(MOTIF_COUNT) + math.log(MOTIF_LEN)) / seq_len
    raise ValueError(f"unknown grammar {grammar!r}")


def _markov(n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, seq_len), dtype=np.int64)
    pi = markov_stationary()
    for i in range(n):
        state = int(rng.random() >= pi[0])
        for t in range(seq_len):
            if t:
                state = int(rng.random() >= MARKOV_TRANSITIONS[state, 0])
            out[i, t] = rng.choice(MARKOV_EMITS[state])
    return out


def _chords(n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, seq_len), dtype=np.int64)
    for i in range(n):
        chord = int(rng.integers(CHORD_COUNT))
        pc = 0
        for t in range(seq_len):
            if t % BAR == 0:
                if t:
                    chord = (chord + 1) % CHORD_COUNT
                pc = (5 * chord + CHORD_TONES[rng.integers(len(CHORD_TONES))]) % 12
            else:
                pc = (pc + MELODY_STEPS[rng.integers(len(MELODY_STEPS))]) % 12
            out[i, t] = 2 + 12 * chord + pc
    return out


def _motif_table() -> np.ndarray:
    table = np.random.default_rng(12345).integers(2, 18, size=(MOTIF_COUNT, MOTIF_LEN))
    return table


def _motif(n: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    table = _motif_table()
    out = np.empty((n, seq_len), dtype=np.int64)
    for i in range(n):
        motif = table[rng.integers(MOTIF_COUNT)]
        phase = int(rng.integers(MOTIF_LEN))
        out[i] = motif[(np.arange(seq_len) + phase) % MOTIF_LEN]
    return out


def generate(grammar: str, n_pieces: int, seq_len: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    try:
        fn = {"markov": _markov, "chords": _chords, "motif": _motif}[grammar]
    except KeyError:
        raise ValueError(f"unknown grammar {grammar!r}; choose from {GRAMMARS}") from None
    return fn(n_pieces, seq_len, rng)
