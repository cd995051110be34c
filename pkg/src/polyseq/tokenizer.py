"""Melody/chord streams to vocabulary words and dense token ids.

A word packs one time segment: its duration on a 1/12-quarter grid, the
melody note (octave and pitch class, or rest) and the chord (octave of the
lowest chord note and pitch-class set, or none). Token id 0 is the start
token and id 1 the rest token; a rest segment without chord becomes one
rest token per grid step.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .midi_codec import ChordSpan, MidiPiece, TimedNote, classify_tracks

logger = logging.getLogger(__name__)

QUANTA_PER_QUARTER = 12
MAX_DURATION_Q = 96
DEFAULT_MIN_COUNT = 10

START_ID = 0
REST_ID = 1
NUM_RESERVED = 2

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


class TokenizerError(ValueError):
    pass


class EmptyPiece(TokenizerError):
    pass


class EmptyVocabulary(TokenizerError):
    pass


class OutOfVocabulary(TokenizerError, KeyError):
    def __init__(self, word, position: int):
        super().__init__(f"word {word} at position {position} is not in the vocabulary")
        self.word = word
        self.position = position

    __str__ = ValueError.__str__


class UnknownToken(TokenizerError):
    pass


class Word(NamedTuple):
    """One token's content. ``None`` stands for REST (melody) or NONE (chord)."""

    duration_q: int
    mel_octave: int | None
    mel_pc: int | None
    chord_octave: int | None
    chord_pcs: tuple[int, ...] | None

    @property
    def is_rest(self) -> bool:
        return self.mel_pc is None and self.chord_pcs is None

    @property
    def mel_pitch(self) -> int | None:
        if self.mel_pc is None:
            return None
        return (self.mel_octave + 1) * 12 + self.mel_pc

    def chord_pitches(self) -> frozenset[int] | None:
        """Close-position voicing starting in ``chord_octave``."""
        if self.chord_pcs is None:
            return None
        base = (self.chord_octave + 1) * 12
        return frozenset(base + pc for pc in self.chord_pcs)

    def validate(self) -> None:
        if self.duration_q < 1:
            raise TokenizerError(f"duration must be >= 1 quantum: {self}")
        if (self.mel_octave is None) != (self.mel_pc is None):
            raise TokenizerError(f"melody octave/pitch class must both be REST: {self}")
        if (self.chord_octave is None) != (self.chord_pcs is None):
            raise TokenizerError(f"chord octave/pitch set must both be NONE: {self}")
        if self.mel_pc is not None and not 0 <= self.mel_pitch <= 127:
            raise TokenizerError(f"melody pitch out of MIDI range: {self}")
        if self.chord_pcs is not None:
            if not self.chord_pcs or list(self.chord_pcs) != sorted(set(self.chord_pcs)):
                raise TokenizerError(f"chord pitch classes must be sorted and unique: {self}")
            if max(self.chord_pitches()) > 127 or self.chord_octave < -1:
                raise TokenizerError(f"chord voicing out of MIDI range: {self}")


REST_WORD = Word(1, None, None, None, None)


def split_pitch(pitch: int) -> tuple[int, int]:
    """MIDI pitch to (octave, pitch class) with 60 = C4."""
    return pitch // 12 - 1, pitch % 12


def chord_key(pitches: Iterable[int]) -> tuple[int, tuple[int, ...]]:
    pitches = list(pitches)
    octave, _ = split_pitch(min(pitches))
    return octave, tuple(sorted({p % 12 for p in pitches}))


def pcs_name(pcs: Sequence[int]) -> str:
    return "[" + ",".join(PITCH_CLASS_NAMES[pc] for pc in pcs) + "]"


def _word_key(word: Word) -> tuple:
    none = -99
    return (word.duration_q,
            none if word.mel_octave is None else word.mel_octave,
            none if word.mel_pc is None else word.mel_pc,
            none if word.chord_octave is None else word.chord_octave,
            word.chord_pcs or ())


# ---------------------------------------------------------------------------
# quantization and segmentation
# ---------------------------------------------------------------------------

def quantize_position(ticks: int, tpq: int) -> int:
    """Nearest grid step, halves rounded up."""
    return (2 * QUANTA_PER_QUARTER * ticks + tpq) // (2 * tpq)


def quantize_duration(ticks: int, tpq: int, stats: Counter | None = None) -> int:
    if ticks <= 0 or tpq <= 0:
        raise ValueError("ticks and tpq must be positive")
    q = quantize_position(ticks, tpq)
    if q < 1 or q > MAX_DURATION_Q:
        if stats is not None:
            stats["clamped"] += 1
        q = min(max(q, 1), MAX_DURATION_Q)
    return q


@dataclass(frozen=True)
class Segment:
    onset_q: int
    duration_q: int
    melody: int | None  # MIDI pitch or rest
    chord: frozenset[int] | None

    @property
    def offset_q(self) -> int:
        return self.onset_q + self.duration_q


def segment(melody: Sequence[TimedNote], chords: Sequence[ChordSpan], tpq: int) -> list[Segment]:
    """Cut the piece at every quantized melody/chord boundary.

    Neighbouring intervals are merged when they hold the same melody note
    and the same chord word content, and pieces longer than the maximum
    word duration are split. The result tiles ``[0, end)``.
    """
    mel_q = []
    for note in melody:
        on, off = quantize_position(note.onset, tpq), quantize_position(note.offset, tpq)
        if off > on:
            mel_q.append((on, off, note.pitch))
    mel_q.sort()
    for i in range(len(mel_q) - 1):
        on, off, pitch = mel_q[i]
        if off > mel_q[i + 1][0]:
            mel_q[i] = (on, mel_q[i + 1][0], pitch)
    mel_q = [m for m in mel_q if m[1] > m[0]]

    chord_q = []
    for span in chords:
        on, off = quantize_position(span.onset, tpq), quantize_position(span.offset, tpq)
        if off > on and span.pitches:
            chord_q.append((on, off, span.pitches))
    if not mel_q and not chord_q:
        raise EmptyPiece("piece has no notes after quantization")

    cuts = {0}
    for on, off, _ in mel_q:
        cuts.update((on, off))
    for on, off, _ in chord_q:
        cuts.update((on, off))
    cuts = sorted(cuts)

    starts: dict[int, list[int]] = {}
    for i, (on, _, _) in enumerate(chord_q):
        starts.setdefault(on, []).append(i)
    active: set[int] = set()
    mi = 0
    raw = []  # (onset, duration, melody index, chord pitches)
    for a, b in zip(cuts, cuts[1:]):
        active = {i for i in active if chord_q[i][1] > a}
        active.update(starts.get(a, ()))
        while mi < len(mel_q) and mel_q[mi][1] <= a:
            mi += 1
        mel = mi if mi < len(mel_q) and mel_q[mi][0] <= a else None
        pitches = frozenset().union(*(chord_q[i][2] for i in active)) if active else None
        raw.append((a, b - a, mel, pitches))

    merged: list[list] = []
    for a, dur, mel, pitches in raw:
        key = (mel, None if pitches is None else chord_key(pitches))
        if merged and merged[-1][4] == key:
            merged[-1][1] += dur
        else:
            merged.append([a, dur, mel, pitches, key])

    out = []
    for a, dur, mel, pitches, _ in merged:
        pitch = None if mel is None else mel_q[mel][2]
        while dur > 0:
            step = min(dur, MAX_DURATION_Q)
            out.append(Segment(a, step, pitch, pitches))
            a += step
            dur -= step
    return out


def segments_to_words(segments: Iterable[Segment]) -> list[Word]:
    words = []
    for seg in segments:
        if seg.melody is None and seg.chord is None:
            words.extend([REST_WORD] * seg.duration_q)
            continue
        mel_oct, mel_pc = (None, None) if seg.melody is None else split_pitch(seg.melody)
        ch_oct, ch_pcs = (None, None) if seg.chord is None else chord_key(seg.chord)
        words.append(Word(seg.duration_q, mel_oct, mel_pc, ch_oct, ch_pcs))
    return words


def streams_to_words(melody, chords, tpq: int) -> list[Word]:
    return segments_to_words(segment(melody, chords, tpq))


def tokenize_piece(piece: MidiPiece, **classify_kw) -> list[Word]:
    melody, chords = classify_tracks(piece, **classify_kw)
    return streams_to_words(melody, chords, piece.ticks_per_quarter)


def total_duration_q(words: Iterable[Word]) -> int:
    return sum(w.duration_q for w in words)


def words_to_streams(words: Sequence[Word], tpq: int) -> tuple[list[TimedNote], list[ChordSpan]]:
    """Rebuild melody notes and chord spans; equal adjacent chords merge."""
    def ticks(q: int) -> int:
        return (q * tpq + QUANTA_PER_QUARTER // 2) // QUANTA_PER_QUARTER

    melody: list[TimedNote] = []
    chords: list[ChordSpan] = []
    chord_start = None
    chord_word = None
    pos = 0

    def flush(end: int) -> None:
        if chord_word is not None:
            on = ticks(chord_start)
            chords.append(ChordSpan(on, ticks(end) - on, chord_word.chord_pitches()))

    for word in words:
        word.validate()
        end = pos + word.duration_q
        if word.mel_pc is not None:
            on = ticks(pos)
            melody.append(TimedNote(on, ticks(end) - on, word.mel_pitch))
        key = None if word.chord_pcs is None else (word.chord_octave, word.chord_pcs)
        prev = None if chord_word is None else (chord_word.chord_octave, chord_word.chord_pcs)
        if key != prev:
            flush(pos)
            chord_start, chord_word = (pos, word) if key is not None else (None, None)
        pos = end
    flush(pos)
    return melody, chords


# ---------------------------------------------------------------------------
# chord index and vocabulary
# ---------------------------------------------------------------------------

class ChordIndex:
    """Dense ids for pitch-class sets, most frequent first."""

    def __init__(self, sets: Iterable[tuple[int, ...]] = ()):
        self._sets: list[tuple[int, ...]] = []
        self._ids: dict[tuple[int, ...], int] = {}
        for pcs in sets:
            self.add(pcs)

    def add(self, pcs: tuple[int, ...]) -> int:
        pcs = tuple(pcs)
        if pcs not in self._ids:
            self._ids[pcs] = len(self._sets)
            self._sets.append(pcs)
        return self._ids[pcs]

    @classmethod
    def from_corpus(cls, corpus: Iterable[Iterable[Word]]) -> "ChordIndex":
        counts = Counter(w.chord_pcs for piece in corpus for w in piece if w.chord_pcs is not None)
        return cls(sorted(counts, key=lambda pcs: (-counts[pcs], pcs)))

    def id_of(self, pcs: tuple[int, ...]) -> int:
        return self._ids[tuple(pcs)]

    def pcs_of(self, chord_id: int) -> tuple[int, ...]:
        return self._sets[chord_id]

    def __len__(self) -> int:
        return len(self._sets)

    def __contains__(self, pcs) -> bool:
        return tuple(pcs) in self._ids


class Vocabulary:
    """Bijection between admitted words and token ids 2..n-1.

    Id 0 is the start token and never encodes content; id 1 is the rest
    token.
    """

    def __init__(self, words: Sequence[Word], counts: dict[Word, int] | None = None):
        counts = counts or {}
        self._words: list[Word | None] = [None, REST_WORD]
        self._ids: dict[Word, int] = {REST_WORD: REST_ID}
        self._counts: list[int] = [0, counts.get(REST_WORD, 0)]
        for word in words:
            if word in self._ids:
                raise ValueError(f"duplicate word {word}")
            self._ids[word] = len(self._words)
            self._words.append(word)
            self._counts.append(counts.get(word, 0))

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word) -> bool:
        return word in self._ids

    def id_of(self, word: Word) -> int:
        return self._ids[word]

    def word_of(self, token: int) -> Word:
        if not START_ID < token < len(self._words):
            raise UnknownToken(f"token id {token} is not a content token (vocab size {len(self)})")
        return self._words[token]

    def count(self, token: int) -> int:
        return self._counts[token]

    def words(self) -> list[Word]:
        return list(self._words[NUM_RESERVED:])

    def chord_index(self) -> ChordIndex:
        return ChordIndex.from_corpus([self.words()])

    def encode(self, words: Sequence[Word]) -> list[int]:
        return encode(words, self)

    def decode(self, ids: Sequence[int]) -> list[Word]:
        return decode(ids, self)

    def save(self, path) -> None:
        Path(path).write_text(dumps_vocab(self))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return loads_vocab(Path(path).read_text())


def build_vocab(corpus: Sequence[Sequence[Word]], min_count: int = DEFAULT_MIN_COUNT
                ) -> tuple[Vocabulary, list[int]]:
    """Admit words seen at least ``min_count`` times corpus-wide.

    Returns the vocabulary and the indices of pieces whose words are all
    admitted; every other piece is excluded from training.
    """
    if not corpus:
        raise EmptyVocabulary("corpus is empty")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(w for piece in corpus for w in piece)
    admitted = {w for w, c in counts.items() if c >= min_count} | {REST_WORD}
    kept = [i for i, piece in enumerate(corpus) if piece and all(w in admitted for w in piece)]
    if not kept:
        raise EmptyVocabulary(f"no piece survives min_count={min_count}")
    words = sorted((w for w in admitted if w != REST_WORD), key=lambda w: (-counts[w], _word_key(w)))
    logger.info("vocabulary: %d words admitted, %d/%d pieces kept",
                len(words) + NUM_RESERVED, len(kept), len(corpus))
    return Vocabulary(words, counts), kept


def encode(words: Sequence[Word], vocab: Vocabulary) -> list[int]:
    out = []
    for i, word in enumerate(words):
        try:
            out.append(vocab.id_of(word))
        except KeyError:
            raise OutOfVocabulary(word, i) from None
    return out


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[Word]:
    return [vocab.word_of(int(t)) for t in ids]


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def _field(value, none: str) -> str:
    return none if value is None else str(value)


def dumps_vocab(vocab: Vocabulary) -> str:
    lines = [f"{START_ID}\t-\t-\t-\t-\t-\t0"]
    for token in range(REST_ID, len(vocab)):
        w = vocab.word_of(token)
        pcs = "-" if w.chord_pcs is None else ",".join(map(str, w.chord_pcs))
        lines.append("\t".join([
            str(token), str(w.duration_q),
            _field(w.mel_octave, "R"), _field(w.mel_pc, "R"),
            _field(w.chord_octave, "-"), pcs, str(vocab.count(token)),
        ]))
    return "\n".join(lines) + "\n"


def loads_vocab(text: str) -> Vocabulary:
    words, counts = [], {}
    rest_count = 0
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise ValueError(f"vocab line {lineno + 1}: expected 7 columns, got {len(cols)}")
        token = int(cols[0])
        if token == START_ID:
            continue
        mel_oct = None if cols[2] == "R" else int(cols[2])
        mel_pc = None if cols[3] == "R" else int(cols[3])
        ch_oct = None if cols[4] == "-" else int(cols[4])
        pcs = None if cols[5] == "-" else tuple(int(p) for p in cols[5].split(","))
        word = Word(int(cols[1]), mel_oct, mel_pc, ch_oct, pcs)
        if token == REST_ID:
            if word != REST_WORD:
                raise ValueError("vocab id 1 must be the rest token")
            rest_count = int(cols[6])
            continue
        if token != len(words) + NUM_RESERVED:
            raise ValueError(f"vocab line {lineno + 1}: ids must be contiguous")
        words.append(word)
        counts[word] = int(cols[6])
    counts[REST_WORD] = rest_count
    return Vocabulary(words, counts)


def dumps_corpus(corpus: Iterable[Sequence[int]]) -> str:
    return "".join(" ".join(str(int(t)) for t in piece) + "\n" for piece in corpus)


def loads_corpus(text: str) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in text.splitlines() if line.strip()]


def save_corpus(path, corpus) -> None:
    Path(path).write_text(dumps_corpus(corpus))


def load_corpus(path) -> list[list[int]]:
    return loads_corpus(Path(path).read_text())
