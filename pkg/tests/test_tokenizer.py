import math
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from polyseq.midi_codec import ChordSpan, TimedNote
from polyseq.tokenizer import (MAX_DURATION_Q, REST_ID, REST_WORD, START_ID, ChordIndex, EmptyPiece,
                               EmptyVocabulary, OutOfVocabulary, Segment, TokenizerError, UnknownToken,
                               Word, build_vocab, chord_key, decode, dumps_corpus, dumps_vocab, encode,
                               loads_corpus, loads_vocab, pcs_name, quantize_duration, segment,
                               segments_to_words, streams_to_words, words_to_streams)

TPQ = 480
Q = TPQ // 12  # ticks per quantum


def note(on_q, off_q, pitch):
    return TimedNote(on_q * Q, (off_q - on_q) * Q, pitch)


def chord(on_q, off_q, *pitches):
    return ChordSpan(on_q * Q, (off_q - on_q) * Q, frozenset(pitches))


class TestQuantize:
    @pytest.mark.parametrize("ticks,expected", [(480, 12), (240, 6), (250, 6), (1, 1), (480 * 100, 96)])
    def test_examples(self, ticks, expected):
        assert quantize_duration(ticks, 480) == expected

    def test_half_rounds_up(self):
        # 30 ticks at tpq 480 is exactly 0.75 quanta; 20 ticks is exactly 0.5
        assert quantize_duration(20, 480) == 1
        assert quantize_duration(60, 480) == 2  # 1.5 -> 2

    def test_clamps_counted(self):
        stats = Counter()
        quantize_duration(5, 480, stats)
        quantize_duration(480 * 9, 480, stats)
        quantize_duration(480, 480, stats)
        assert stats["clamped"] == 2

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            quantize_duration(0, 480)


class TestSegment:
    def test_aligned(self):
        assert segment([note(0, 12, 60)], [chord(0, 12, 48, 52, 55)], TPQ) == [
            Segment(0, 12, 60, frozenset({48, 52, 55}))]

    def test_dummy_after_melody(self):
        segs = segment([note(0, 12, 60)], [chord(0, 24, 48, 52)], TPQ)
        assert [(s.onset_q, s.duration_q, s.melody) for s in segs] == [(0, 12, 60), (12, 12, None)]
        assert {s.chord for s in segs} == {frozenset({48, 52})}

    def test_two_notes_one_chord(self):
        segs = segment([note(0, 6, 60), note(6, 12, 62)], [chord(0, 12, 48, 52)], TPQ)
        assert [(s.duration_q, s.melody) for s in segs] == [(6, 60), (6, 62)]

    def test_leading_gap_is_rest(self):
        segs = segment([note(12, 24, 60)], [], TPQ)
        assert segs[0] == Segment(0, 12, None, None)

    def test_long_note_split(self):
        segs = segment([note(0, 200, 60)], [], TPQ)
        assert [s.duration_q for s in segs] == [96, 96, 8]

    def test_empty(self):
        with pytest.raises(EmptyPiece):
            segment([], [], TPQ)


def brute_force_segments(melody, chords, tpq):
    """Per-quantum state scan, then run-length grouping."""
    def qpos(t):
        return math.floor(Fraction(12 * t, tpq) + Fraction(1, 2))

    mel = sorted((qpos(n.onset), qpos(n.offset), n.pitch) for n in melody)
    mel = [(a, b, p) for a, b, p in mel if b > a]
    trimmed = []
    for i, (a, b, p) in enumerate(mel):
        if i + 1 < len(mel):
            b = min(b, mel[i + 1][0])
        if b > a:
            trimmed.append((a, b, p))
    chd = [(qpos(c.onset), qpos(c.offset), c.pitches) for c in chords]
    chd = [(a, b, p) for a, b, p in chd if b > a]
    end = max([b for _, b, _ in trimmed] + [b for _, b, _ in chd])
    states = []
    for q in range(end):
        m = [i for i, (a, b, _) in enumerate(trimmed) if a <= q < b]
        ps = set()
        for a, b, pitches in chd:
            if a <= q < b:
                ps |= pitches
        states.append((m[0] if m else None, chord_key(ps) if ps else None))
    out, q = [], 0
    while q < end:
        r = q
        while r < end and states[r] == states[q]:
            r += 1
        on = q
        while on < r:
            d = min(r - on, MAX_DURATION_Q)
            m, ck = states[q]
            out.append((on, d, None if m is None else trimmed[m][2], ck))
            on += d
        q = r
    return out


@st.composite
def raw_streams(draw):
    tpq = draw(st.sampled_from([96, 120, 480]))
    mel = [TimedNote(draw(st.integers(0, 8 * tpq)), draw(st.integers(1, 3 * tpq)), draw(st.integers(40, 90)))
           for _ in range(draw(st.integers(0, 6)))]
    chd = [ChordSpan(draw(st.integers(0, 8 * tpq)), draw(st.integers(1, 20 * tpq)),
                     frozenset(draw(st.sets(st.integers(30, 70), min_size=1, max_size=3))))
           for _ in range(draw(st.integers(0, 4)))]
    return sorted(mel), sorted(chd, key=lambda c: c.onset), tpq


@settings(max_examples=200, deadline=None)
@given(raw_streams())
def test_segment_matches_brute_force(args):
    mel, chd, tpq = args
    try:
        expected = brute_force_segments(mel, chd, tpq)
    except ValueError:  # nothing survives quantization
        with pytest.raises(EmptyPiece):
            segment(mel, chd, tpq)
        return
    if not expected:
        with pytest.raises(EmptyPiece):
            segment(mel, chd, tpq)
        return
    got = segment(mel, chd, tpq)
    assert [(s.onset_q, s.duration_q, s.melody, None if s.chord is None else chord_key(s.chord))
            for s in got] == expected
    # tiling
    assert got[0].onset_q == 0
    assert all(a.offset_q == b.onset_q for a, b in zip(got, got[1:]))


class TestWords:
    def test_c4(self):
        assert segments_to_words([Segment(0, 12, 60, None)]) == [Word(12, 4, 0, None, None)]

    def test_chord_word(self):
        w = segments_to_words([Segment(0, 6, None, frozenset({62, 67, 71}))])[0]
        # lowest note 62 is D4 under the 60 = C4 convention
        assert w == Word(6, None, None, 4, (2, 7, 11))
        assert pcs_name(w.chord_pcs) == "[D,G,B]"
        assert ChordIndex.from_corpus([[w]]).id_of((2, 7, 11)) == 0

    def test_rest_per_quantum(self):
        assert segments_to_words([Segment(0, 3, None, None)]) == [REST_WORD] * 3

    def test_words_to_streams_single(self):
        mel, chd = words_to_streams([Word(12, 4, 0, None, None)], TPQ)
        assert mel == [TimedNote(0, 480, 60)] and chd == []

    def test_dummy_pair_remerged(self):
        words = streams_to_words([note(0, 12, 60)], [chord(0, 24, 48, 52)], TPQ)
        assert len(words) == 2
        mel, chd = words_to_streams(words, TPQ)
        assert chd == [ChordSpan(0, 24 * Q, frozenset({48, 52}))]
        assert mel == [TimedNote(0, 12 * Q, 60)]

    def test_all_rest(self):
        assert words_to_streams([REST_WORD] * 5, TPQ) == ([], [])

    @pytest.mark.parametrize("word", [
        Word(0, 4, 0, None, None), Word(1, 4, None, None, None), Word(1, None, None, 3, None),
        Word(1, None, None, 3, (7, 2)), Word(1, 10, 0, None, None)])
    def test_invalid_words(self, word):
        with pytest.raises(TokenizerError):
            word.validate()


def corpus_of(words_with_counts):
    """One piece per word, repeated ``count`` times."""
    return [[w] * c for w, c in words_with_counts]


W1, W2, W3 = Word(12, 4, 0, None, None), Word(6, 4, 2, 3, (2, 7, 11)), Word(24, None, None, 2, (0, 4, 7))


class TestVocab:
    def test_no_filtering(self):
        vocab, kept = build_vocab(corpus_of([(W1, 10), (W2, 12), (W3, 11)]))
        assert len(vocab) == 5
        assert kept == [0, 1, 2]
        # frequency order
        assert [vocab.id_of(w) for w in (W2, W3, W1)] == [2, 3, 4]

    def test_rare_word_excludes_piece(self):
        corpus = [[W1] * 10, [W2] * 8, [W1, W2]]  # W2 seen 9 times
        vocab, kept = build_vocab(corpus)
        assert kept == [0]
        assert W2 not in vocab and len(vocab) == 3

    def test_counts_are_corpus_wide(self):
        corpus = [[W2] * 5, [W2] * 5]
        vocab, kept = build_vocab(corpus)
        assert kept == [0, 1] and vocab.count(vocab.id_of(W2)) == 10

    def test_empty(self):
        with pytest.raises(EmptyVocabulary):
            build_vocab([[W1]])
        with pytest.raises(EmptyVocabulary):
            build_vocab([])

    def test_rest_is_reserved(self):
        vocab, _ = build_vocab([[REST_WORD, W1]], min_count=1)
        assert encode([REST_WORD, W1], vocab) == [REST_ID, vocab.id_of(W1)]
        assert encode([], vocab) == []

    def test_oov_names_position(self):
        vocab, _ = build_vocab([[W1]], min_count=1)
        with pytest.raises(OutOfVocabulary) as info:
            encode([W1, W2], vocab)
        assert info.value.position == 1

    def test_decode_rejects_start_and_range(self):
        vocab, _ = build_vocab([[W1]], min_count=1)
        for bad in (START_ID, len(vocab), -1):
            with pytest.raises(UnknownToken):
                decode([bad], vocab)

    def test_text_roundtrip(self):
        vocab, _ = build_vocab(corpus_of([(W1, 10), (W2, 12), (W3, 11)]))
        text = dumps_vocab(vocab)
        again = loads_vocab(text)
        assert again.words() == vocab.words()
        assert [again.count(i) for i in range(2, 5)] == [vocab.count(i) for i in range(2, 5)]
        row = text.splitlines()[vocab.id_of(W3)].split("\t")
        assert row == [str(vocab.id_of(W3)), "24", "R", "R", "2", "0,4,7", "11"]

    def test_corpus_text(self):
        assert loads_corpus(dumps_corpus([[2, 3], [1]])) == [[2, 3], [1]]


words = st.builds(
    Word, st.integers(1, 96), st.just(None), st.just(None), st.just(None), st.just(None)) | st.builds(
    lambda d, o, p, co, pcs: Word(d, o, p, co, tuple(sorted(pcs))),
    st.integers(1, 96), st.integers(2, 6), st.integers(0, 11), st.integers(1, 4),
    st.sets(st.integers(0, 11), min_size=1, max_size=4))


@settings(max_examples=100, deadline=None)
@given(st.lists(words, min_size=1, max_size=40))
def test_encode_decode_inverse(ws):
    ws = [REST_WORD if w.is_rest else w for w in ws]
    vocab, _ = build_vocab([ws], min_count=1)
    assert decode(encode(ws, vocab), vocab) == ws
    assert START_ID not in encode(ws, vocab)


@settings(max_examples=100, deadline=None)
@given(raw_streams())
def test_words_streams_words_fixed_point(args):
    mel, chd, tpq = args
    try:
        ws = streams_to_words(mel, chd, tpq)
    except EmptyPiece:
        return
    while ws and ws[-1] == REST_WORD:  # trailing silence leaves no event
        ws.pop()
    m2, c2 = words_to_streams(ws, TPQ)
    assert streams_to_words(m2, c2, TPQ) == ws
