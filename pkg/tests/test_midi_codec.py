import io
import struct
import warnings

import mido
import pytest
from hypothesis import given, settings, strategies as st

from polyseq.midi_codec import (AmbiguousTracks, ChordSpan, InvalidStream, MalformedHeader, MalformedTrack, MidiPiece,
                                TimedNote, Track, UnsupportedFormat, UnterminatedNote, classify_tracks,
                                group_chords, monophonize, parse_midi, polyphony_fraction, render_midi)


def mido_bytes(tracks, tpq=480, fmt=1):
    """tracks: list of lists of (abs_tick, mido.Message) pairs."""
    mid = mido.MidiFile(type=fmt, ticks_per_beat=tpq)
    for events in tracks:
        tr = mido.MidiTrack()
        last = 0
        for tick, msg in sorted(events, key=lambda e: e[0]):
            tr.append(msg.copy(time=tick - last))
            last = tick
        mid.tracks.append(tr)
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


def on(tick, pitch, vel=64, ch=0):
    return tick, mido.Message("note_on", note=pitch, velocity=vel, channel=ch)


def off(tick, pitch, ch=0):
    return tick, mido.Message("note_off", note=pitch, velocity=0, channel=ch)


def mido_notes(data):
    """Independent reference: pair note events with mido's reader."""
    mid = mido.MidiFile(file=io.BytesIO(data))
    out = []
    for track in mid.tracks:
        tick, opened, notes = 0, {}, []
        for msg in track:
            tick += msg.time
            if msg.type == "note_on" and msg.velocity > 0:
                opened.setdefault((msg.channel, msg.note), []).append(tick)
            elif msg.type in ("note_off", "note_on"):
                starts = opened.get((msg.channel, msg.note))
                if starts:
                    start = starts.pop(0)
                    if tick > start:
                        notes.append((start, tick - start, msg.note))
        out.append(sorted(notes, key=lambda n: (n[0], n[2])))
    return out


def triples(track):
    return [(n.onset, n.duration, n.pitch) for n in track.notes]


class TestParse:
    def test_single_note(self):
        piece = parse_midi(mido_bytes([[on(0, 60), off(480, 60)]]))
        assert piece.ticks_per_quarter == 480
        assert piece.tracks[0].notes == [TimedNote(0, 480, 60, 64, 0)]

    def test_empty_track(self):
        piece = parse_midi(mido_bytes([[]]))
        assert len(piece.tracks) == 1 and piece.tracks[0].notes == []

    def test_triad_matches_reference_reader(self):
        events = [on(0, 62), on(0, 67), on(0, 71), off(960, 62), off(960, 67), off(960, 71)]
        data = mido_bytes([events])
        piece = parse_midi(data)
        assert triples(piece.tracks[0]) == mido_notes(data)[0]
        assert {n.onset for n in piece.tracks[0].notes} == {0}

    def test_velocity_zero_is_note_off(self):
        data = mido_bytes([[on(0, 60), (240, mido.Message("note_on", note=60, velocity=0))]])
        assert triples(parse_midi(data).tracks[0]) == [(0, 240, 60)]

    def test_running_status(self):
        # hand-built track: 0x90 once, then data bytes reuse it
        body = bytes([0x00, 0x90, 60, 100, 0x60, 60, 0, 0x00, 64, 100, 0x60, 64, 0, 0x00, 0xFF, 0x2F, 0x00])
        data = b"MThd" + struct.pack(">IHHH", 6, 0, 1, 96) + b"MTrk" + struct.pack(">I", len(body)) + body
        assert triples(parse_midi(data).tracks[0]) == [(0, 96, 60), (96, 96, 64)]

    def test_repeated_note_on_fifo(self):
        data = mido_bytes([[on(0, 60), on(100, 60), off(200, 60), off(300, 60)]])
        assert triples(parse_midi(data).tracks[0]) == [(0, 200, 60), (100, 200, 60)]

    def test_meta_and_sysex_skipped(self):
        events = [(0, mido.MetaMessage("set_tempo", tempo=400000)),
                  (0, mido.Message("sysex", data=[1, 2, 3])),
                  (0, mido.Message("program_change", program=5)),
                  on(10, 70), off(50, 70)]
        assert triples(parse_midi(mido_bytes([events])).tracks[0]) == [(10, 40, 70)]

    def test_zero_length_dropped(self):
        data = mido_bytes([[on(0, 60), off(0, 60), on(0, 62), off(10, 62)]])
        assert triples(parse_midi(data).tracks[0]) == [(0, 10, 62)]

    def test_unterminated_note_warns(self):
        data = mido_bytes([[on(0, 60), (480, mido.MetaMessage("text", text="x"))]])
        with pytest.warns(UnterminatedNote):
            piece = parse_midi(data)
        assert triples(piece.tracks[0]) == [(0, 480, 60)]

    def test_track_name(self):
        data = mido_bytes([[(0, mido.MetaMessage("track_name", name="melody")), on(0, 60), off(1, 60)]])
        assert parse_midi(data).tracks[0].name == "melody"

    @pytest.mark.parametrize("data", [b"", b"MThd", b"RIFF" + bytes(20), b"MThd" + struct.pack(">I", 2) + b"\0\0"])
    def test_bad_header(self, data):
        with pytest.raises(MalformedHeader):
            parse_midi(data)

    def test_format_2_rejected(self):
        data = b"MThd" + struct.pack(">IHHH", 6, 2, 0, 480)
        with pytest.raises(UnsupportedFormat):
            parse_midi(data)

    def test_smpte_rejected(self):
        data = b"MThd" + struct.pack(">IHHH", 6, 1, 0, 0xE728)
        with pytest.raises(UnsupportedFormat):
            parse_midi(data)

    def test_truncated_track(self):
        good = mido_bytes([[on(0, 60), off(480, 60)]])
        with pytest.raises(MalformedTrack):
            parse_midi(good[:-6])

    def test_data_byte_without_status(self):
        body = bytes([0x00, 60, 100])
        data = b"MThd" + struct.pack(">IHHH", 6, 0, 1, 96) + b"MTrk" + struct.pack(">I", len(body)) + body
        with pytest.raises(MalformedTrack):
            parse_midi(data)


note_events = st.lists(
    st.tuples(st.integers(0, 2000), st.integers(1, 500), st.integers(0, 127), st.integers(0, 3)),
    max_size=30)


@settings(max_examples=60, deadline=None)
@given(note_events)
def test_parse_matches_mido_reference(notes):
    events = []
    for onset, dur, pitch, ch in notes:
        events += [on(onset, pitch, 80, ch), off(onset + dur, pitch, ch)]
    data = mido_bytes([events])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnterminatedNote)
        ours = parse_midi(data).tracks[0].notes
    assert all(n.duration > 0 for n in ours)
    # mido orders same-tick events by insertion; compare as multisets
    assert sorted((n.onset, n.duration, n.pitch) for n in ours) == sorted(mido_notes(data)[0])


class TestPolyphony:
    def test_fractions(self):
        mono = [TimedNote(0, 10, 60), TimedNote(10, 10, 62)]
        assert polyphony_fraction(mono) == 0.0
        chord = [TimedNote(0, 10, p) for p in (60, 64, 67)]
        assert polyphony_fraction(chord) == 1.0
        # overlap on 5 of 15 sounding ticks
        assert polyphony_fraction([TimedNote(0, 10, 60), TimedNote(5, 10, 62)]) == pytest.approx(5 / 15)
        assert polyphony_fraction([]) == 0.0

    def test_monophonize_truncates(self):
        out = monophonize([TimedNote(0, 100, 60), TimedNote(50, 100, 62)])
        assert [(n.onset, n.duration) for n in out] == [(0, 50), (50, 100)]

    def test_monophonize_same_onset_keeps_highest(self):
        out = monophonize([TimedNote(0, 100, 60), TimedNote(0, 100, 67)])
        assert [n.pitch for n in out] == [67]

    def test_group_chords(self):
        notes = [TimedNote(0, 480, p) for p in (62, 67, 71)] + [TimedNote(480, 480, 60)]
        assert group_chords(notes) == [ChordSpan(0, 480, frozenset({62, 67, 71})),
                                       ChordSpan(480, 480, frozenset({60}))]


def two_track(mel, chd, names=("", "")):
    return MidiPiece(480, [Track(names[0], list(mel)), Track(names[1], list(chd))])


class TestClassify:
    mel = [TimedNote(0, 480, 72), TimedNote(480, 480, 74)]
    chd = [TimedNote(0, 960, p) for p in (62, 67, 71)]

    def test_clear_separation_either_order(self):
        for piece in (two_track(self.mel, self.chd), two_track(self.chd, self.mel)):
            melody, chords = classify_tracks(piece)
            assert melody == self.mel
            assert chords == [ChordSpan(0, 960, frozenset({62, 67, 71}))]

    def test_single_track_ambiguous(self):
        with pytest.raises(AmbiguousTracks):
            classify_tracks(MidiPiece(480, [Track("", self.mel + self.chd)]))

    def test_both_polyphonic_reports_fractions(self):
        with pytest.raises(AmbiguousTracks) as info:
            classify_tracks(two_track(self.chd, self.chd))
        assert info.value.fractions == {0: 1.0, 1: 1.0}

    def test_channel_split(self):
        mel = [TimedNote(n.onset, n.duration, n.pitch, channel=1) for n in self.mel]
        melody, chords = classify_tracks(MidiPiece(480, [Track("", mel + self.chd)]), channel_split=(1, 0))
        assert [n.pitch for n in melody] == [72, 74]
        assert chords[0].pitches == frozenset({62, 67, 71})

    def test_explicit_tracks_override(self):
        melody, chords = classify_tracks(two_track(self.chd, self.chd), melody_track=0, chord_track=1)
        assert len(melody) == 1 and len(chords) == 1

    def test_named_tracks(self):
        # names win even when polyphony says otherwise
        piece = two_track(self.mel, self.chd, names=("chords", "melody"))
        melody, chords = classify_tracks(piece)
        assert [n.pitch for n in melody] == [71]
        assert [c.pitches for c in chords] == [frozenset({72}), frozenset({74})]


class TestRender:
    def test_empty(self):
        data = render_midi([], [], 480)
        piece = parse_midi(data)
        assert piece.ticks_per_quarter == 480
        assert [t.notes for t in piece.tracks] == [[], []]
        assert mido.MidiFile(file=io.BytesIO(data)).type == 1

    def test_single_note(self):
        piece = parse_midi(render_midi([TimedNote(0, 480, 60)], [], 480))
        assert triples(piece.tracks[0]) == [(0, 480, 60)]
        assert piece.tracks[0].notes[0].velocity == 90

    def test_tempo_and_readable_by_mido(self):
        data = render_midi([TimedNote(0, 480, 60)], [ChordSpan(0, 960, frozenset({48, 52, 55}))], 480)
        mid = mido.MidiFile(file=io.BytesIO(data))
        tempos = [m.tempo for t in mid.tracks for m in t if m.type == "set_tempo"]
        assert tempos == [500000]
        assert mido_notes(data) == [[(0, 480, 60)], [(0, 960, 48), (0, 960, 52), (0, 960, 55)]]

    @pytest.mark.parametrize("mel,chd,tpq", [
        ([TimedNote(10, 5, 60), TimedNote(0, 5, 60)], [], 480),
        ([TimedNote(0, 0, 60)], [], 480),
        ([], [ChordSpan(0, 10, frozenset())], 480),
        ([], [ChordSpan(0, 10, frozenset({200}))], 480),
        ([], [], 0),
    ])
    def test_invalid(self, mel, chd, tpq):
        with pytest.raises(InvalidStream):
            render_midi(mel, chd, tpq)


@st.composite
def streams(draw):
    tpq = draw(st.sampled_from([96, 480, 960]))
    t, mel = 0, []
    for _ in range(draw(st.integers(0, 12))):
        t += draw(st.integers(0, 300))
        d = draw(st.integers(1, 400))
        mel.append(TimedNote(t, d, draw(st.integers(60, 90))))
        t += d
    t, chd = 0, []
    for _ in range(draw(st.integers(0, 8))):
        t += draw(st.integers(0, 300))
        d = draw(st.integers(1, 600))
        chd.append(ChordSpan(t, d, frozenset(draw(st.sets(st.integers(36, 59), min_size=2, max_size=4)))))
        t += d
    return mel, chd, tpq


@settings(max_examples=80, deadline=None)
@given(streams())
def test_render_parse_classify_roundtrip(args):
    mel, chd, tpq = args
    piece = parse_midi(render_midi(mel, chd, tpq))
    melody, chords = classify_tracks(piece)
    assert [(n.onset, n.duration, n.pitch) for n in melody] == [(n.onset, n.duration, n.pitch) for n in mel]
    assert chords == chd
