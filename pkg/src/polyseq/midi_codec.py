"""Standard MIDI File reading and writing for melody/chord streams.

Only what the tokenizer needs is extracted: note-on/note-off pairs per
track. Tempo, program and controller events are skipped. Output files are
always format 1 with a melody track and a chord track.
"""

from __future__ import annotations

import logging
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

OUTPUT_VELOCITY = 90
OUTPUT_TEMPO_US = 500_000  # 120 BPM
CHORD_TRACK_THRESHOLD = 0.5

MELODY_TRACK_NAME = "melody"
CHORD_TRACK_NAME = "chords"


class MidiError(ValueError):
    """Base class for unreadable or unrepresentable MIDI data."""


class MalformedHeader(MidiError):
    pass


class MalformedTrack(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class InvalidStream(MidiError):
    pass


class AmbiguousTracks(MidiError):
    """No unique melody/chord assignment could be made.

    ``fractions`` maps track index to the fraction of its sounding time
    covered by two or more simultaneous notes.
    """

    def __init__(self, message: str, fractions: dict[int, float] | None = None):
        super().__init__(message)
        self.fractions = dict(fractions or {})


class UnterminatedNote(UserWarning):
    """A note-on without matching note-off; the note was closed at track end."""


@dataclass(frozen=True, order=True)
class TimedNote:
    onset: int
    duration: int
    pitch: int
    velocity: int = OUTPUT_VELOCITY
    channel: int = 0

    @property
    def offset(self) -> int:
        return self.onset + self.duration


@dataclass(frozen=True)
class ChordSpan:
    onset: int
    duration: int
    pitches: frozenset[int]

    @property
    def offset(self) -> int:
        return self.onset + self.duration


@dataclass
class Track:
    name: str = ""
    notes: list[TimedNote] = field(default_factory=list)


@dataclass
class MidiPiece:
    ticks_per_quarter: int
    tracks: list[Track] = field(default_factory=list)


def _note_sort_key(note: TimedNote) -> tuple[int, int]:
    return note.onset, note.pitch


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MalformedTrack("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MalformedTrack("variable-length quantity longer than 4 bytes")


_CHANNEL_DATA_BYTES = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(data: bytes, pos: int, end: int, index: int) -> Track:
    track = Track()
    open_notes: dict[tuple[int, int], deque[tuple[int, int]]] = defaultdict(deque)
    tick = 0
    status = None

    def close(channel: int, pitch: int, at: int) -> None:
        queue = open_notes.get((channel, pitch))
        if not queue:
            return
        onset, velocity = queue.popleft()
        if at > onset:
            track.notes.append(TimedNote(onset, at - onset, pitch, velocity, channel))

    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MalformedTrack(f"track {index}: event without status byte")
        byte = data[pos]
        if byte & 0x80:
            pos += 1
            if byte < 0xF0:
                status = byte
            else:
                status = None  # system messages cancel running status
            head = byte
        elif status is None:
            raise MalformedTrack(f"track {index}: data byte without running status")
        else:
            head = status

        if head == 0xFF:
            if pos >= end:
                raise MalformedTrack(f"track {index}: truncated meta event")
            meta_type = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            payload = data[pos:pos + length]
            if len(payload) < length:
                raise MalformedTrack(f"track {index}: truncated meta payload")
            pos += length
            if meta_type == 0x03 and not track.name:
                track.name = payload.decode("latin-1")
            elif meta_type == 0x2F:
                break
            continue
        if head in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos, end)
            pos += length
            continue
        if head >= 0xF0:
            raise MalformedTrack(f"track {index}: unexpected system message 0x{head:02X}")

        kind = head & 0xF0
        channel = head & 0x0F
        n = _CHANNEL_DATA_BYTES[kind]
        if pos + n > end:
            raise MalformedTrack(f"track {index}: truncated channel message")
        args = data[pos:pos + n]
        pos += n
        if kind == 0x90 and args[1] > 0:
            open_notes[(channel, args[0])].append((tick, args[1]))
        elif kind == 0x80 or kind == 0x90:
            close(channel, args[0], tick)

    dangling = [(key, item) for key, queue in open_notes.items() for item in queue]
    if dangling:
        warnings.warn(
            f"track {index}: {len(dangling)} note(s) without note-off closed at tick {tick}",
            UnterminatedNote,
            stacklevel=3,
        )
        for (channel, pitch), (onset, velocity) in dangling:
            if tick > onset:
                track.notes.append(TimedNote(onset, tick - onset, pitch, velocity, channel))
    track.notes.sort(key=_note_sort_key)
    return track


def parse_midi(data: bytes) -> MidiPiece:
    """Parse SMF bytes into per-track note lists.

    Note-on with velocity 0 counts as note-off. Repeated note-ons of one
    pitch on one channel are closed first-in first-out. Zero-length notes
    are dropped.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header chunk")
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or len(data) < 8 + header_len:
        raise MalformedHeader(f"short MThd chunk ({header_len} bytes)")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 (independent sequences) is not supported")
    if fmt > 2:
        raise MalformedHeader(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("ticks per quarter note is zero")

    piece = MidiPiece(ticks_per_quarter=division)
    pos = 8 + header_len
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        start = pos + 8
        end = start + length
        if end > len(data):
            raise MalformedTrack(f"chunk {chunk_id!r} runs past end of file")
        if chunk_id == b"MTrk":
            piece.tracks.append(_parse_track(data, start, end, len(piece.tracks)))
        pos = end
    if len(piece.tracks) != ntracks:
        logger.debug("header announces %d tracks, found %d", ntracks, len(piece.tracks))
    return piece


def read_midi(path) -> MidiPiece:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


# ---------------------------------------------------------------------------
# melody / chord separation
# ---------------------------------------------------------------------------

def polyphony_fraction(notes: Iterable[TimedNote]) -> float:
    """Fraction of sounding time during which two or more notes overlap."""
    events: dict[int, int] = defaultdict(int)
    for note in notes:
        events[note.onset] += 1
        events[note.offset] -= 1
    sounding = poly = 0
    active = 0
    last = None
    for tick in sorted(events):
        if last is not None:
            span = tick - last
            if active >= 1:
                sounding += span
            if active >= 2:
                poly += span
        active += events[tick]
        last = tick
    return poly / sounding if sounding else 0.0


def monophonize(notes: Sequence[TimedNote]) -> list[TimedNote]:
    """Truncate each note at the next onset so no two notes overlap.

    Of several notes sharing an onset only the highest survives.
    """
    by_onset: dict[int, TimedNote] = {}
    for note in notes:
        kept = by_onset.get(note.onset)
        if kept is None or note.pitch > kept.pitch:
            by_onset[note.onset] = note
    dropped = len(notes) - len(by_onset)
    if dropped:
        logger.warning("dropped %d melody note(s) sharing an onset with a higher note", dropped)
    ordered = [by_onset[t] for t in sorted(by_onset)]
    out = []
    for i, note in enumerate(ordered):
        if i + 1 < len(ordered) and ordered[i + 1].onset < note.offset:
            note = TimedNote(note.onset, ordered[i + 1].onset - note.onset,
                             note.pitch, note.velocity, note.channel)
        out.append(note)
    return out


def group_chords(notes: Iterable[TimedNote]) -> list[ChordSpan]:
    groups: dict[tuple[int, int], set[int]] = defaultdict(set)
    for note in notes:
        groups[(note.onset, note.duration)].add(note.pitch)
    return [ChordSpan(onset, duration, frozenset(pitches))
            for (onset, duration), pitches in sorted(groups.items())]


def classify_tracks(
    piece: MidiPiece,
    *,
    melody_track: int | None = None,
    chord_track: int | None = None,
    channel_split: tuple[int, int] | None = None,
    threshold: float = CHORD_TRACK_THRESHOLD,
) -> tuple[list[TimedNote], list[ChordSpan]]:
    """Split a piece into a monophonic melody and a list of chord spans.

    ``channel_split=(melody_channel, chord_channel)`` separates a single
    track by MIDI channel. ``melody_track``/``chord_track`` force the track
    assignment. Otherwise tracks named "melody"/"chords" are honoured, and
    failing that the track with the larger polyphony fraction holds chords.
    """
    if channel_split is not None:
        mel_ch, chord_ch = channel_split
        notes = [n for t in piece.tracks for n in t.notes]
        melody = sorted((n for n in notes if n.channel == mel_ch), key=_note_sort_key)
        chords = [n for n in notes if n.channel == chord_ch]
        return monophonize(melody), group_chords(chords)

    tracks = piece.tracks
    if melody_track is not None or chord_track is not None:
        if melody_track is None or chord_track is None:
            raise ValueError("melody_track and chord_track must be given together")
        return (monophonize(tracks[melody_track].notes),
                group_chords(tracks[chord_track].notes))

    names = {t.name.strip().lower(): i for i, t in enumerate(tracks)}
    if MELODY_TRACK_NAME in names and CHORD_TRACK_NAME in names:
        return (monophonize(tracks[names[MELODY_TRACK_NAME]].notes),
                group_chords(tracks[names[CHORD_TRACK_NAME]].notes))

    candidates = [i for i, t in enumerate(tracks) if t.notes]
    fractions = {i: polyphony_fraction(tracks[i].notes) for i in candidates}
    if len(candidates) != 2:
        raise AmbiguousTracks(
            f"expected 2 non-empty tracks, found {len(candidates)}; "
            "name the melody/chord tracks or a channel split", fractions)
    a, b = candidates
    if fractions[a] >= threshold and fractions[b] >= threshold:
        raise AmbiguousTracks(
            f"both tracks polyphonic (track {a}: {fractions[a]:.2f}, "
            f"track {b}: {fractions[b]:.2f})", fractions)
    if fractions[a] == fractions[b]:
        raise AmbiguousTracks(
            f"tracks {a} and {b} have equal polyphony {fractions[a]:.2f}", fractions)
    chord_i, mel_i = (a, b) if fractions[a] > fractions[b] else (b, a)
    return monophonize(tracks[mel_i].notes), group_chords(tracks[chord_i].notes)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(name: str, notes: list[tuple[int, int, int]], tempo: bool) -> bytes:
    """``notes`` are (onset, duration, pitch) triples."""
    events = []  # (tick, order, bytes); offs sort before ons at equal ticks
    for onset, duration, pitch in notes:
        events.append((onset + duration, 0, pitch, bytes([0x80, pitch, 0])))
        events.append((onset, 1, pitch, bytes([0x90, pitch, OUTPUT_VELOCITY])))
    events.sort(key=lambda e: e[:3])
    body = bytearray()
    encoded = name.encode("latin-1")
    body += b"\x00\xff\x03" + _varlen(len(encoded)) + encoded
    if tempo:
        body += b"\x00\xff\x51\x03" + OUTPUT_TEMPO_US.to_bytes(3, "big")
    last = 0
    for tick, _, _, msg in events:
        body += _varlen(tick - last) + msg
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _check_sorted(onsets: list[int], what: str) -> None:
    if any(b < a for a, b in zip(onsets, onsets[1:])):
        raise InvalidStream(f"{what} stream is not sorted by onset")


def render_midi(melody: Sequence[TimedNote], chords: Sequence[ChordSpan], tpq: int) -> bytes:
    """Write a two-track SMF (melody, chords) at 120 BPM and velocity 90."""
    if not 0 < tpq < 0x8000:
        raise InvalidStream(f"ticks per quarter must be in 1..32767, got {tpq}")
    _check_sorted([n.onset for n in melody], "melody")
    _check_sorted([c.onset for c in chords], "chord")
    mel = []
    for n in melody:
        if n.duration <= 0 or n.onset < 0 or not 0 <= n.pitch <= 127:
            raise InvalidStream(f"invalid melody note {n}")
        mel.append((n.onset, n.duration, n.pitch))
    chd = []
    for c in chords:
        if c.duration <= 0 or c.onset < 0 or not c.pitches:
            raise InvalidStream(f"invalid chord span {c}")
        for p in sorted(c.pitches):
            if not 0 <= p <= 127:
                raise InvalidStream(f"chord pitch {p} out of range")
            chd.append((c.onset, c.duration, p))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, 2, tpq)
    return (header
            + _track_chunk(MELODY_TRACK_NAME, mel, tempo=True)
            + _track_chunk(CHORD_TRACK_NAME, chd, tempo=False))


def write_midi(path, melody, chords, tpq: int) -> None:
    with open(path, "wb") as fh:
        fh.write(render_midi(melody, chords, tpq))
