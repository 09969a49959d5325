"""Minimal Standard MIDI File reader and the melody extraction pipeline.

The reader handles format 0/1 files: note on/off (including running status
and velocity-0 note-ons as note-offs), time signature and program change,
with everything else skipped by length.  The pipeline splits a file on
time-signature changes, keeps only 4/4 spans, quantizes to the sixteenth
grid, reduces simultaneous notes to the highest pitch, terminates melodies
at a bar of silence, and slices surviving melodies into 64-step windows
with a stride of one bar.

Only notes played on melodic channels count: channel 10 (percussion) and
programs 96-127 (effects and percussive sets) are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .melody_core import (
    NUM_STEPS,
    PITCH_MAX,
    PITCH_MIN,
    STEPS_PER_BAR,
    Corpus,
    NoteEvent,
    TokenMelody,
    _split_for_index,
    encode_melody,
    is_admissible,
)

MIN_MELODY_BARS = 4
MIN_DISTINCT_PITCHES = 3
SILENCE_BARS_TO_END = 1
VALID_PROGRAM_MAX = 95
PERCUSSION_CHANNEL = 9  # zero-based channel 10


class SmfParseError(ValueError):
    """Malformed SMF input; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TimedNote:
    """A paired note-on/off with absolute tick times."""

    pitch: int
    start_tick: int
    end_tick: int
    track: int
    channel: int
    program: int


@dataclass(frozen=True)
class TimeSignatureEvent:
    tick: int
    numerator: int
    denominator: int


@dataclass
class MidiDocument:
    ticks_per_quarter: int
    notes: list[TimedNote]
    time_signatures: list[TimeSignatureEvent]
    num_tracks: int

    def end_tick(self) -> int:
        note_end = max((n.end_tick for n in self.notes), default=0)
        sig_end = max((s.tick for s in self.time_signatures), default=0)
        return max(note_end, sig_end)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, message: str):
        raise SmfParseError(message, self.pos)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated: wanted {n} bytes")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        b = self.take(2)
        return (b[0] << 8) | b[1]

    def u32(self) -> int:
        b = self.take(4)
        return (b[0] << 24) | (b[1] << 16) | (b[2] << 8) | b[3]

    def varint(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.byte()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        self.fail("variable-length quantity longer than 4 bytes")


def parse_smf(data: bytes) -> MidiDocument:
    """Decode a format 0/1 SMF byte string into absolute-tick events."""
    r = _Reader(data)
    if r.take(4) != b"MThd":
        raise SmfParseError("missing MThd header", 0)
    header_len = r.u32()
    if header_len < 6:
        r.fail(f"header chunk too short ({header_len})")
    fmt = r.u16()
    num_tracks = r.u16()
    division = r.u16()
    r.take(header_len - 6)
    if fmt not in (0, 1):
        raise SmfParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise SmfParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise SmfParseError("ticks per quarter must be positive", 12)

    notes: list[TimedNote] = []
    signatures: list[TimeSignatureEvent] = []
    for track_index in range(num_tracks):
        if r.take(4) != b"MTrk":
            raise SmfParseError(f"missing MTrk chunk for track {track_index}", r.pos - 4)
        length = r.u32()
        track_end = r.pos + length
        if track_end > len(data):
            r.fail(f"track {track_index} length {length} overruns file")
        _parse_track(r, track_end, track_index, notes, signatures)
        r.pos = track_end

    notes.sort(key=lambda n: (n.track, n.start_tick, n.channel, n.pitch))
    signatures.sort(key=lambda s: s.tick)
    return MidiDocument(division, notes, signatures, num_tracks)


def _parse_track(
    r: _Reader,
    track_end: int,
    track_index: int,
    notes: list[TimedNote],
    signatures: list[TimeSignatureEvent],
) -> None:
    tick = 0
    running_status: int | None = None
    programs: dict[int, int] = {}
    # (channel, pitch) -> (start_tick, program at onset)
    sounding: dict[tuple[int, int], tuple[int, int]] = {}

    def close(channel: int, pitch: int, end_tick: int) -> None:
        started = sounding.pop((channel, pitch), None)
        if started is not None and end_tick > started[0]:
            notes.append(
                TimedNote(pitch, started[0], end_tick, track_index, channel, started[1])
            )

    while r.pos < track_end:
        tick += r.varint()
        status = r.byte()
        if status < 0x80:
            if running_status is None:
                r.fail("data byte with no running status")
            r.pos -= 1
            status = running_status
        if status < 0xF0:
            running_status = status
            kind, channel = status & 0xF0, status & 0x0F
            if kind == 0x90:
                pitch, velocity = r.byte(), r.byte()
                if velocity > 0:
                    close(channel, pitch, tick)  # retrigger implies note end
                    sounding[(channel, pitch)] = (tick, programs.get(channel, 0))
                else:
                    close(channel, pitch, tick)
            elif kind == 0x80:
                pitch, _velocity = r.byte(), r.byte()
                close(channel, pitch, tick)
            elif kind == 0xC0:
                programs[channel] = r.byte()
            elif kind == 0xD0:
                r.take(1)
            else:  # 0xA0 poly pressure, 0xB0 controller, 0xE0 pitch bend
                r.take(2)
        elif status in (0xF0, 0xF7):
            running_status = None
            r.take(r.varint())
        elif status == 0xFF:
            running_status = None
            meta_type = r.byte()
            length = r.varint()
            payload = r.take(length)
            if meta_type == 0x58 and length >= 2:
                signatures.append(
                    TimeSignatureEvent(tick, payload[0], 1 << payload[1])
                )
            elif meta_type == 0x2F:
                return
        else:
            r.fail(f"unsupported status byte 0x{status:02x}")

    for (channel, pitch), _ in list(sounding.items()):
        close(channel, pitch, tick)


@dataclass
class GridSegment:
    """One maximal 4/4 span, with (possibly quantized) note times.

    ``notes`` carry ticks relative to the span start until
    :func:`quantize_events` rewrites them as sixteenth-grid indices
    (``quantized=True``).
    """

    ticks_per_quarter: int
    notes: list[TimedNote] = field(default_factory=list)
    quantized: bool = False


def split_on_time_signature(doc: MidiDocument) -> list[GridSegment]:
    """One segment per maximal 4/4 span; other signatures are dropped.

    A file with no time-signature event defaults to 4/4 throughout.  Notes
    crossing a span boundary are clipped to the span.
    """
    changes = list(doc.time_signatures)
    if not changes or changes[0].tick > 0:
        changes.insert(0, TimeSignatureEvent(0, 4, 4))
    end = doc.end_tick() + 1
    spans: list[tuple[int, int]] = []
    for i, sig in enumerate(changes):
        span_end = changes[i + 1].tick if i + 1 < len(changes) else end
        if sig.numerator == 4 and sig.denominator == 4 and span_end > sig.tick:
            if spans and spans[-1][1] == sig.tick:
                spans[-1] = (spans[-1][0], span_end)  # merge redundant 4/4 restatement
            else:
                spans.append((sig.tick, span_end))

    segments = []
    for start, stop in spans:
        clipped = []
        for note in doc.notes:
            s = max(note.start_tick, start)
            e = min(note.end_tick, stop)
            if s < e:
                clipped.append(
                    TimedNote(note.pitch, s - start, e - start, note.track, note.channel, note.program)
                )
        segments.append(GridSegment(doc.ticks_per_quarter, clipped))
    return segments


def quantize_events(segment: GridSegment, ticks_per_quarter: int | None = None) -> GridSegment:
    """Snap note boundaries to the nearest sixteenth, round half up.

    Durations are re-derived from the quantized boundaries with a one-step
    minimum; idempotent on already-quantized input.
    """
    tpq = ticks_per_quarter or segment.ticks_per_quarter
    if tpq <= 0:
        raise ValueError(f"ticks per quarter must be positive, got {tpq}")
    sixteenth = tpq / 4.0
    quantized = []
    for note in segment.notes:
        start = _round_half_up(note.start_tick / sixteenth)
        end = max(start + 1, _round_half_up(note.end_tick / sixteenth))
        quantized.append(
            TimedNote(note.pitch, start, end, note.track, note.channel, note.program)
        )
    return GridSegment(tpq, quantized, quantized=True)


def _round_half_up(x: float) -> int:
    return int(x + 0.5) if x >= 0 else -int(-x + 0.5)


def quantize_tick(tick: int, ticks_per_quarter: int) -> int:
    """Grid index of one tick value (exposed for tests and tooling)."""
    return _round_half_up(tick / (ticks_per_quarter / 4.0))


def extract_melodies(grid: GridSegment) -> list[list[NoteEvent]]:
    """Monophonic melodies from a quantized 4/4 segment.

    Per instrument voice (track, channel) with a melodic program:
    simultaneous onsets keep the highest pitch, a full bar of silence ends a
    melody, and only melodies at least four bars long with at least three
    distinct pitches survive.  Notes outside the piano range are rejected.
    Each returned melody is rebased so step 0 is its first onset's bar line.
    """
    if not grid.quantized:
        raise ValueError("extract_melodies requires a quantized segment")
    voices: dict[tuple[int, int], list[TimedNote]] = {}
    for note in grid.notes:
        if note.channel == PERCUSSION_CHANNEL or note.program > VALID_PROGRAM_MAX:
            continue
        if not PITCH_MIN <= note.pitch <= PITCH_MAX:
            continue
        voices.setdefault((note.track, note.channel), []).append(note)

    melodies: list[list[NoteEvent]] = []
    for key in sorted(voices):
        notes = sorted(voices[key], key=lambda n: (n.start_tick, -n.pitch))
        # highest pitch wins at each onset step
        by_onset: dict[int, TimedNote] = {}
        for note in notes:
            cur = by_onset.get(note.start_tick)
            if cur is None or note.pitch > cur.pitch:
                by_onset[note.start_tick] = note
        reduced = [by_onset[t] for t in sorted(by_onset)]

        current: list[TimedNote] = []
        last_end = None
        for note in reduced:
            if last_end is not None and note.start_tick - last_end >= SILENCE_BARS_TO_END * STEPS_PER_BAR:
                melodies.extend(_finish_melody(current))
                current = []
            current.append(note)
            last_end = max(last_end or 0, note.end_tick)
        melodies.extend(_finish_melody(current))
    return melodies


def _finish_melody(notes: list[TimedNote]) -> list[list[NoteEvent]]:
    if not notes:
        return []
    origin = (notes[0].start_tick // STEPS_PER_BAR) * STEPS_PER_BAR
    length = max(n.end_tick for n in notes) - origin
    if length < MIN_MELODY_BARS * STEPS_PER_BAR:
        return []
    if len({n.pitch for n in notes}) < MIN_DISTINCT_PITCHES:
        return []
    events = []
    last_onset = None
    for n in sorted(notes, key=lambda n: n.start_tick):
        if n.start_tick == last_onset:
            continue  # same-step collision already reduced; belt and braces
        last_onset = n.start_tick
        events.append(NoteEvent(n.pitch, n.start_tick - origin, n.end_tick - n.start_tick))
    return [events]


def slice_four_bars(melody: list[NoteEvent]) -> list[TokenMelody]:
    """64-step windows at bar offsets 0, 16, 32, ... over one melody.

    Notes crossing a window's right edge are truncated there; notes whose
    onset precedes the window are left out (a window never opens with a
    dangling hold).  Windows that fall below corpus admissibility (three
    distinct pitches) are dropped.
    """
    if not melody:
        return []
    end = max(n.onset_step + n.duration_steps for n in melody)
    bars = (end + STEPS_PER_BAR - 1) // STEPS_PER_BAR
    windows = []
    for bar in range(0, max(0, bars - MIN_MELODY_BARS) + 1):
        lo = bar * STEPS_PER_BAR
        hi = lo + NUM_STEPS
        clipped = []
        for n in melody:
            if n.onset_step < lo or n.onset_step >= hi:
                continue
            duration = min(n.duration_steps, hi - n.onset_step)
            clipped.append(NoteEvent(n.pitch, n.onset_step - lo, duration))
        if not clipped:
            continue
        window = encode_melody(clipped)
        if is_admissible(window, MIN_DISTINCT_PITCHES):
            windows.append(window)
    return windows


def ingest_file(data: bytes) -> list[TokenMelody]:
    """Full pipeline for one file: parse, split, quantize, extract, slice."""
    doc = parse_smf(data)
    windows: list[TokenMelody] = []
    for segment in split_on_time_signature(doc):
        quantized = quantize_events(segment)
        for melody in extract_melodies(quantized):
            windows.extend(slice_four_bars(melody))
    return windows


def ingest_directory(directory: str | Path, valid_every: int = 10) -> Corpus:
    """Build a corpus from every .mid file in a directory (sorted by name)."""
    directory = Path(directory)
    melodies: list[TokenMelody] = []
    for path in sorted(directory.glob("*.mid")):
        melodies.extend(ingest_file(path.read_bytes()))
    splits = [_split_for_index(index, valid_every) for index in range(len(melodies))]
    return Corpus(melodies, splits, provenance="smf", seed=0)
