"""SMF reader and the melody extraction pipeline, against byte-level fixtures."""

import numpy as np
import pytest

from argon.melody_core import NOTE_HOLD, NOTE_OFF, NoteEvent, encode_melody
from argon.smf_ingest import (
    GridSegment,
    SmfParseError,
    TimedNote,
    extract_melodies,
    ingest_file,
    parse_smf,
    quantize_events,
    quantize_tick,
    slice_four_bars,
    split_on_time_signature,
)

from smf_bytes import (
    end_of_track,
    note_off,
    note_on,
    program_change,
    simple_melody_file,
    smf,
    time_signature,
    track,
    vlq,
)


class TestParser:
    def test_single_quarter_note(self):
        # C4 quarter note at tick 0, hand-assembled
        data = smf(
            [track(note_on(0, 60), note_off(480, 60), end_of_track())],
            ticks_per_quarter=480,
        )
        doc = parse_smf(data)
        assert doc.ticks_per_quarter == 480
        assert len(doc.notes) == 1
        note = doc.notes[0]
        assert (note.pitch, note.start_tick, note.end_tick) == (60, 0, 480)

    def test_two_byte_variable_length_delta(self):
        # 0x81 0x48 encodes 200 per the varint definition
        assert vlq(200) == bytes([0x81, 0x48])
        data = smf([track(note_on(200, 72), note_off(10, 72), end_of_track())])
        note = parse_smf(data).notes[0]
        assert note.start_tick == 200
        assert note.end_tick == 210

    def test_empty_input_rejected(self):
        with pytest.raises(SmfParseError):
            parse_smf(b"")

    def test_bad_magic_rejected(self):
        with pytest.raises(SmfParseError, match="MThd"):
            parse_smf(b"RIFFxxxxxxxxxx")

    def test_format_2_rejected(self):
        data = smf([track(end_of_track())], fmt=2)
        with pytest.raises(SmfParseError, match="format 2"):
            parse_smf(data)

    def test_truncated_track_rejected(self):
        data = smf([track(note_on(0, 60), note_off(480, 60), end_of_track())])
        with pytest.raises(SmfParseError):
            parse_smf(data[:-5])

    def test_error_carries_byte_offset(self):
        try:
            parse_smf(b"MThd")
        except SmfParseError as exc:
            assert exc.offset == 4

    def test_velocity_zero_note_on_ends_note(self):
        body = track(
            note_on(0, 60),
            vlq(120) + bytes([0x90, 60, 0]),  # running-status-free velocity-0 off
            end_of_track(),
        )
        note = parse_smf(smf([body])).notes[0]
        assert (note.start_tick, note.end_tick) == (0, 120)

    def test_running_status(self):
        # second note-on omits the status byte
        body = track(
            note_on(0, 60),
            vlq(60) + bytes([62, 64]),  # running status: note-on 62
            note_off(60, 60),
            note_off(0, 62),
            end_of_track(),
        )
        doc = parse_smf(smf([body]))
        assert sorted(n.pitch for n in doc.notes) == [60, 62]

    def test_program_change_tagged_on_notes(self):
        body = track(
            program_change(0, 42),
            note_on(0, 60),
            note_off(10, 60),
            end_of_track(),
        )
        assert parse_smf(smf([body])).notes[0].program == 42

    def test_unknown_events_skipped(self):
        body = track(
            vlq(0) + bytes([0xB0, 7, 100]),  # controller
            vlq(0) + bytes([0xE0, 0, 64]),  # pitch bend
            vlq(0) + bytes([0xFF, 0x51, 0x03, 7, 161, 32]),  # tempo meta
            note_on(5, 60),
            note_off(5, 60),
            end_of_track(),
        )
        doc = parse_smf(smf([body]))
        assert len(doc.notes) == 1

    def test_multi_track_format_1(self):
        t0 = track(time_signature(0, 4, 2), end_of_track())
        t1 = track(note_on(0, 60), note_off(120, 60), end_of_track())
        doc = parse_smf(smf([t0, t1]))
        assert doc.num_tracks == 2
        assert len(doc.notes) == 1
        assert doc.time_signatures[0].numerator == 4


class TestTimeSignatureSplit:
    def test_uniform_four_four(self):
        doc = parse_smf(simple_melody_file([60, 62, 64]))
        assert len(split_on_time_signature(doc)) == 1

    def test_three_spans_keep_two(self):
        body = track(
            time_signature(0, 4, 2),
            note_on(0, 60),
            note_off(480, 60),
            time_signature(0, 3, 2),  # 3/4 span
            note_on(0, 62),
            note_off(480, 62),
            time_signature(0, 4, 2),  # back to 4/4
            note_on(0, 64),
            note_off(480, 64),
            end_of_track(),
        )
        segments = split_on_time_signature(parse_smf(smf([body])))
        assert len(segments) == 2
        assert [n.pitch for n in segments[0].notes] == [60]
        assert [n.pitch for n in segments[1].notes] == [64]

    def test_entirely_three_four(self):
        body = track(
            time_signature(0, 3, 2), note_on(0, 60), note_off(480, 60), end_of_track()
        )
        assert split_on_time_signature(parse_smf(smf([body]))) == []

    def test_defaults_to_four_four_without_event(self):
        doc = parse_smf(simple_melody_file([60], with_time_signature=False))
        assert len(split_on_time_signature(doc)) == 1

    def test_note_clipped_at_signature_change(self):
        body = track(
            time_signature(0, 4, 2),
            note_on(0, 60),
            time_signature(600, 3, 2),
            note_off(600, 60),  # sounds into the 3/4 span
            end_of_track(),
        )
        segments = split_on_time_signature(parse_smf(smf([body])))
        assert len(segments) == 1
        assert segments[0].notes[0].end_tick == 600


class TestQuantize:
    def test_round_half_up_examples(self):
        assert quantize_tick(119, 480) == 1
        assert quantize_tick(60, 480) == 1  # exactly half a sixteenth rounds up
        assert quantize_tick(59, 480) == 0

    def test_duration_minimum_one_step(self):
        segment = GridSegment(480, [TimedNote(60, 10, 20, 0, 0, 0)])
        out = quantize_events(segment)
        note = out.notes[0]
        assert (note.start_tick, note.end_tick) == (0, 1)

    def test_idempotent_on_quantized_input(self):
        segment = GridSegment(480, [TimedNote(60, 0, 480, 0, 0, 0), TimedNote(62, 480, 720, 0, 0, 0)])
        once = quantize_events(segment)
        again = quantize_events(GridSegment(4, [TimedNote(n.pitch, n.start_tick, n.end_tick, 0, 0, 0) for n in once.notes]))
        assert [(n.start_tick, n.end_tick) for n in again.notes] == [
            (n.start_tick, n.end_tick) for n in once.notes
        ]


def grid_of(notes, quantized=True):
    return GridSegment(480, notes, quantized=quantized)


def gn(pitch, start, end, track_index=0, channel=0, program=0):
    return TimedNote(pitch, start, end, track_index, channel, program)


class TestExtractMelodies:
    def test_chord_keeps_highest_pitch(self):
        notes = [gn(60, 0, 4), gn(64, 0, 4), gn(67, 0, 4)] + [
            gn(p, s, s + 4) for p, s in ((62, 16), (65, 32), (69, 48), (70, 60))
        ]
        melodies = extract_melodies(grid_of(notes))
        assert len(melodies) == 1
        assert melodies[0][0].pitch == 67

    def test_short_melody_dropped(self):
        notes = [gn(60, 0, 8), gn(64, 16, 24), gn(67, 32, 40)]  # under 4 bars
        assert extract_melodies(grid_of(notes)) == []

    def test_two_pitch_melody_dropped(self):
        notes = [gn(60, k * 16, k * 16 + 8) for k in range(5)]
        notes[1] = gn(62, 16, 24)
        notes = [gn(60, 0, 8), gn(62, 16, 24), gn(60, 32, 40), gn(62, 48, 56), gn(60, 60, 64)]
        assert extract_melodies(grid_of(notes)) == []

    RUN_A = [gn(60, 0, 4), gn(64, 16, 20), gn(67, 32, 36), gn(65, 48, 52), gn(62, 60, 64)]

    def test_bar_of_silence_splits(self):
        # run B starts 16 silent steps after run A ends
        run_b = [gn(70, 80, 84), gn(72, 96, 100), gn(74, 112, 116), gn(76, 128, 132), gn(77, 140, 144)]
        melodies = extract_melodies(grid_of(self.RUN_A + run_b))
        assert len(melodies) == 2
        assert {n.pitch for n in melodies[0]} == {60, 64, 67, 65, 62}
        assert {n.pitch for n in melodies[1]} == {70, 72, 74, 76, 77}

    def test_shorter_gap_does_not_split(self):
        # 14 silent steps only: still one melody
        run_b = [gn(70, 78, 82), gn(72, 94, 98), gn(74, 110, 114), gn(76, 126, 130)]
        melodies = extract_melodies(grid_of(self.RUN_A + run_b))
        assert len(melodies) == 1

    def test_percussion_channel_excluded(self):
        notes = [gn(60 + k, k * 16, k * 16 + 4, channel=9) for k in range(5)]
        assert extract_melodies(grid_of(notes)) == []

    def test_effect_programs_excluded(self):
        notes = [gn(60 + k, k * 16, k * 16 + 4, program=96) for k in range(5)]
        assert extract_melodies(grid_of(notes)) == []

    def test_out_of_range_pitches_rejected(self):
        good = [gn(60, 0, 4), gn(64, 16, 20), gn(67, 32, 36), gn(65, 48, 52), gn(62, 60, 64)]
        bad = [gn(110, 8, 10), gn(15, 24, 26)]
        melodies = extract_melodies(grid_of(good + bad))
        assert len(melodies) == 1
        assert all(21 <= n.pitch <= 108 for n in melodies[0])

    def test_unquantized_segment_rejected(self):
        with pytest.raises(ValueError, match="quantized"):
            extract_melodies(grid_of([], quantized=False))


class TestSliceFourBars:
    @staticmethod
    def walk(bars, start=0):
        pitches = [60, 62, 64, 65, 67, 69, 71, 72]
        return [
            NoteEvent(pitches[k % 8], start + k * 8, 6) for k in range(bars * 2)
        ]

    def test_six_bars_three_windows(self):
        assert len(slice_four_bars(self.walk(6))) == 3

    def test_four_bars_one_window(self):
        assert len(slice_four_bars(self.walk(4))) == 1

    def test_window_equals_reencoded_clip(self):
        melody = self.walk(6)
        windows = slice_four_bars(melody)
        # independent re-encoding oracle for the second window (offset 16)
        clipped = []
        for n in melody:
            if 16 <= n.onset_step < 80:
                clipped.append(
                    NoteEvent(n.pitch, n.onset_step - 16, min(n.duration_steps, 80 - n.onset_step))
                )
        assert windows[1] == encode_melody(clipped)

    def test_right_edge_truncation(self):
        melody = self.walk(4)
        melody[-1] = NoteEvent(72, 60, 20)  # runs past the window
        window = slice_four_bars(melody)[0]
        assert window.tokens[60] == 72
        assert window.tokens[63] == NOTE_HOLD

    def test_inadmissible_windows_dropped(self):
        # only two distinct pitches in the last 4 bars
        melody = [NoteEvent(60, 8 * k, 4) for k in range(12)]
        melody[0] = NoteEvent(64, 0, 4)
        melody[1] = NoteEvent(67, 8, 4)
        windows = slice_four_bars(melody)
        assert all(len(set(w.onset_pitches())) >= 3 for w in windows)


class TestPipeline:
    def test_file_to_windows(self):
        pitches = [60, 62, 64, 65, 67, 69, 71, 72] * 9  # 72 sixteenths = 4.5 bars
        data = simple_melody_file(pitches)
        windows = ingest_file(data)
        assert len(windows) >= 1
        for w in windows:
            assert len(w.tokens) == 64
            assert all(0 <= t <= NOTE_HOLD for t in w.tokens)

    def test_determinism(self):
        data = simple_melody_file([60, 64, 67, 71] * 6)
        assert ingest_file(data) == ingest_file(data)

    def test_monophonic_output(self):
        # chords everywhere; windows must be monophonic token rows
        step = 120
        events = [time_signature(0, 4, 2)]
        for k in range(20):
            base = 55 + (k * 3) % 12
            events.append(note_on(0 if k == 0 else step * 3, base))
            events.append(note_on(0, base + 4))
            events.append(note_on(0, base + 7))
            events.append(note_off(step, base))
            events.append(note_off(0, base + 4))
            events.append(note_off(0, base + 7))
        events.append(end_of_track())
        windows = ingest_file(smf([track(*events)]))
        assert windows, "expected at least one window from 20 chords"
        for w in windows:
            highest = []
            for tok in w.tokens:
                if tok < NOTE_OFF:
                    highest.append(tok % 12)
            assert set(highest) <= {(55 + k * 3 + 7) % 12 for k in range(20)}
