"""Token-level melody representation and the on-disk corpus format.

A melody is a fixed 64-step grid: four 4/4 bars of sixteenth notes.  Each
step holds one token.  Values 0-127 start a new note at that MIDI pitch,
128 means silence (note off) and 129 sustains whatever the previous step
started.  A melody may not open with a hold token; a hold that follows
silence is silence.

The corpus file format is line-delimited text: ``#``-prefixed header lines
carry provenance and seed, then one melody per line as 64 space-separated
integers followed by a split tag (``train``/``valid``/``test``).  Melodies
are referenced by zero-based line index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_STEPS = 64
STEPS_PER_BAR = 16
NUM_BARS = 4
NOTE_OFF = 128
NOTE_HOLD = 129
VOCAB_SIZE = 130
PITCH_MIN = 21  # 88-key piano range
PITCH_MAX = 108

SPLITS = ("train", "valid", "test")


class MelodyError(ValueError):
    """Malformed token sequence, note list, or corpus file."""


@dataclass(frozen=True)
class TokenMelody:
    """A 64-step monophonic melody as a tuple of tokens in [0, 129]."""

    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != NUM_STEPS:
            raise MelodyError(
                f"melody must have {NUM_STEPS} steps, got {len(self.tokens)}"
            )
        for step, tok in enumerate(self.tokens):
            if not 0 <= tok <= NOTE_HOLD:
                raise MelodyError(f"token {tok} at step {step} outside [0, 129]")
        if self.tokens[0] == NOTE_HOLD:
            raise MelodyError("melody cannot open with a hold token")

    def onset_steps(self) -> list[int]:
        return [s for s, t in enumerate(self.tokens) if t < NOTE_OFF]

    def onset_pitches(self) -> list[int]:
        return [t for t in self.tokens if t < NOTE_OFF]

    def num_onsets(self) -> int:
        return len(self.onset_pitches())


def is_admissible(melody: TokenMelody, min_distinct_pitches: int = 3) -> bool:
    """Corpus admissibility: at least one onset and enough distinct pitches."""
    pitches = melody.onset_pitches()
    return len(pitches) >= 1 and len(set(pitches)) >= min_distinct_pitches


@dataclass(frozen=True, order=True)
class NoteEvent:
    """A quantized note: pitch within the 88-key piano range, grid onset, duration."""

    pitch: int
    onset_step: int
    duration_steps: int

    def __post_init__(self) -> None:
        if not PITCH_MIN <= self.pitch <= PITCH_MAX:
            raise MelodyError(f"pitch {self.pitch} outside piano range [21, 108]")
        if self.onset_step < 0:
            raise MelodyError(f"negative onset step {self.onset_step}")
        if self.duration_steps < 1:
            raise MelodyError(f"duration must be >= 1, got {self.duration_steps}")


def encode_melody(notes: Sequence[NoteEvent], length: int = NUM_STEPS) -> TokenMelody:
    """Render a sorted, monophonic note list onto the token grid.

    Step t carries the pitch if an onset occurs at t, 129 while the note is
    held and 128 during silence.  A new onset truncates any held note; notes
    running past the grid are truncated at the last step.
    """
    prev_onset = -1
    for note in notes:
        if note.onset_step < prev_onset:
            raise MelodyError("notes must be sorted by onset step")
        if note.onset_step == prev_onset:
            raise MelodyError(
                f"two onsets at step {note.onset_step}: monophonic violation"
            )
        if note.onset_step >= length:
            raise MelodyError(f"onset {note.onset_step} beyond grid of {length}")
        prev_onset = note.onset_step

    tokens = [NOTE_OFF] * length
    for k, note in enumerate(notes):
        end = note.onset_step + note.duration_steps
        if k + 1 < len(notes):
            end = min(end, notes[k + 1].onset_step)
        end = min(end, length)
        tokens[note.onset_step] = note.pitch
        for step in range(note.onset_step + 1, end):
            tokens[step] = NOTE_HOLD
    return TokenMelody(tuple(tokens))


def decode_tokens(melody: TokenMelody) -> list[NoteEvent]:
    """Inverse of :func:`encode_melody`.

    A hold token with no sounding note (hold after silence) is coerced to
    silence, so decoding is total on any valid melody.
    """
    notes: list[NoteEvent] = []
    pitch = onset = duration = -1
    for step, tok in enumerate(melody.tokens):
        if tok == NOTE_HOLD:
            if pitch >= 0:
                duration += 1
            continue
        if pitch >= 0:
            notes.append(NoteEvent(pitch, onset, duration))
            pitch = -1
        if tok != NOTE_OFF:
            pitch, onset, duration = tok, step, 1
    if pitch >= 0:
        notes.append(NoteEvent(pitch, onset, duration))
    return notes


def transpose(melody: TokenMelody, semitones: int) -> TokenMelody | None:
    """Shift all onset pitches; return None when any pitch leaves [21, 108].

    Callers treat None as a rejection signal and skip the augmentation for
    that melody.  Note-off and hold tokens are unchanged.
    """
    if not -12 <= semitones <= 12:
        raise MelodyError(f"transposition {semitones} outside [-12, 12]")
    shifted = []
    for tok in melody.tokens:
        if tok < NOTE_OFF:
            tok += semitones
            if not PITCH_MIN <= tok <= PITCH_MAX:
                return None
        shifted.append(tok)
    return TokenMelody(tuple(shifted))


@dataclass
class Corpus:
    """An ordered melody collection with per-melody split labels."""

    melodies: list[TokenMelody]
    splits: list[str]
    provenance: str = "synthetic"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.melodies) != len(self.splits):
            raise MelodyError("melodies and split labels must align")
        for label in self.splits:
            if label not in SPLITS:
                raise MelodyError(f"unknown split label {label!r}")

    def __len__(self) -> int:
        return len(self.melodies)

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise MelodyError(f"unknown split label {split!r}")
        return [i for i, label in enumerate(self.splits) if label == split]

    def subset(self, split: str) -> list[TokenMelody]:
        return [self.melodies[i] for i in self.indices(split)]

    def to_array(self, indices: Iterable[int] | None = None) -> np.ndarray:
        """Token matrix of shape (n, 64), dtype int64."""
        rows = self.melodies if indices is None else [self.melodies[i] for i in indices]
        return np.array([m.tokens for m in rows], dtype=np.int64).reshape(-1, NUM_STEPS)

    def dumps(self) -> str:
        lines = [f"# provenance={self.provenance} seed={self.seed}"]
        for melody, label in zip(self.melodies, self.splits):
            lines.append(" ".join(str(t) for t in melody.tokens) + " " + label)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Corpus":
        provenance, seed = "synthetic", 0
        melodies: list[TokenMelody] = []
        splits: list[str] = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for field in line[1:].split():
                    if field.startswith("provenance="):
                        provenance = field.split("=", 1)[1]
                    elif field.startswith("seed="):
                        seed = int(field.split("=", 1)[1])
                continue
            fields = line.split()
            if len(fields) != NUM_STEPS + 1:
                raise MelodyError(
                    f"line {lineno}: expected {NUM_STEPS} tokens plus split tag"
                )
            try:
                tokens = tuple(int(f) for f in fields[:-1])
            except ValueError as exc:
                raise MelodyError(f"line {lineno}: non-integer token") from exc
            melodies.append(TokenMelody(tokens))
            splits.append(fields[-1])
        return cls(melodies, splits, provenance=provenance, seed=seed)

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return cls.loads(Path(path).read_text())


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus generator.

    Melodies come from a bounded random pitch walk with geometric note
    durations.  The per-melody interval spread is drawn log-normally
    (``walk_scale_median`` * exp(``walk_scale_sigma`` * N(0,1))) and also
    widens the walk window, which makes the corpus-level Contour and Pitch
    Range distributions right-skewed with heavy tails; onsets mostly sit on
    strong subdivisions (a per-melody rhythm unit of 4, 2 or 1 sixteenths),
    skewing Rhythm Complexity the same way.  Gaussianizing any of the three
    is therefore a non-trivial exercise.
    """

    size: int = 2048
    onset_density: tuple[float, float] = (0.18, 0.60)
    walk_scale_median: float = 1.3
    walk_scale_sigma: float = 0.85
    walk_scale_min: float = 0.0
    walk_scale_max: float = 10.0
    rhythm_units: tuple[int, ...] = (4, 2, 1)
    rhythm_unit_probs: tuple[float, ...] = (0.5, 0.3, 0.2)
    halfwidth_base: float = 4.0
    halfwidth_per_scale: float = 3.2
    halfwidth_max: int = 42
    valid_every: int = 10  # one melody in ten is validation, two are test
    min_distinct_pitches: int = 3
    min_onsets: int = NUM_BARS  # >= 1 onset per bar on average


def _reflect(value: int, lo: int, hi: int) -> int:
    # fold a pitch back into [lo, hi]; span is always wide enough here
    while value < lo or value > hi:
        if value < lo:
            value = 2 * lo - value
        else:
            value = 2 * hi - value
    return value


def _walk_melody(cfg: SynthConfig, rng: np.random.Generator) -> TokenMelody | None:
    density = rng.uniform(*cfg.onset_density)
    scale = min(
        cfg.walk_scale_max,
        max(
            cfg.walk_scale_min,
            cfg.walk_scale_median * float(np.exp(cfg.walk_scale_sigma * rng.standard_normal())),
        ),
    )
    unit = int(rng.choice(cfg.rhythm_units, p=cfg.rhythm_unit_probs))
    halfwidth = int(
        min(cfg.halfwidth_max, max(6.0, cfg.halfwidth_base + cfg.halfwidth_per_scale * scale))
    )
    lo = max(PITCH_MIN, 64 - halfwidth + int(rng.integers(-8, 9)))
    hi = min(PITCH_MAX, lo + 2 * halfwidth)
    pitch = (lo + hi) // 2

    spacing_p = min(0.9, max(0.08, density * unit))
    step = unit * int(rng.integers(0, 3))
    notes: list[NoteEvent] = []
    while step < NUM_STEPS:
        spacing = unit * int(rng.geometric(spacing_p))
        duration = max(1, round(spacing * float(rng.uniform(0.5, 1.0))))
        notes.append(NoteEvent(pitch, step, min(duration, NUM_STEPS - step)))
        step += spacing
        interval = int(round(float(rng.normal(0.0, scale))))
        pitch = _reflect(pitch + interval, lo, hi)

    melody = encode_melody(notes)
    if melody.num_onsets() < cfg.min_onsets:
        return None
    if len(set(melody.onset_pitches())) < cfg.min_distinct_pitches:
        return None
    return melody


def generate_synthetic_corpus(cfg: SynthConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus; every melody is admissible."""
    if cfg.size <= 0:
        raise MelodyError(f"corpus size must be positive, got {cfg.size}")
    melodies: list[TokenMelody] = []
    splits: list[str] = []
    for index in range(cfg.size):
        rng = np.random.default_rng((seed, index))
        melody = None
        for _ in range(256):
            melody = _walk_melody(cfg, rng)
            if melody is not None:
                break
        if melody is None:  # generator parameters would have to be hostile
            raise MelodyError(f"could not generate admissible melody {index}")
        melodies.append(melody)
        splits.append(_split_for_index(index, cfg.valid_every))
    return Corpus(melodies, splits, provenance="synthetic", seed=seed)


def _split_for_index(index: int, valid_every: int = 10) -> str:
    residue = index % valid_every
    if residue == valid_every - 2:
        return "valid"
    if residue in (valid_every - 1, valid_every - 3):
        return "test"
    return "train"
