"""Scalar musical attributes computed from token melodies.

Three attributes are supported: Contour (mean absolute pitch step between
consecutive onsets), Rhythm Complexity (Toussaint metrical complexity over
the 64-step grid, normalized to [0, 1]) and Pitch Range (highest minus
lowest onset pitch).  All three are invariant under transposition.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .melody_core import NOTE_OFF, NUM_BARS, Corpus, TokenMelody


class AttributeValueError(ValueError):
    """Base class for attribute computation failures."""


class UndefinedAttributeError(AttributeValueError):
    """The melody has no onsets, so the attribute has no value."""


class AttributeKind(enum.Enum):
    CONTOUR = "contour"
    RHYTHM_COMPLEXITY = "rhythm_complexity"
    PITCH_RANGE = "pitch_range"

    @classmethod
    def from_name(cls, name: str) -> "AttributeKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise AttributeValueError(f"unknown attribute {name!r}")


ALL_KINDS = tuple(AttributeKind)

# Duple-meter weight hierarchy for one 4/4 bar on the sixteenth grid,
# strongest pulse first (levels 5..1), tiled over the four bars.
METRICAL_WEIGHTS_BAR = (5, 1, 2, 1, 3, 1, 2, 1, 4, 1, 2, 1, 3, 1, 2, 1)
METRICAL_WEIGHTS = METRICAL_WEIGHTS_BAR * NUM_BARS
_WEIGHTS_DESCENDING = np.sort(np.array(METRICAL_WEIGHTS, dtype=np.float64))[::-1]
_MAX_METRICITY = np.concatenate([[0.0], np.cumsum(_WEIGHTS_DESCENDING)])


def _tokens_of(melody: TokenMelody | Sequence[int]) -> Sequence[int]:
    return melody.tokens if isinstance(melody, TokenMelody) else melody


def _onsets(melody: TokenMelody | Sequence[int]) -> tuple[list[int], list[int]]:
    steps, pitches = [], []
    for step, tok in enumerate(_tokens_of(melody)):
        if tok < NOTE_OFF:
            steps.append(step)
            pitches.append(tok)
    if not pitches:
        raise UndefinedAttributeError("melody has no onsets")
    return steps, pitches


def contour(melody: TokenMelody | Sequence[int]) -> float:
    """Mean absolute pitch difference between consecutive onsets (>= 0)."""
    _, pitches = _onsets(melody)
    if len(pitches) < 2:
        return 0.0
    diffs = np.abs(np.diff(np.asarray(pitches, dtype=np.float64)))
    return float(diffs.mean())


def pitch_range(melody: TokenMelody | Sequence[int]) -> float:
    """Highest minus lowest onset pitch (>= 0)."""
    _, pitches = _onsets(melody)
    return float(max(pitches) - min(pitches))


def rhythm_complexity(melody: TokenMelody | Sequence[int]) -> float:
    """Toussaint metrical complexity of the onset pattern, in [0, 1].

    With n onsets of total metrical weight M, the complexity is
    (M_max(n) - M) / M_max(n) where M_max(n) sums the n largest weights in
    the tiled table; 0 means maximally on-the-beat.
    """
    steps, _ = _onsets(melody)
    metricity = float(sum(METRICAL_WEIGHTS[s] for s in steps))
    max_metricity = float(_MAX_METRICITY[len(steps)])
    return (max_metricity - metricity) / max_metricity


_COMPUTE = {
    AttributeKind.CONTOUR: contour,
    AttributeKind.RHYTHM_COMPLEXITY: rhythm_complexity,
    AttributeKind.PITCH_RANGE: pitch_range,
}


def compute_attribute(kind: AttributeKind, melody: TokenMelody | Sequence[int]) -> float:
    return _COMPUTE[kind](melody)


@dataclass
class AttributeTable:
    """Per-melody attribute values aligned to corpus indices.

    ``values`` has one row per melody and one column per kind; NaN marks a
    melody whose attribute is undefined (downstream consumers exclude those
    rows and report the count).
    """

    kinds: tuple[AttributeKind, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(
            -1, len(self.kinds)
        )

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, kind: AttributeKind) -> np.ndarray:
        return self.values[:, self.kinds.index(kind)]

    def missing_count(self, kind: AttributeKind) -> int:
        return int(np.isnan(self.column(kind)).sum())

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["melody_index", "kind", "value"])
            for index in range(len(self)):
                for k, kind in enumerate(self.kinds):
                    value = self.values[index, k]
                    if not np.isnan(value):
                        writer.writerow([index, kind.value, repr(float(value))])

    @classmethod
    def load_csv(cls, path: str | Path, size: int | None = None) -> "AttributeTable":
        rows: list[tuple[int, AttributeKind, float]] = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["melody_index", "kind", "value"]:
                raise AttributeValueError(f"unrecognized attribute table header {header}")
            for fields in reader:
                rows.append(
                    (int(fields[0]), AttributeKind.from_name(fields[1]), float(fields[2]))
                )
        n = size if size is not None else (max(r[0] for r in rows) + 1 if rows else 0)
        values = np.full((n, len(ALL_KINDS)), np.nan)
        for index, kind, value in rows:
            values[index, ALL_KINDS.index(kind)] = value
        return cls(ALL_KINDS, values)


def compute_attribute_table(
    corpus: Corpus, kinds: Iterable[AttributeKind] = ALL_KINDS
) -> AttributeTable:
    """Attribute matrix for a corpus; undefined values recorded as NaN."""
    kinds = tuple(kinds)
    values = np.full((len(corpus), len(kinds)), np.nan)
    for index, melody in enumerate(corpus.melodies):
        for k, kind in enumerate(kinds):
            try:
                values[index, k] = compute_attribute(kind, melody)
            except UndefinedAttributeError:
                pass
    return AttributeTable(kinds, values)
