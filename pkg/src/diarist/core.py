"""Domain types and file I/O for diarization data.

Segments and annotations carry "who spoke when" as labeled time intervals;
frame matrices carry the same information (or features, or probabilities)
on a fixed-rate frame grid.  RTTM and UEM are the on-disk interchange
formats for annotations and scoring regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError


@dataclass(frozen=True, order=True)
class Segment:
    """A labeled time interval, in seconds."""

    start: float
    end: float
    label: str

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"segment start must be >= 0, got {self.start}")
        if self.end <= self.start:
            raise ValueError(f"segment end must exceed start, got [{self.start}, {self.end})")
        if not self.label:
            raise ValueError("segment label must be a non-empty string")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Annotation:
    """All labeled segments of one recording."""

    recording_id: str
    segments: list[Segment] = field(default_factory=list)

    def normalized(self) -> "Annotation":
        """Return a copy with same-speaker overlapping or touching segments merged.

        Idempotent; segments come out sorted by (start, end, label).
        """
        by_label: dict[str, list[Segment]] = {}
        for seg in self.segments:
            by_label.setdefault(seg.label, []).append(seg)
        merged: list[Segment] = []
        for label, segs in by_label.items():
            segs = sorted(segs)
            cur_start, cur_end = segs[0].start, segs[0].end
            for seg in segs[1:]:
                if seg.start <= cur_end:
                    cur_end = max(cur_end, seg.end)
                else:
                    merged.append(Segment(cur_start, cur_end, label))
                    cur_start, cur_end = seg.start, seg.end
            merged.append(Segment(cur_start, cur_end, label))
        return Annotation(self.recording_id, sorted(merged))

    def speakers(self) -> list[str]:
        return sorted({seg.label for seg in self.segments})

    def duration(self) -> float:
        """End of the last segment (0 for an empty annotation)."""
        return max((seg.end for seg in self.segments), default=0.0)

    def total_speech(self) -> float:
        """Sum of segment durations; overlap counted once per speaker."""
        return sum(seg.duration for seg in self.normalized().segments)

    def crop(self, start: float, end: float) -> "Annotation":
        """Segments intersected with [start, end)."""
        out = []
        for seg in self.segments:
            s, e = max(seg.start, start), min(seg.end, end)
            if e > s:
                out.append(Segment(s, e, seg.label))
        return Annotation(self.recording_id, out)


@dataclass
class FrameMatrix:
    """A T'xC real matrix on a fixed frame grid.

    Frame t covers [start_time + t / frame_rate, start_time + (t + 1) / frame_rate).
    """

    data: np.ndarray
    frame_rate: float
    start_time: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"frame matrix must be 2-D, got shape {self.data.shape}")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_channels(self) -> int:
        return self.data.shape[1]

    @property
    def end_time(self) -> float:
        return self.start_time + self.num_frames / self.frame_rate

    def frame_midpoints(self) -> np.ndarray:
        return self.start_time + (np.arange(self.num_frames) + 0.5) / self.frame_rate

    def crop(self, start: float, end: float) -> "FrameMatrix":
        """Frames whose span falls inside [start, end), by index arithmetic."""
        i0 = int(round((start - self.start_time) * self.frame_rate))
        i1 = int(round((end - self.start_time) * self.frame_rate))
        i0, i1 = max(i0, 0), min(i1, self.num_frames)
        return FrameMatrix(self.data[i0:i1], self.frame_rate, self.start_time + i0 / self.frame_rate)


@dataclass
class Uem:
    """Scored regions of one recording (un-partitioned evaluation map)."""

    recording_id: str
    scored_regions: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        prev_end = None
        for start, end in self.scored_regions:
            if end <= start:
                raise ValueError(f"UEM region end must exceed start, got [{start}, {end})")
            if prev_end is not None and start < prev_end:
                raise ValueError("UEM regions must be disjoint and sorted")
            prev_end = end

    def total(self) -> float:
        return sum(end - start for start, end in self.scored_regions)


# ---------------------------------------------------------------------------
# RTTM / UEM text formats
# ---------------------------------------------------------------------------

def read_rttm(text: str) -> list[Annotation]:
    """Parse RTTM text into one Annotation per recording id.

    Lines look like ``SPEAKER rec1 1 0.50 1.25 <NA> <NA> spk0 <NA> <NA>``;
    ``#`` starts a comment.  Raises ParseError with the offending line number
    on malformed input.
    """
    annotations: dict[str, Annotation] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 9:
            raise ParseError(f"RTTM line {lineno}: expected >= 9 fields, got {len(fields)}")
        if fields[0] != "SPEAKER":
            raise ParseError(f"RTTM line {lineno}: unsupported type field {fields[0]!r}")
        rec, onset_s, dur_s, label = fields[1], fields[3], fields[4], fields[7]
        try:
            onset, dur = float(onset_s), float(dur_s)
        except ValueError:
            raise ParseError(f"RTTM line {lineno}: bad onset/duration {onset_s!r} {dur_s!r}") from None
        if dur <= 0:
            raise ParseError(f"RTTM line {lineno}: duration must be positive, got {dur}")
        if onset < 0:
            raise ParseError(f"RTTM line {lineno}: onset must be >= 0, got {onset}")
        ann = annotations.setdefault(rec, Annotation(rec))
        ann.segments.append(Segment(onset, onset + dur, label))
    return list(annotations.values())


def write_rttm(annotations: Iterable[Annotation]) -> str:
    """Serialize annotations as RTTM; onset and duration use 3 decimals."""
    lines = []
    for ann in annotations:
        for seg in sorted(ann.segments):
            lines.append(
                f"SPEAKER {ann.recording_id} 1 {seg.start:.3f} {seg.duration:.3f}"
                f" <NA> <NA> {seg.label} <NA> <NA>"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def read_uem(text: str) -> list[Uem]:
    """Parse UEM text (``<rec> 1 <start> <end>`` per line)."""
    regions: dict[str, list[tuple[float, float]]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"UEM line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            start, end = float(fields[2]), float(fields[3])
        except ValueError:
            raise ParseError(f"UEM line {lineno}: bad start/end") from None
        if end <= start:
            raise ParseError(f"UEM line {lineno}: end must exceed start")
        regions.setdefault(fields[0], []).append((start, end))
    return [Uem(rec, sorted(regs)) for rec, regs in regions.items()]


def write_uem(uems: Iterable[Uem]) -> str:
    lines = []
    for uem in uems:
        for start, end in uem.scored_regions:
            lines.append(f"{uem.recording_id} 1 {start:.3f} {end:.3f}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Segment-level <-> frame-level conversions
# ---------------------------------------------------------------------------

def annotation_to_frames(
    annotation: Annotation,
    window: tuple[float, float],
    frame_rate: float,
    speaker_order: Sequence[str],
) -> FrameMatrix:
    """Rasterize an annotation onto a binary frame grid.

    Entry (t, s) is 1 iff speaker ``speaker_order[s]`` is active at the
    midpoint of frame t.  Speakers absent from the window yield zero columns.
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    start, end = window
    num_frames = int(round((end - start) * frame_rate))
    data = np.zeros((num_frames, len(speaker_order)), dtype=np.int8)
    midpoints = start + (np.arange(num_frames) + 0.5) / frame_rate
    index = {label: i for i, label in enumerate(speaker_order)}
    for seg in annotation.segments:
        col = index.get(seg.label)
        if col is None:
            continue
        data[:, col] |= (midpoints >= seg.start) & (midpoints < seg.end)
    return FrameMatrix(data, frame_rate, start)


def frames_to_annotation(
    frames: FrameMatrix,
    speaker_names: Sequence[str],
    recording_id: str = "",
) -> Annotation:
    """Turn maximal runs of 1s in a binary frame matrix into segments."""
    data = np.asarray(frames.data)
    if data.shape[1] != len(speaker_names):
        raise ValueError(f"{data.shape[1]} columns but {len(speaker_names)} speaker names")
    segments = []
    for col, label in enumerate(speaker_names):
        active = data[:, col] != 0
        if not active.any():
            continue
        edges = np.flatnonzero(np.diff(np.concatenate(([0], active.view(np.int8), [0]))))
        for run_start, run_end in edges.reshape(-1, 2):
            segments.append(
                Segment(
                    frames.start_time + run_start / frames.frame_rate,
                    frames.start_time + run_end / frames.frame_rate,
                    label,
                )
            )
    return Annotation(recording_id, sorted(segments))
