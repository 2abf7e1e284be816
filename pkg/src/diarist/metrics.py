"""Diarization error rate with optimal speaker mapping, collar and breakdown.

Scoring is exact interval arithmetic on segment boundaries: the timeline is
cut at every boundary and each elementary interval contributes
``duration * count`` to the error components.  Overlap is counted per
speaker, and an optional collar removes a margin around every reference
boundary from scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Annotation, Uem

Intervals = list[tuple[float, float]]


@dataclass(frozen=True)
class DERBreakdown:
    """Error components in seconds plus the scored reference speech."""

    missed: float
    false_alarm: float
    confusion: float
    scored_speech: float

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.scored_speech


def _merge(intervals: Intervals) -> Intervals:
    merged: Intervals = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _subtract(intervals: Intervals, cuts: Intervals) -> Intervals:
    """Set difference of two sorted disjoint interval lists."""
    out: Intervals = []
    for start, end in intervals:
        pos = start
        for c0, c1 in cuts:
            if c1 <= pos or c0 >= end:
                continue
            if c0 > pos:
                out.append((pos, c0))
            pos = max(pos, c1)
            if pos >= end:
                break
        if pos < end:
            out.append((pos, end))
    return out


def _intersection(a_segs: Intervals, b_segs: Intervals) -> float:
    return sum(
        max(0.0, min(ae, be) - max(as_, bs))
        for as_, ae in a_segs
        for bs, be in b_segs
    )


def _by_speaker(annotation: Annotation) -> dict[str, Intervals]:
    out: dict[str, Intervals] = {}
    for seg in annotation.segments:
        out.setdefault(seg.label, []).append((seg.start, seg.end))
    return {label: sorted(segs) for label, segs in out.items()}


def _max_assignment(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return float(matrix[rows, cols].sum())


def optimal_mapping(ref: Annotation, hyp: Annotation) -> dict[str, str]:
    """One-to-one speaker mapping maximizing total co-occurrence duration.

    Among optimal mappings, ties are broken toward lexicographically smaller
    speaker labels (reference labels first, then hypothesis labels).
    Zero-co-occurrence pairs are never part of the mapping.
    """
    ref_spk = sorted(_by_speaker(ref.normalized()).items())
    hyp_spk = sorted(_by_speaker(hyp.normalized()).items())
    if not ref_spk or not hyp_spk:
        return {}
    cooc = np.array([[_intersection(rsegs, hsegs) for _, hsegs in hyp_spk] for _, rsegs in ref_spk])
    total_opt = _max_assignment(cooc)
    tol = 1e-9 * max(1.0, total_opt)

    mapping: dict[str, str] = {}
    fixed_value = 0.0
    free_rows = list(range(len(ref_spk)))
    free_cols = list(range(len(hyp_spk)))
    for i in list(free_rows):
        # Fix (i, j) only if some optimal mapping extends it.
        for j in free_cols:
            if cooc[i, j] <= 0:
                continue
            rest_rows = [r for r in free_rows if r != i]
            rest_cols = [c for c in free_cols if c != j]
            rest = cooc[np.ix_(rest_rows, rest_cols)]
            if fixed_value + cooc[i, j] + _max_assignment(rest) >= total_opt - tol:
                mapping[ref_spk[i][0]] = hyp_spk[j][0]
                fixed_value += cooc[i, j]
                free_rows.remove(i)
                free_cols.remove(j)
                break
    return mapping


def der(
    ref: Annotation,
    hyp: Annotation,
    collar: float = 0.0,
    uem: Uem | None = None,
) -> DERBreakdown:
    """Score one hypothesis against one reference.

    Per elementary interval: missed is the reference speaker surplus, false
    alarm the hypothesis surplus, and confusion the remaining unmatched pairs
    after applying the optimal speaker mapping.  Raises ValueError when no
    reference speech is scored.
    """
    if collar < 0:
        raise ValueError("collar must be >= 0")
    ref, hyp = ref.normalized(), hyp.normalized()

    if uem is not None:
        regions = list(uem.scored_regions)
    else:
        points = [s.start for s in ref.segments + hyp.segments]
        ends = [s.end for s in ref.segments + hyp.segments]
        regions = [(min(points), max(ends))] if points else []
    if collar > 0:
        cuts = []
        for seg in ref.segments:
            cuts.append((seg.start - collar, seg.start + collar))
            cuts.append((seg.end - collar, seg.end + collar))
        regions = _subtract(regions, _merge(cuts))

    mapping = optimal_mapping(ref, hyp)
    ref_spk = _by_speaker(ref)
    hyp_spk = _by_speaker(hyp)
    mapped = {h: r for r, h in mapping.items()}

    boundaries = set()
    for start, end in regions:
        boundaries.update((start, end))
        for segs in list(ref_spk.values()) + list(hyp_spk.values()):
            for s, e in segs:
                if start < s < end:
                    boundaries.add(s)
                if start < e < end:
                    boundaries.add(e)
    cut_points = sorted(boundaries)

    missed = false_alarm = confusion = scored = 0.0
    for a, b in zip(cut_points[:-1], cut_points[1:]):
        mid = (a + b) / 2
        if not any(r0 <= mid < r1 for r0, r1 in regions):
            continue
        length = b - a
        n_ref = n_match = 0
        active_hyp = {
            label for label, segs in hyp_spk.items() if any(s <= mid < e for s, e in segs)
        }
        for label, segs in ref_spk.items():
            if any(s <= mid < e for s, e in segs):
                n_ref += 1
                if mapping.get(label) in active_hyp:
                    n_match += 1
        n_hyp = len(active_hyp)
        scored += n_ref * length
        missed += max(0, n_ref - n_hyp) * length
        false_alarm += max(0, n_hyp - n_ref) * length
        confusion += (min(n_ref, n_hyp) - n_match) * length

    if scored <= 0:
        raise ValueError("no scored reference speech; DER is undefined")
    return DERBreakdown(missed, false_alarm, confusion, scored)


def der_corpus(
    pairs: dict[str, tuple[Annotation, Annotation]],
    collar: float = 0.0,
    uems: dict[str, Uem] | None = None,
    min_duration: float | None = None,
) -> tuple[dict[str, DERBreakdown], float]:
    """Score a corpus and macro-average the per-file DER.

    ``pairs`` maps recording id to (reference, hypothesis).  Files shorter
    than ``min_duration`` (UEM total when given, else reference extent) are
    kept in the per-file report but excluded from the macro average.
    """
    if not pairs:
        raise ValueError("need at least one (reference, hypothesis) pair")
    per_file: dict[str, DERBreakdown] = {}
    kept = []
    for rec_id, (ref, hyp) in pairs.items():
        uem = uems.get(rec_id) if uems else None
        breakdown = der(ref, hyp, collar=collar, uem=uem)
        per_file[rec_id] = breakdown
        file_duration = uem.total() if uem is not None else ref.duration()
        if min_duration is None or file_duration >= min_duration:
            kept.append(breakdown.der)
    if not kept:
        raise ValueError("every file was excluded by the duration filter")
    return per_file, float(np.mean(kept))
