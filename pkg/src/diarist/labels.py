"""Powerset label encoding, permutation-invariant losses, dataset capacity stats.

A segmentation model emits either one activity per speaker slot (multilabel)
or one class per subset of simultaneously active slots (powerset).  Training
losses are minimized over all assignments of predicted slots to reference
speakers, since slot numbering is arbitrary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .core import Annotation

PROB_CLAMP = 1e-7
MAX_EXHAUSTIVE_SPEAKERS = 8


@dataclass(frozen=True)
class PowersetTable:
    """Ordered enumeration of speaker subsets of size <= max_overlap over n slots.

    Classes are ordered by subset size then lexicographic indices, so class 0
    is always silence and the ordering is stable across checkpoints.
    """

    num_speakers: int
    max_overlap: int
    classes: tuple[tuple[int, ...], ...]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def powerset_table(num_speakers: int, max_overlap: int) -> PowersetTable:
    if not 1 <= max_overlap <= num_speakers:
        raise ValueError(f"need 1 <= max_overlap <= num_speakers, got K={max_overlap}, N={num_speakers}")
    classes = []
    for size in range(max_overlap + 1):
        classes.extend(itertools.combinations(range(num_speakers), size))
    table = PowersetTable(num_speakers, max_overlap, tuple(classes))
    assert table.num_classes == sum(comb(num_speakers, i) for i in range(max_overlap + 1))
    return table


def multilabel_to_powerset(table: PowersetTable, labels: np.ndarray) -> np.ndarray:
    """Map binary TxN activity to class indices.

    Frames with more than max_overlap active speakers keep the speakers with
    the largest total activity duration over the whole matrix (ties broken by
    lower speaker index).
    """
    labels = np.asarray(labels)
    if labels.shape[1] != table.num_speakers:
        raise ValueError(f"expected {table.num_speakers} columns, got {labels.shape[1]}")
    index = {cls: i for i, cls in enumerate(table.classes)}
    totals = labels.sum(axis=0)
    # Rank speakers for the truncation rule: longest activity first, then index.
    rank = sorted(range(table.num_speakers), key=lambda s: (-totals[s], s))
    rank_pos = {s: p for p, s in enumerate(rank)}
    classes = np.empty(labels.shape[0], dtype=np.int64)
    for t in range(labels.shape[0]):
        active = tuple(np.flatnonzero(labels[t]))
        if len(active) > table.max_overlap:
            active = tuple(sorted(sorted(active, key=rank_pos.get)[: table.max_overlap]))
        classes[t] = index[active]
    return classes


def powerset_to_multilabel(table: PowersetTable, classes: np.ndarray) -> np.ndarray:
    """Inverse of multilabel_to_powerset for frames with <= max_overlap speakers."""
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= table.num_classes):
        raise ValueError(f"class index out of range [0, {table.num_classes})")
    labels = np.zeros((len(classes), table.num_speakers), dtype=np.int8)
    for t, c in enumerate(classes):
        labels[t, list(table.classes[c])] = 1
    return labels


def powerset_marginals(table: PowersetTable, probs: np.ndarray) -> np.ndarray:
    """Per-speaker activity probabilities from a TxC class distribution."""
    probs = np.asarray(probs)
    member = np.zeros((table.num_classes, table.num_speakers))
    for c, cls in enumerate(table.classes):
        member[c, list(cls)] = 1.0
    return probs @ member


def remap_classes(table: PowersetTable, perm: tuple[int, ...]) -> np.ndarray:
    """Class-index lookup under a speaker permutation: slot s becomes perm[s]."""
    index = {cls: i for i, cls in enumerate(table.classes)}
    return np.array([index[tuple(sorted(perm[s] for s in cls))] for cls in table.classes], dtype=np.int64)


# ---------------------------------------------------------------------------
# Permutation-invariant losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PitResult:
    """Loss value and the optimal prediction-slot assignment.

    permutation[s] is the prediction column matched to reference column s.
    """

    loss: float
    permutation: tuple[int, ...]


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _bce_matrix(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """cost[i, j] = mean-over-time BCE of prediction column j against reference column i."""
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    # (T, 1, J) against (T, I, 1) -> (I, J)
    ll = ref.unsqueeze(2) * torch.log(p).unsqueeze(1) + (1 - ref.unsqueeze(2)) * torch.log(1 - p).unsqueeze(1)
    return -ll.mean(dim=0)


def pit_bce(pred, ref) -> PitResult:
    """Permutation-invariant binary cross entropy.

    The minimum over slot permutations is found by optimal assignment on the
    NxN column-pair cost matrix, which is exact because the loss decomposes
    over column pairs.
    """
    pred_t, ref_t = _as_tensor(pred), _as_tensor(ref)
    if pred_t.shape != ref_t.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred_t.shape)} vs ref {tuple(ref_t.shape)}")
    with torch.no_grad():
        cost = _bce_matrix(pred_t, ref_t).cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    perm = tuple(int(cols[np.argwhere(rows == i)[0, 0]]) for i in range(len(rows)))
    return PitResult(float(cost[rows, cols].mean()), perm)


def pit_bce_loss(pred: torch.Tensor, ref: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Differentiable PIT-BCE: the scalar loss at the optimal assignment."""
    result = pit_bce(pred.detach(), ref.detach())
    p = pred[:, list(result.permutation)].clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(ref * torch.log(p) + (1 - ref) * torch.log(1 - p)).mean()
    return loss, result.permutation


def pit_powerset_ce(pred, ref, table: PowersetTable) -> PitResult:
    """Permutation-invariant cross entropy over powerset classes.

    Exhaustive search over all N! speaker permutations with a precomputed
    class remap per permutation; guarded to N <= 8.
    """
    if table.num_speakers > MAX_EXHAUSTIVE_SPEAKERS:
        raise ValueError(f"exhaustive permutation search limited to N <= {MAX_EXHAUSTIVE_SPEAKERS}")
    pred_t, ref_t = _as_tensor(pred), _as_tensor(ref)
    if pred_t.shape[1] != table.num_classes:
        raise ValueError(f"expected {table.num_classes} classes, got {pred_t.shape[1]}")
    if pred_t.shape[0] != ref_t.shape[0]:
        raise ValueError("pred and ref must cover the same frames")
    ref_classes = multilabel_to_powerset(table, ref_t.cpu().numpy())
    with torch.no_grad():
        logp = torch.log(pred_t.clamp(min=PROB_CLAMP)).cpu().numpy()
    best_loss, best_perm = np.inf, None
    for perm in itertools.permutations(range(table.num_speakers)):
        remap = remap_classes(table, perm)
        loss = -logp[np.arange(len(ref_classes)), remap[ref_classes]].mean()
        if loss < best_loss - 1e-15:
            best_loss, best_perm = loss, perm
    return PitResult(float(best_loss), best_perm)


def pit_powerset_loss(
    pred: torch.Tensor, ref: torch.Tensor, table: PowersetTable
) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Differentiable powerset PIT loss at the optimal speaker permutation."""
    result = pit_powerset_ce(pred.detach(), ref.detach(), table)
    ref_classes = multilabel_to_powerset(table, ref.detach().cpu().numpy())
    remap = remap_classes(table, result.permutation)
    target = torch.as_tensor(remap[ref_classes], device=pred.device)
    logp = torch.log(pred.clamp(min=PROB_CLAMP))
    loss = -logp[torch.arange(len(target)), target].mean()
    return loss, result.permutation


# ---------------------------------------------------------------------------
# Dataset capacity statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CapacityStats:
    """Smallest N and K covering the requested fraction of windows."""

    num_speakers: int
    max_overlap: int
    speaker_coverage: tuple[float, ...]
    overlap_coverage: tuple[float, ...]


def _max_concurrency(annotation: Annotation, start: float, end: float) -> int:
    events = []
    for seg in annotation.segments:
        s, e = max(seg.start, start), min(seg.end, end)
        if e > s:
            events.append((s, 1))
            events.append((e, -1))
    peak = count = 0
    for _, delta in sorted(events):
        count += delta
        peak = max(peak, count)
    return peak


def speaker_capacity_stats(
    annotations: list[Annotation], window: float, coverage_target: float = 0.97
) -> CapacityStats:
    """Per-window speaker counts over non-overlapping windows of the dataset.

    Returns the smallest N such that at least coverage_target of windows
    contain <= N speakers, and likewise the smallest K for the maximum number
    of simultaneously active speakers.  The final partial window of each
    recording is included.
    """
    if not annotations:
        raise ValueError("empty dataset")
    if not 0 < coverage_target <= 1:
        raise ValueError("coverage_target must lie in (0, 1]")
    speaker_counts, overlap_counts = [], []
    for ann in annotations:
        ann = ann.normalized()
        duration = ann.duration()
        num_windows = max(1, int(np.ceil(duration / window - 1e-9)))
        for i in range(num_windows):
            start, end = i * window, min((i + 1) * window, duration)
            cropped = ann.crop(start, end)
            speaker_counts.append(len(cropped.speakers()))
            overlap_counts.append(_max_concurrency(ann, start, end))

    def coverage(counts: list[int]) -> tuple[float, ...]:
        counts_arr = np.asarray(counts)
        top = counts_arr.max(initial=0)
        return tuple(float((counts_arr <= n).mean()) for n in range(top + 1))

    spk_cov, ovl_cov = coverage(speaker_counts), coverage(overlap_counts)
    n = next(i for i, c in enumerate(spk_cov) if c >= coverage_target)
    k = next(i for i, c in enumerate(ovl_cov) if c >= coverage_target)
    return CapacityStats(n, k, spk_cov, ovl_cov)
