"""Sliding-window inference: local segmentation, clustering, aggregation.

Long recordings are processed as fixed-length windows.  Each window's local
speaker slots are anonymous; speaker embeddings pooled on non-overlapped
speech are clustered across windows to unify identities, then per-frame
probabilities of overlapping windows are averaged in the global speaker
space.  Oracle stitching replaces clustering with the reference-optimal slot
assignment for evaluating segmentation quality in isolation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Annotation, FrameMatrix, annotation_to_frames, frames_to_annotation
from .labels import PowersetTable, powerset_marginals, powerset_to_multilabel
from .segmentation import SegmentationModel, segment_forward

MAX_EXHAUSTIVE_ASSIGNMENT = 8


@dataclass(frozen=True)
class PipelineParams:
    """Inference-stage knobs; the clustering pair is what `tune` searches."""

    hop: float | None = None  # None -> half the model window
    clustering_threshold: float = 0.5
    min_cluster_size: int = 1
    min_embed_duration: float = 0.2

    def __post_init__(self):
        if self.hop is not None and self.hop <= 0:
            raise ValueError("hop must be positive")
        if not 0.0 <= self.clustering_threshold <= 2.0:
            raise ValueError("clustering_threshold must lie in [0, 2]")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")
        if self.min_embed_duration < 0:
            raise ValueError("min_embed_duration must be >= 0")


@dataclass
class LocalWindowOutput:
    """One window's raw class probabilities and binarized slot activity."""

    span: tuple[float, float]
    probs: np.ndarray  # (T', C)
    binary: np.ndarray  # (T', N)


@dataclass(frozen=True)
class Embedding:
    """Unit-norm speaker vector pooled from one window's non-overlapped speech."""

    vector: np.ndarray
    window_index: int
    slot: int
    duration: float


def slide_windows(duration: float, window: float, hop: float) -> list[tuple[float, float]]:
    """Spans [i*hop, i*hop + window) covering [0, duration).

    The final window is right-aligned at the recording end when the regular
    grid stops short; recordings shorter than the window yield one span
    covering the whole recording.
    """
    if hop <= 0:
        raise ValueError("hop must be positive")
    if duration <= window:
        return [(0.0, duration)]
    spans = []
    i = 0
    while i * hop + window <= duration + 1e-9:
        spans.append((i * hop, i * hop + window))
        i += 1
    if spans[-1][1] < duration - 1e-9:
        spans.append((duration - window, duration))
    return spans


def tile_windows(duration: float, window: float) -> list[tuple[float, float]]:
    """Non-overlapping tiling of [0, duration); the final window may be short.

    This is the span rule for oracle-stitched evaluation, where windows must
    not overlap.
    """
    spans = []
    start = 0.0
    while start < duration - 1e-9:
        spans.append((start, min(start + window, duration)))
        start += window
    return spans or [(0.0, duration)]


def binarize(probs: np.ndarray, loss_type: str, table: PowersetTable | None = None) -> np.ndarray:
    """Probabilities to binary slot activity.

    Multilabel thresholds each slot at 0.5 (ties count as active); powerset
    takes the per-frame argmax class, no threshold involved.
    """
    probs = np.asarray(probs)
    if loss_type == "multilabel":
        return (probs >= 0.5).astype(np.int8)
    if table is None:
        raise ValueError("powerset binarization needs the class table")
    return powerset_to_multilabel(table, probs.argmax(axis=1))


def slot_probabilities(
    probs: np.ndarray, loss_type: str, table: PowersetTable | None = None
) -> np.ndarray:
    """Per-slot activity probabilities; powerset outputs become marginals."""
    if loss_type == "multilabel":
        return np.asarray(probs)
    if table is None:
        raise ValueError("powerset conversion needs the class table")
    return powerset_marginals(table, probs)


class MeanPoolEmbedder:
    """Default embedder: average the feature frames selected by the mask.

    Any callable with signature (features, mask) -> vector can replace it,
    e.g. a wrapper around a pretrained speaker network.
    """

    def __call__(self, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.asarray(features)[mask].mean(axis=0)


def extract_embeddings(
    features: np.ndarray,
    labels: np.ndarray,
    frame_rate: float,
    min_embed_duration: float,
    embedder=None,
    window_index: int = 0,
) -> list[Embedding]:
    """Pool one embedding per active slot from frames where only that slot speaks.

    Slots whose solo speech is shorter than min_embed_duration are skipped.
    Vectors are L2-normalized after pooling.
    """
    if embedder is None:
        embedder = MeanPoolEmbedder()
    features = np.asarray(features)
    labels = np.asarray(labels)
    solo = labels.sum(axis=1) == 1
    out = []
    for slot in range(labels.shape[1]):
        mask = solo & (labels[:, slot] != 0)
        duration = mask.sum() / frame_rate
        if duration < min_embed_duration or duration == 0:
            continue
        vector = np.asarray(embedder(features, mask), dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm == 0:
            continue
        out.append(Embedding(vector / norm, window_index, slot, float(duration)))
    return out


def ahc_cluster(
    vectors: np.ndarray, threshold: float, min_cluster_size: int = 1
) -> np.ndarray:
    """Agglomerative clustering with centroid linkage on cosine distance.

    The two clusters whose renormalized mean centroids are closest are merged
    while their distance stays below the threshold.  Clusters smaller than
    min_cluster_size are then dissolved and their members reassigned to the
    nearest surviving cluster; with no survivor, everything collapses into
    the largest cluster.  Returns a cluster id per input vector, numbered by
    first member appearance.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[0] == 0:
        raise ValueError("cannot cluster zero embeddings")
    members: list[list[int]] = [[i] for i in range(len(vectors))]

    def centroid(idx: list[int]) -> np.ndarray:
        c = vectors[idx].mean(axis=0)
        norm = np.linalg.norm(c)
        return c / norm if norm > 0 else c

    centroids = [centroid(m) for m in members]
    while len(members) > 1:
        cmat = np.stack(centroids)
        dist = 1.0 - cmat @ cmat.T
        np.fill_diagonal(dist, np.inf)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] >= threshold:
            break
        if i > j:
            i, j = j, i
        members[i] = members[i] + members[j]
        centroids[i] = centroid(members[i])
        del members[j], centroids[j]

    big = [k for k, m in enumerate(members) if len(m) >= min_cluster_size]
    if big:
        small = [k for k in range(len(members)) if k not in big]
        big_centroids = np.stack([centroids[k] for k in big])
        for k in small:
            for idx in members[k]:
                nearest = int(np.argmin(1.0 - big_centroids @ vectors[idx]))
                members[big[nearest]].append(idx)
        members = [members[k] for k in big]
    else:
        # No cluster reaches the minimum size: the largest absorbs everything.
        members = [sorted(itertools.chain.from_iterable(members))]

    members.sort(key=min)
    ids = np.empty(len(vectors), dtype=np.int64)
    for cid, member in enumerate(members):
        ids[member] = cid
    return ids


def segment_windows(
    model: SegmentationModel,
    features: FrameMatrix,
    hop: float | None = None,
    spans: list[tuple[float, float]] | None = None,
) -> list[LocalWindowOutput]:
    """Run local segmentation over sliding windows of a recording.

    With ``spans`` given they are used verbatim (e.g. the non-overlapping
    tiling for oracle evaluation); otherwise windows slide at ``hop``,
    defaulting to half the model window.
    """
    window = model.config.window
    duration = features.num_frames / features.frame_rate
    if spans is None:
        hop = window / 2 if hop is None else hop
        if hop > window:
            raise ValueError("hop must not exceed the model window")
        spans = slide_windows(duration, window, hop)
    table = model.config.table() if model.config.loss_type == "powerset" else None
    outputs = []
    for span in spans:
        chunk = features.crop(*span)
        probs = segment_forward(model, chunk.data)
        outputs.append(
            LocalWindowOutput(span, probs, binarize(probs, model.config.loss_type, table))
        )
    return outputs


def window_embeddings(
    windows: list[LocalWindowOutput],
    features: FrameMatrix,
    min_embed_duration: float,
    embedder=None,
) -> list[Embedding]:
    out = []
    for w, win in enumerate(windows):
        chunk = features.crop(*win.span)
        out.extend(
            extract_embeddings(
                chunk.data, win.binary, features.frame_rate, min_embed_duration, embedder, w
            )
        )
    return out


def _fallback_cluster(
    window: LocalWindowOutput, slot: int, assigned: dict[int, int]
) -> int | None:
    """Cluster for an active slot without an embedding: copy the most similar
    (by activity pattern) clustered slot of the same window."""
    if not assigned:
        return None
    column = window.binary[:, slot]
    best = min(assigned, key=lambda s: (np.abs(window.binary[:, s] - column).sum(), s))
    return assigned[best]


def align_and_aggregate(
    windows: list[LocalWindowOutput],
    cluster_map: dict[tuple[int, int], int],
    loss_type: str,
    frame_rate: float,
    table: PowersetTable | None = None,
    recording_id: str = "",
) -> Annotation:
    """Average per-frame slot probabilities into global speaker activity.

    Every (window, slot) pair present in cluster_map contributes its
    probability column to its cluster; frames covered by several windows are
    averaged, then binarized at 0.5.
    """
    if not windows:
        return Annotation(recording_id)
    num_clusters = max(cluster_map.values(), default=-1) + 1
    total_frames = max(int(round(w.span[1] * frame_rate)) for w in windows)
    sums = np.zeros((total_frames, num_clusters))
    counts = np.zeros((total_frames, num_clusters))
    for w, win in enumerate(windows):
        offset = int(round(win.span[0] * frame_rate))
        probs = slot_probabilities(win.probs, loss_type, table)
        assigned = {slot: cid for (wi, slot), cid in cluster_map.items() if wi == w}
        for slot in range(win.binary.shape[1]):
            cid = assigned.get(slot)
            if cid is None:
                if not win.binary[:, slot].any():
                    continue
                cid = _fallback_cluster(win, slot, assigned)
                if cid is None:
                    continue
            length = probs.shape[0]
            sums[offset:offset + length, cid] += probs[:, slot]
            counts[offset:offset + length, cid] += 1.0
    averaged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    binary = (averaged >= 0.5).astype(np.int8)
    names = [f"spk{c}" for c in range(num_clusters)]
    grid = FrameMatrix(binary, frame_rate)
    return frames_to_annotation(grid, names, recording_id).normalized()


def run_pipeline(
    features: FrameMatrix,
    model: SegmentationModel,
    params: PipelineParams | None = None,
    embedder=None,
    recording_id: str = "rec",
) -> Annotation:
    """Full inference for one recording: windows, clustering, aggregation."""
    params = params or PipelineParams()
    windows = segment_windows(model, features, params.hop)
    embeddings = window_embeddings(windows, features, params.min_embed_duration, embedder)
    if embeddings:
        ids = ahc_cluster(
            np.stack([e.vector for e in embeddings]),
            params.clustering_threshold,
            params.min_cluster_size,
        )
        cluster_map = {
            (e.window_index, e.slot): int(cid) for e, cid in zip(embeddings, ids)
        }
    else:
        cluster_map = {}
    table = model.config.table() if model.config.loss_type == "powerset" else None
    return align_and_aggregate(
        windows, cluster_map, model.config.loss_type, features.frame_rate, table, recording_id
    )


# ---------------------------------------------------------------------------
# Oracle stitching (evaluation device)
# ---------------------------------------------------------------------------

def _best_assignment(cost: np.ndarray) -> list[int]:
    """Assignment minimizing total cost; exhaustive with lexicographic
    tie-break up to 8 slots, Hungarian beyond."""
    n = cost.shape[0]
    if n <= MAX_EXHAUSTIVE_ASSIGNMENT:
        best, best_total = None, np.inf
        for perm in itertools.permutations(range(n)):
            total = sum(cost[s, perm[s]] for s in range(n))
            if total < best_total - 1e-12:
                best, best_total = perm, total
        return list(best)
    _, cols = linear_sum_assignment(cost)
    return [int(c) for c in cols]


def oracle_stitch(
    windows: list[LocalWindowOutput],
    reference: Annotation,
    frame_rate: float,
) -> Annotation:
    """Relabel each window's slots with the reference-optimal assignment.

    Windows must not overlap.  Per window, slots are assigned one-to-one to
    reference speakers minimizing the Hamming mismatch against the reference
    frame grid (ties broken by the lexicographically smallest assignment);
    relabeled windows are concatenated into one annotation.
    """
    if not windows:
        return Annotation(reference.recording_id)
    spans = [w.span for w in windows]
    for (_, prev_end), (next_start, _) in zip(spans, spans[1:]):
        if next_start < prev_end - 1e-9:
            raise ValueError("oracle stitching requires non-overlapping windows")
    speakers = reference.speakers()
    total_frames = max(int(round(w.span[1] * frame_rate)) for w in windows)
    stitched = np.zeros((total_frames, len(speakers)), dtype=np.int8)
    for win in windows:
        ref_frames = annotation_to_frames(reference, win.span, frame_rate, speakers).data
        local = win.binary[: ref_frames.shape[0]]
        n_slots, n_ref = local.shape[1], len(speakers)
        size = max(n_slots, n_ref)
        cost = np.zeros((size, size))
        for s in range(size):
            col = local[:, s] if s < n_slots else np.zeros(local.shape[0], dtype=np.int8)
            for r in range(size):
                ref_col = ref_frames[:, r] if r < n_ref else np.zeros(local.shape[0], dtype=np.int8)
                cost[s, r] = np.abs(col.astype(int) - ref_col.astype(int)).sum()
        assignment = _best_assignment(cost)
        offset = int(round(win.span[0] * frame_rate))
        for slot in range(n_slots):
            target = assignment[slot]
            if target < n_ref:
                stitched[offset:offset + local.shape[0], target] = local[:, slot]
    grid = FrameMatrix(stitched, frame_rate)
    return frames_to_annotation(grid, speakers, reference.recording_id).normalized()
