import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diarist import (
    Annotation,
    Segment,
    multilabel_to_powerset,
    pit_bce,
    pit_powerset_ce,
    powerset_table,
    powerset_to_multilabel,
    speaker_capacity_stats,
)
from diarist.labels import powerset_marginals, remap_classes


def brute_force_pit_bce(pred: np.ndarray, ref: np.ndarray) -> float:
    """Exhaustive N!-permutation minimum of the mean binary cross entropy."""
    pred = np.clip(pred, 1e-7, 1 - 1e-7)
    best = math.inf
    for perm in itertools.permutations(range(pred.shape[1])):
        p = pred[:, list(perm)]
        loss = -(ref * np.log(p) + (1 - ref) * np.log(1 - p)).mean()
        best = min(best, loss)
    return best


def brute_force_pit_powerset(pred: np.ndarray, ref: np.ndarray, table) -> float:
    """Per-permutation recomputation of the powerset cross entropy from scratch."""
    index = {cls: i for i, cls in enumerate(table.classes)}
    best = math.inf
    for perm in itertools.permutations(range(table.num_speakers)):
        total = 0.0
        for t in range(ref.shape[0]):
            active = tuple(sorted(perm[s] for s in np.flatnonzero(ref[t])))
            total += -math.log(max(pred[t, index[active]], 1e-7))
        best = min(best, total / ref.shape[0])
    return best


class TestPowersetTable:
    def test_sizes(self):
        assert powerset_table(4, 2).num_classes == 11  # 1 + 4 + 6
        assert powerset_table(6, 2).num_classes == 22  # 1 + 6 + 15
        assert powerset_table(1, 1).classes == ((), (0,))

    def test_ordering_n3_k2(self):
        table = powerset_table(3, 2)
        assert table.classes == ((), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2))

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(ValueError):
            powerset_table(2, 3)

    def test_silence_is_class_zero(self):
        for n, k in [(2, 1), (4, 2), (5, 3)]:
            assert powerset_table(n, k).classes[0] == ()


class TestMultilabelToPowerset:
    def test_known_frame(self):
        table = powerset_table(3, 2)
        classes = multilabel_to_powerset(table, np.array([[1, 0, 1]]))
        assert classes.tolist() == [5]

    def test_all_zero_frame(self):
        table = powerset_table(3, 2)
        assert multilabel_to_powerset(table, np.zeros((4, 3))).tolist() == [0] * 4

    def test_truncation_keeps_longest_active(self):
        table = powerset_table(3, 1)
        # Speaker 0 active 3 frames, speaker 1 active 1 frame; the (1,1,0)
        # frame exceeds K=1 and keeps speaker 0.
        labels = np.array([[1, 0, 0], [1, 0, 0], [1, 1, 0]])
        classes = multilabel_to_powerset(table, labels)
        assert classes.tolist() == [1, 1, 1]

    def test_truncation_tie_breaks_to_lower_index(self):
        table = powerset_table(2, 1)
        labels = np.array([[1, 1]])
        assert multilabel_to_powerset(table, labels).tolist() == [1]  # {0}


class TestPowersetToMultilabel:
    def test_known_class(self):
        table = powerset_table(3, 2)
        assert powerset_to_multilabel(table, np.array([5])).tolist() == [[1, 0, 1]]

    def test_class_zero(self):
        table = powerset_table(3, 2)
        assert not powerset_to_multilabel(table, np.array([0])).any()

    def test_out_of_range_rejected(self):
        table = powerset_table(3, 2)
        with pytest.raises(ValueError):
            powerset_to_multilabel(table, np.array([7]))

    @given(st.integers(0, 2**32))
    @settings(max_examples=80)
    def test_round_trip_identity_when_within_capacity(self, seed):
        gen = np.random.default_rng(seed)
        n, k = int(gen.integers(2, 6)), 2
        table = powerset_table(n, k)
        labels = np.zeros((12, n), dtype=np.int8)
        for t in range(12):
            active = gen.permutation(n)[: gen.integers(0, k + 1)]
            labels[t, active] = 1
        back = powerset_to_multilabel(table, multilabel_to_powerset(table, labels))
        assert np.array_equal(back, labels)

    def test_marginals_sum_matches_membership(self):
        table = powerset_table(3, 2)
        probs = np.zeros((1, table.num_classes))
        probs[0, 5] = 0.6  # {0, 2}
        probs[0, 1] = 0.4  # {0}
        marg = powerset_marginals(table, probs)
        assert marg[0].tolist() == pytest.approx([1.0, 0.0, 0.6])


class TestPitBce:
    def test_perfect_prediction(self, rng):
        ref = rng.integers(0, 2, size=(50, 3)).astype(float)
        result = pit_bce(ref, ref)
        # Clamping leaves a tiny floor; identity must be among the optima.
        assert result.loss < 1e-5
        assert result.loss >= 0

    def test_swapped_columns_recovered(self, rng):
        ref = np.zeros((30, 3))
        ref[:10, 0] = 1
        ref[10:20, 1] = 1
        ref[20:, 2] = 1
        pred = ref[:, [1, 0, 2]]
        result = pit_bce(pred, ref)
        assert result.loss == pytest.approx(pit_bce(ref, ref).loss)
        assert result.permutation == (1, 0, 2)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(30):
            pred = rng.uniform(0.01, 0.99, size=(20, 4))
            ref = rng.integers(0, 2, size=(20, 4)).astype(float)
            result = pit_bce(pred, ref)
            assert result.loss == pytest.approx(brute_force_pit_bce(pred, ref), rel=1e-10)

    def test_exactly_invariant_to_reference_permutation(self, rng):
        pred = rng.uniform(0.01, 0.99, size=(25, 4))
        ref = rng.integers(0, 2, size=(25, 4)).astype(float)
        base = pit_bce(pred, ref).loss
        for perm in itertools.permutations(range(4)):
            assert pit_bce(pred, ref[:, list(perm)]).loss == base

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            pit_bce(np.full((4, 3), 0.5), np.zeros((4, 2)))

    def test_loss_nonnegative_and_finite(self, rng):
        pred = rng.uniform(0, 1, size=(15, 3))
        ref = rng.integers(0, 2, size=(15, 3)).astype(float)
        loss = pit_bce(pred, ref).loss
        assert math.isfinite(loss) and loss >= 0


class TestPitPowersetCe:
    def test_one_hot_match_gives_zero(self):
        table = powerset_table(3, 2)
        ref = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0]])
        classes = multilabel_to_powerset(table, ref)
        pred = np.zeros((3, table.num_classes))
        pred[np.arange(3), classes] = 1.0
        result = pit_powerset_ce(pred, ref, table)
        assert result.loss == pytest.approx(0.0, abs=1e-12)
        assert result.permutation == (0, 1, 2)

    def test_invariant_to_reference_permutation(self, rng):
        table = powerset_table(3, 2)
        pred = rng.dirichlet(np.ones(table.num_classes), size=20)
        ref = np.zeros((20, 3), dtype=np.int8)
        for t in range(20):
            active = rng.permutation(3)[: rng.integers(0, 3)]
            ref[t, active] = 1
        base = pit_powerset_ce(pred, ref, table).loss
        for perm in itertools.permutations(range(3)):
            assert pit_powerset_ce(pred, ref[:, list(perm)], table).loss == base

    def test_matches_naive_oracle(self, rng):
        table = powerset_table(3, 2)
        for _ in range(20):
            pred = rng.dirichlet(np.ones(table.num_classes), size=15)
            ref = np.zeros((15, 3), dtype=np.int8)
            for t in range(15):
                active = rng.permutation(3)[: rng.integers(0, 3)]
                ref[t, active] = 1
            got = pit_powerset_ce(pred, ref, table).loss
            want = brute_force_pit_powerset(pred, ref, table)
            assert got == pytest.approx(want, rel=1e-9)

    def test_large_n_guarded(self):
        table = powerset_table(9, 2)
        with pytest.raises(ValueError, match="N <= 8"):
            pit_powerset_ce(np.zeros((1, table.num_classes)), np.zeros((1, 9)), table)

    def test_remap_classes_roundtrip(self):
        table = powerset_table(3, 2)
        remap = remap_classes(table, (2, 0, 1))
        # {0,2} under s -> perm[s] becomes {2, 1} = class (1, 2) = index 6.
        assert remap[5] == 6


class TestCapacityStats:
    def test_everything_within_two_speakers(self):
        anns = [
            Annotation("a", [Segment(0, 5, "x"), Segment(3, 8, "y")]),
            Annotation("b", [Segment(0, 10, "x")]),
        ]
        stats = speaker_capacity_stats(anns, window=5.0, coverage_target=1.0)
        assert stats.num_speakers == 2
        assert stats.speaker_coverage[2] == 1.0

    def test_hand_counted_toy_set(self):
        # Three files, 10 s windows, hand-counted:
        # f1: [0,10) has {a,b} with simultaneous overlap, [10,20) has {a}.
        # f2: [0,10) has {a,b,c} but never more than 2 at once.
        # f3: [0,10) has {a}.
        anns = [
            Annotation("f1", [Segment(0, 6, "a"), Segment(4, 9, "b"), Segment(12, 15, "a")]),
            Annotation("f2", [Segment(0, 3, "a"), Segment(2.5, 6, "b"), Segment(6.5, 9, "c")]),
            Annotation("f3", [Segment(1, 8, "a")]),
        ]
        stats = speaker_capacity_stats(anns, window=10.0, coverage_target=0.75)
        # Windows: f1 -> 2 speakers then 1; f2 -> 3; f3 -> 1. Counts [2,1,3,1].
        # Coverage <=2 speakers: 3/4 = 0.75 -> N=2 at target 0.75.
        assert stats.num_speakers == 2
        # Max simultaneous: f1 w1 = 2, f1 w2 = 1, f2 = 2, f3 = 1 -> K=2 at 1.0.
        assert stats.max_overlap == 2
        stats_full = speaker_capacity_stats(anns, window=10.0, coverage_target=1.0)
        assert stats_full.num_speakers == 3

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            speaker_capacity_stats([], window=10.0)

    def test_coverage_target_validated(self):
        with pytest.raises(ValueError):
            speaker_capacity_stats([Annotation("a", [Segment(0, 1, "x")])], 5.0, coverage_target=0.0)
