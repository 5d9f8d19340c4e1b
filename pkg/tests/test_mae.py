"""Tests for masking, TAR remove/restore round trips and Chamfer loss."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectraverse.errors import InvalidArgumentError
from spectraverse.mae import (
    KIND_LEARNABLE,
    KIND_VISIBLE,
    MaskPlan,
    TokenSequence,
    chamfer,
    make_mask,
    order_split,
    rec_loss,
    tar_remove,
    tar_restore,
    tar_restore_append,
)


def chamfer_oracle(a, b):
    """Double-loop squared-distance Chamfer."""
    total = 0.0
    for p in a:
        total += min(float(np.sum((p - q) ** 2)) for q in b)
    for q in b:
        total += min(float(np.sum((p - q) ** 2)) for p in a)
    return total


def all_visible_sequence(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSequence(
        payloads=rng.normal(size=(n, d)),
        kinds=np.full(n, KIND_VISIBLE, dtype=np.int8),
        original_indices=np.arange(n),
    )


class TestMakeMask:
    def test_zero_ratio(self):
        plan = make_mask(10, 0.0, seed=0)
        assert plan.n_masked == 0
        assert plan.visible.tolist() == list(range(10))

    def test_floor_count(self):
        assert make_mask(5, 0.4, seed=1).n_masked == 2

    def test_paper_default_count(self):
        assert make_mask(128, 0.6, seed=2).n_masked == 76

    def test_deterministic(self):
        a = make_mask(64, 0.6, seed=42)
        b = make_mask(64, 0.6, seed=42)
        np.testing.assert_array_equal(a.masked, b.masked)

    def test_ratio_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            make_mask(10, 1.0, seed=0)

    def test_uniformity(self):
        n, ratio, draws = 16, 0.5, 10_000
        counts = np.zeros(n)
        for seed in range(draws):
            counts[make_mask(n, ratio, seed).masked] += 1
        p = 0.5
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3 * sigma + 1)

    def test_partition(self):
        plan = make_mask(50, 0.3, seed=3)
        joined = np.sort(np.concatenate([plan.masked, plan.visible]))
        np.testing.assert_array_equal(joined, np.arange(50))


class TestTarRemove:
    def test_basic_positions(self):
        seq = all_visible_sequence(5)
        plan = MaskPlan(n_tokens=5, ratio=0.4, masked=np.array([1, 3]))
        visible, recorded = tar_remove(seq, plan)
        assert recorded.tolist() == [1, 3]
        assert visible.original_indices.tolist() == [0, 2, 4]
        np.testing.assert_array_equal(visible.payloads, seq.payloads[[0, 2, 4]])

    def test_empty_mask_identity(self):
        seq = all_visible_sequence(6)
        plan = MaskPlan(n_tokens=6, ratio=0.0, masked=np.array([], dtype=int))
        visible, recorded = tar_remove(seq, plan)
        assert recorded.size == 0
        np.testing.assert_array_equal(visible.payloads, seq.payloads)

    def test_partition_counts(self):
        seq = all_visible_sequence(40)
        plan = make_mask(40, 0.55, seed=5)
        visible, recorded = tar_remove(seq, plan)
        assert len(visible) + len(recorded) == 40

    def test_positions_follow_traversal_order(self):
        # sequence in a shuffled traversal order: recorded positions are where
        # masked identities appear in that order, not the identities themselves
        rng = np.random.default_rng(7)
        perm = rng.permutation(8)
        seq = TokenSequence(
            payloads=rng.normal(size=(8, 3)),
            kinds=np.full(8, KIND_VISIBLE, dtype=np.int8),
            original_indices=perm,
        )
        plan = MaskPlan(n_tokens=8, ratio=0.25, masked=np.array([2, 5]))
        _, recorded = tar_remove(seq, plan)
        expected = np.flatnonzero(np.isin(perm, [2, 5]))
        np.testing.assert_array_equal(recorded, expected)

    def test_length_mismatch(self):
        seq = all_visible_sequence(5)
        with pytest.raises(InvalidArgumentError):
            tar_remove(seq, make_mask(6, 0.5, seed=0))


class TestTarRestore:
    def test_basic_example(self):
        vis = TokenSequence(
            payloads=np.array([[1.0], [3.0], [5.0]]),
            kinds=np.full(3, KIND_VISIBLE, dtype=np.int8),
            original_indices=np.array([0, 2, 4]),
        )
        out = tar_restore(vis, np.array([9.0]), np.array([1, 3]))
        assert out.payloads.ravel().tolist() == [1.0, 9.0, 3.0, 9.0, 5.0]
        assert out.kinds.tolist() == [0, 1, 0, 1, 0]

    def test_roundtrip_inverse(self):
        seq = all_visible_sequence(12, seed=3)
        plan = make_mask(12, 0.5, seed=4)
        visible, recorded = tar_remove(seq, plan)
        _, _, masked_ids = order_split(seq.original_indices, plan)
        out = tar_restore(visible, np.zeros(4), recorded, masked_ids)
        np.testing.assert_array_equal(out.original_indices, seq.original_indices)
        restored_kinds = np.full(12, KIND_VISIBLE)
        restored_kinds[recorded] = KIND_LEARNABLE
        np.testing.assert_array_equal(out.kinds, restored_kinds)

    def test_duplicate_position_rejected(self):
        vis = all_visible_sequence(3)
        with pytest.raises(InvalidArgumentError):
            tar_restore(vis, np.zeros(4), np.array([1, 1]))

    def test_out_of_range_rejected(self):
        vis = all_visible_sequence(3)
        with pytest.raises(InvalidArgumentError):
            tar_restore(vis, np.zeros(4), np.array([5]))

    def test_append_ablation_breaks_positions(self):
        seq = all_visible_sequence(10, seed=8)
        plan = MaskPlan(n_tokens=10, ratio=0.3, masked=np.array([0, 4, 6]))
        visible, recorded = tar_remove(seq, plan)
        out = tar_restore_append(visible, np.zeros(4), len(recorded))
        appended_at = np.flatnonzero(out.kinds == KIND_LEARNABLE)
        assert not np.array_equal(appended_at, recorded)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10**6),
    n=st.integers(min_value=1, max_value=256),
    ratio=st.floats(min_value=0.0, max_value=0.9),
)
def test_roundtrip_property(seed, n, ratio):
    """restore(remove(seq)) reproduces positions and kinds for random masks."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    seq = TokenSequence(
        payloads=rng.normal(size=(n, 2)),
        kinds=np.full(n, KIND_VISIBLE, dtype=np.int8),
        original_indices=perm,
    )
    plan = make_mask(n, ratio, seed)
    visible, recorded = tar_remove(seq, plan)
    _, _, masked_ids = order_split(perm, plan)
    out = tar_restore(visible, np.zeros(2), recorded, masked_ids)
    np.testing.assert_array_equal(out.original_indices, seq.original_indices)
    assert np.all(np.flatnonzero(out.kinds == KIND_LEARNABLE) == recorded)


class TestChamfer:
    def test_equal_sets_zero(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        assert chamfer(pts, pts) == 0.0

    def test_unit_offset(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(rng.integers(1, 65), 3))
        b = rng.normal(size=(rng.integers(1, 65), 3))
        assert chamfer(a, b) == pytest.approx(chamfer_oracle(a, b), abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(10, 3)), rng.normal(size=(15, 3))
        assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-12)

    def test_zero_when_mutual_subsets(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(8, 3))
        b = np.concatenate([a, a[:3]])
        assert chamfer(a, b) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


class TestRecLoss:
    def test_perfect_reconstruction(self):
        pts = np.random.default_rng(1).normal(size=(6, 3))
        assert rec_loss([pts, pts], [pts.copy(), pts.copy()]) == 0.0

    def test_single_patch_equals_chamfer(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert rec_loss([a], [b]) == pytest.approx(chamfer(a, b))

    def test_mean_of_known_values(self):
        origin = np.array([[0.0, 0.0, 0.0]])
        one = np.array([[1.0, 0.0, 0.0]])  # chamfer 2
        diag = np.array([[1.0, 1.0, 0.0]])  # chamfer 4
        assert rec_loss([origin, origin, origin], [origin, one, diag]) == 2.0

    def test_empty_mask_is_zero(self):
        assert rec_loss([], []) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            rec_loss([np.zeros((1, 3))], [])
