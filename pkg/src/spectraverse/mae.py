"""Masking plans, token remove/restore bookkeeping and Chamfer reconstruction loss.

A mask is defined on token identities (patch indices), so one plan masks the
same tokens under every traversal order; the sequence positions those tokens
occupy are recorded per order. Restoration puts learnable placeholders back
at the recorded positions instead of appending them, which preserves the
sequence adjacency that order-sensitive models rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

KIND_VISIBLE = 0
KIND_LEARNABLE = 1


@dataclass(frozen=True)
class MaskPlan:
    """A sorted masked/visible split of n_tokens token identities."""

    n_tokens: int
    ratio: float
    masked: np.ndarray

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=np.int64)
        if self.n_tokens < 1:
            raise InvalidArgumentError("n_tokens must be >= 1")
        if masked.size:
            if masked.min() < 0 or masked.max() >= self.n_tokens:
                raise InvalidArgumentError("masked indices out of range")
            if np.any(np.diff(masked) <= 0):
                raise InvalidArgumentError("masked indices must be sorted and distinct")
        masked.flags.writeable = False
        object.__setattr__(self, "masked", masked)

    @property
    def n_masked(self) -> int:
        return self.masked.shape[0]

    @property
    def visible(self) -> np.ndarray:
        out = np.setdiff1d(np.arange(self.n_tokens), self.masked)
        out.flags.writeable = False
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"n_tokens": self.n_tokens, "ratio": self.ratio, "masked": self.masked.tolist()}
        )


@dataclass(frozen=True)
class TokenSequence:
    """Tokens in traversal order: payload rows, kinds, and original identities."""

    payloads: np.ndarray  # (n, d)
    kinds: np.ndarray  # (n,) of KIND_VISIBLE / KIND_LEARNABLE
    original_indices: np.ndarray  # (n,)

    def __post_init__(self):
        pay = np.asarray(self.payloads, dtype=np.float64)
        kinds = np.asarray(self.kinds, dtype=np.int8)
        orig = np.asarray(self.original_indices, dtype=np.int64)
        if pay.ndim != 2 or kinds.shape != (pay.shape[0],) or orig.shape != (pay.shape[0],):
            raise InvalidArgumentError("token sequence field shapes inconsistent")
        if not np.all(np.isin(kinds, (KIND_VISIBLE, KIND_LEARNABLE))):
            raise InvalidArgumentError("kinds must be visible or learnable")
        if len(np.unique(orig)) != orig.shape[0]:
            raise InvalidArgumentError("original indices must be distinct")
        for a in (pay, kinds, orig):
            a.flags.writeable = False
        object.__setattr__(self, "payloads", pay)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "original_indices", orig)

    def __len__(self) -> int:
        return self.payloads.shape[0]


def make_mask(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    """Uniformly random floor(ratio * n) subset of token identities."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidArgumentError(f"ratio must be in [0, 1), got {ratio}")
    if n_tokens < 1:
        raise InvalidArgumentError("n_tokens must be >= 1")
    # guard against float dust just below an integer product
    n_masked = math.floor(ratio * n_tokens + 1e-9)
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n_tokens, size=n_masked, replace=False))
    return MaskPlan(n_tokens=n_tokens, ratio=ratio, masked=masked)


def order_split(permutation: np.ndarray, plan: MaskPlan):
    """Positions a plan's visible and masked tokens occupy under one order.

    Returns (visible_positions, recorded_positions), both ascending, plus the
    token identities at the recorded positions in position order.
    """
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape[0] != plan.n_tokens:
        raise InvalidArgumentError("order length differs from plan")
    is_masked = np.zeros(plan.n_tokens, dtype=bool)
    is_masked[plan.masked] = True
    recorded = np.flatnonzero(is_masked[perm])
    visible = np.flatnonzero(~is_masked[perm])
    return visible, recorded, perm[recorded]


def tar_remove(tokens: TokenSequence, plan: MaskPlan):
    """Drop masked tokens from the sequence, recording the positions they held.

    The visible subsequence preserves relative order; recorded positions are
    ascending sequence positions within the governing traversal order.
    """
    if len(tokens) != plan.n_tokens:
        raise InvalidArgumentError(
            f"sequence has {len(tokens)} tokens, plan expects {plan.n_tokens}"
        )
    if np.any(tokens.kinds != KIND_VISIBLE):
        raise InvalidArgumentError("tar_remove expects an all-visible sequence")
    visible_pos, recorded, _ = order_split(tokens.original_indices, plan)
    visible = TokenSequence(
        payloads=tokens.payloads[visible_pos],
        kinds=tokens.kinds[visible_pos],
        original_indices=tokens.original_indices[visible_pos],
    )
    return visible, recorded


def tar_restore(
    encoded_visible: TokenSequence,
    learnable: np.ndarray,
    recorded_positions: np.ndarray,
    masked_original_indices: np.ndarray | None = None,
) -> TokenSequence:
    """Reinsert learnable placeholders at their recorded sequence positions.

    Visible entries keep their pre-removal positions and relative order. When
    the masked identities are not supplied, placeholders get negative ids to
    keep the identity invariant.
    """
    positions = np.asarray(recorded_positions, dtype=np.int64)
    n = len(encoded_visible) + positions.shape[0]
    if positions.size:
        if positions.min() < 0 or positions.max() >= n:
            raise InvalidArgumentError("recorded position out of range")
        if len(np.unique(positions)) != positions.shape[0]:
            raise InvalidArgumentError("recorded positions must be distinct")
    learnable = np.asarray(learnable, dtype=np.float64)
    if learnable.shape != (encoded_visible.payloads.shape[1],):
        raise InvalidArgumentError("learnable payload dimension mismatch")
    if masked_original_indices is None:
        masked_ids = -np.arange(1, positions.shape[0] + 1, dtype=np.int64)
    else:
        masked_ids = np.asarray(masked_original_indices, dtype=np.int64)
        if masked_ids.shape != positions.shape:
            raise InvalidArgumentError("one original index per recorded position required")

    payloads = np.empty((n, encoded_visible.payloads.shape[1]))
    kinds = np.empty(n, dtype=np.int8)
    orig = np.empty(n, dtype=np.int64)
    is_masked = np.zeros(n, dtype=bool)
    is_masked[positions] = True
    payloads[positions] = learnable
    kinds[positions] = KIND_LEARNABLE
    orig[positions] = masked_ids
    rest = np.flatnonzero(~is_masked)
    payloads[rest] = encoded_visible.payloads
    kinds[rest] = encoded_visible.kinds
    orig[rest] = encoded_visible.original_indices
    return TokenSequence(payloads=payloads, kinds=kinds, original_indices=orig)


def tar_restore_append(
    encoded_visible: TokenSequence,
    learnable: np.ndarray,
    n_masked: int,
    masked_original_indices: np.ndarray | None = None,
) -> TokenSequence:
    """Ablation: append learnable placeholders at the sequence tail instead."""
    tail = np.arange(len(encoded_visible), len(encoded_visible) + n_masked)
    return tar_restore(encoded_visible, learnable, tail, masked_original_indices)


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric sum of squared nearest-neighbor distances between two point sets."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("point sets must be (n, d) with matching d")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidArgumentError("point sets must be non-empty")
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


def rec_loss(masked_patches, reconstructions) -> float:
    """Mean Chamfer distance over masked patches (0.0 for an empty mask)."""
    if len(masked_patches) != len(reconstructions):
        raise InvalidArgumentError(
            f"{len(masked_patches)} patches vs {len(reconstructions)} reconstructions"
        )
    if len(masked_patches) == 0:
        return 0.0
    total = 0.0
    for target, pred in zip(masked_patches, reconstructions):
        total += chamfer(target, pred)
    return total / len(masked_patches)
