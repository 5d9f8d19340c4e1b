"""Token traversal orders: eigenvector sorts, hierarchical codes, baselines.

SAST orders sort tokens by each low eigenvector, forward and reverse; HLT
recursively halves the token set at per-group eigenvector means, producing a
binary code per token that is traversed lexicographically. An axis sort and
a seeded random order serve as non-spectral baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .spectral import SpectralEmbedding, require_canonical

_AXES = {"x": 0, "y": 1, "z": 2}
_SOURCES = ("sast", "hlt", "axis", "random")
_DIRECTIONS = ("forward", "reverse")


@dataclass(frozen=True)
class TraversalOrder:
    """A bijection over token indices plus where it came from."""

    permutation: np.ndarray
    direction: str
    source: str
    eigenvector: int | None = None  # 1-based, sast only
    axis: str | None = None
    seed: int | None = None

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if perm.ndim != 1:
            raise InvalidArgumentError("permutation must be 1-D")
        visited = np.zeros(perm.shape[0], dtype=bool)
        if perm.size and (perm.min() < 0 or perm.max() >= perm.size):
            raise InvalidArgumentError("permutation entries out of range")
        visited[perm] = True
        if not visited.all():
            raise InvalidArgumentError("permutation is not a bijection")
        if self.direction not in _DIRECTIONS:
            raise InvalidArgumentError(f"bad direction {self.direction!r}")
        if self.source not in _SOURCES:
            raise InvalidArgumentError(f"bad source {self.source!r}")
        perm.flags.writeable = False
        object.__setattr__(self, "permutation", perm)

    def __len__(self) -> int:
        return self.permutation.shape[0]

    def to_dict(self) -> dict:
        out = {"source": self.source, "direction": self.direction}
        if self.eigenvector is not None:
            out["eigenvector"] = self.eigenvector
        if self.axis is not None:
            out["axis"] = self.axis
        if self.seed is not None:
            out["seed"] = self.seed
        out["permutation"] = self.permutation.tolist()
        return out


@dataclass(frozen=True)
class HLTCode:
    """Per-token bit paths through the recursive partition and their integers."""

    bits: np.ndarray  # (n, s) of {0, 1}
    codes: np.ndarray  # (n,)
    s: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        codes = np.asarray(self.codes, dtype=np.int64)
        if bits.ndim != 2 or bits.shape[1] != self.s or codes.shape != (bits.shape[0],):
            raise InvalidArgumentError("bit/code shapes inconsistent")
        if codes.size and (codes.min() < 0 or codes.max() >= 2**self.s):
            raise InvalidArgumentError("codes must lie in [0, 2^s)")
        weights = 2 ** np.arange(self.s - 1, -1, -1, dtype=np.int64)
        if not np.array_equal(bits @ weights, codes):
            raise InvalidArgumentError("codes must equal big-endian bit values")
        bits.flags.writeable = False
        codes.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "codes", codes)

    def __len__(self) -> int:
        return self.codes.shape[0]


def sast_orders(embedding: SpectralEmbedding, s: int) -> list[TraversalOrder]:
    """Forward and reverse sorts by each of the first s eigenvectors.

    Returns [fwd_1, rev_1, fwd_2, rev_2, ...]. Forward is the stable argsort
    (value ties keep original index order); reverse is its exact reversal.
    """
    require_canonical(embedding)
    if not 1 <= s <= embedding.n_vectors:
        raise InvalidArgumentError(
            f"s must be in [1, {embedding.n_vectors}], got {s}"
        )
    orders = []
    for k in range(s):
        fwd = np.argsort(embedding.eigenvectors[k], kind="stable")
        orders.append(
            TraversalOrder(fwd, direction="forward", source="sast", eigenvector=k + 1)
        )
        orders.append(
            TraversalOrder(
                fwd[::-1], direction="reverse", source="sast", eigenvector=k + 1
            )
        )
    return orders


def hlt_codes(
    embedding: SpectralEmbedding, s: int, threshold_mode: str = "subgroup_mean"
) -> HLTCode:
    """Recursive binary partition of tokens by eigenvector means.

    Level k compares v^(k) against the mean over the token's current group
    (``subgroup_mean``) or over all tokens (``global_mean``); a token at or
    above the threshold gets bit 1. The s bits form a big-endian integer
    code, so s levels split the tokens into at most 2^s segments.
    """
    require_canonical(embedding)
    if s < 1:
        raise InvalidArgumentError("s must be >= 1")
    if s > embedding.n_vectors:
        raise InvalidArgumentError(
            f"embedding holds {embedding.n_vectors} eigenvectors, need {s}"
        )
    if threshold_mode not in ("subgroup_mean", "global_mean"):
        raise InvalidArgumentError(f"unknown threshold mode {threshold_mode!r}")
    n = embedding.n_tokens
    bits = np.zeros((n, s), dtype=np.uint8)
    groups = [np.arange(n)]
    for level in range(s):
        v = embedding.eigenvectors[level]
        global_thr = v.mean()
        next_groups = []
        for g in groups:
            thr = v[g].mean() if threshold_mode == "subgroup_mean" else global_thr
            hi = v[g] >= thr
            bits[g, level] = hi.astype(np.uint8)
            for child in (g[~hi], g[hi]):
                if child.size:
                    next_groups.append(child)
        groups = next_groups
    weights = 2 ** np.arange(s - 1, -1, -1, dtype=np.int64)
    return HLTCode(bits=bits, codes=bits @ weights, s=s)


def hlt_orders(
    codes: HLTCode,
    embedding: SpectralEmbedding | None = None,
    seed: int | None = None,
) -> tuple[TraversalOrder, TraversalOrder]:
    """Orders by increasing and decreasing code value.

    Tokens sharing a code are ordered within the segment by the value of the
    first eigenvector (pass ``embedding``) or by a seeded random priority
    (pass ``seed``); exactly one of the two must be given.
    """
    if (embedding is None) == (seed is None):
        raise InvalidArgumentError("pass exactly one of embedding or seed")
    n = len(codes)
    if embedding is not None:
        if embedding.n_tokens != n:
            raise InvalidArgumentError(
                f"embedding covers {embedding.n_tokens} tokens, codes cover {n}"
            )
        priority = embedding.eigenvectors[0]
    else:
        priority = np.random.default_rng(seed).permutation(n)
    idx = np.arange(n)
    inc = np.lexsort((idx, priority, codes.codes))
    dec = np.lexsort((idx, priority, -codes.codes))
    return (
        TraversalOrder(inc, direction="forward", source="hlt", seed=seed),
        TraversalOrder(dec, direction="reverse", source="hlt", seed=seed),
    )


def axis_order(centers, axis: str) -> TraversalOrder:
    """Stable sort of tokens along one coordinate axis (the grid-scan baseline)."""
    if axis not in _AXES:
        raise InvalidArgumentError(f"axis must be one of {sorted(_AXES)}")
    pts = np.asarray(centers, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidArgumentError("centers must be a non-empty (N, 3) array")
    perm = np.argsort(pts[:, _AXES[axis]], kind="stable")
    return TraversalOrder(perm, direction="forward", source="axis", axis=axis)


def random_order(n: int, seed: int) -> TraversalOrder:
    """Seeded uniform random permutation baseline."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    perm = np.random.default_rng(seed).permutation(n)
    return TraversalOrder(perm, direction="forward", source="random", seed=seed)


def order_agreement(a: TraversalOrder, b: TraversalOrder) -> float:
    """Normalized Kendall-tau agreement: 1 - discordant pair fraction.

    1.0 iff the permutations are identical; 0.0 for an exact reversal.
    """
    if len(a) != len(b):
        raise InvalidArgumentError("orders must have the same length")
    n = len(a)
    if np.array_equal(a.permutation, b.permutation):
        return 1.0
    if n < 2:
        return 1.0
    rank_b = np.empty(n, dtype=np.int64)
    rank_b[b.permutation] = np.arange(n)
    seq = rank_b[a.permutation]
    discordant = _count_inversions(seq.tolist())
    total = n * (n - 1) // 2
    return 1.0 - discordant / total


def _count_inversions(seq: list) -> int:
    """Merge-sort inversion count, O(n log n)."""
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    merged = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            inv += len(left) - i
            merged.append(right[j])
            j += 1
    seq[:] = merged + left[i:] + right[j:]
    return inv
