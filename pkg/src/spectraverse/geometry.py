"""Point clouds, farthest point sampling, kNN patchification and rigid motions.

Coordinates are unitless model space, stored as float64 ``(N, 3)`` arrays.
All operations are pure: outputs depend only on explicit inputs, and the
arrays inside the returned containers are frozen (non-writeable).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

SHAPE_KINDS = ("sphere", "torus", "box", "two_spheres")

_TORUS_MAJOR = 1.0
_TORUS_MINOR = 0.35
_TWO_SPHERES_RADIUS = 0.5


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points; index i always refers to the same point."""

    points: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidArgumentError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchSet:
    """FPS centers plus their kNN neighborhoods, as indices into the parent cloud."""

    parent: PointCloud
    center_indices: np.ndarray  # (N_c,)
    neighbor_indices: np.ndarray  # (N_c, N_n)

    def __post_init__(self):
        centers = np.asarray(self.center_indices, dtype=np.int64)
        neigh = np.asarray(self.neighbor_indices, dtype=np.int64)
        n = len(self.parent)
        if centers.ndim != 1 or neigh.ndim != 2 or neigh.shape[0] != centers.shape[0]:
            raise InvalidArgumentError("center/neighbor index shapes inconsistent")
        if len(np.unique(centers)) != centers.shape[0]:
            raise InvalidArgumentError("center indices must be distinct")
        for arr in (centers, neigh):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise InvalidArgumentError("patch indices out of range")
        object.__setattr__(self, "center_indices", _frozen(centers))
        object.__setattr__(self, "neighbor_indices", _frozen(neigh))

    @property
    def n_centers(self) -> int:
        return self.center_indices.shape[0]

    @property
    def n_neighbors(self) -> int:
        return self.neighbor_indices.shape[1]

    def centers(self) -> np.ndarray:
        """Center coordinates, shape (N_c, 3)."""
        return self.parent.points[self.center_indices]

    def patch_points(self) -> np.ndarray:
        """Neighborhood coordinates, shape (N_c, N_n, 3)."""
        return self.parent.points[self.neighbor_indices]


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t (orthonormal R, det +1)."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("rotation must be (3,3) and translation (3,)")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidArgumentError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, seed: int, max_translation: float = 2.0) -> "RigidTransform":
        """Haar-random rotation (QR of a Gaussian matrix) plus a uniform translation."""
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))  # make the factorization unique
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        t = rng.uniform(-max_translation, max_translation, size=3)
        return cls(q, t)


def fps(cloud: PointCloud, n_centers: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling.

    Each selected point maximizes its minimum distance to the points already
    selected; distance ties are broken by the lower index. Runs in
    O(n_centers * N_p) with an incremental min-distance array.
    """
    n = len(cloud)
    if not 1 <= n_centers <= n:
        raise InvalidArgumentError(f"n_centers must be in [1, {n}], got {n_centers}")
    if not 0 <= start_index < n:
        raise InvalidArgumentError(f"start_index out of range: {start_index}")
    pts = cloud.points
    selected = np.empty(n_centers, dtype=np.int64)
    selected[0] = start_index
    # squared distances preserve the max-min ordering and tie structure;
    # |x - p|^2 = |x|^2 - 2 x.p + |p|^2 reuses precomputed squared norms
    sq_norms = np.einsum("ij,ij->i", pts, pts)
    min_d2 = sq_norms - 2.0 * (pts @ pts[start_index]) + sq_norms[start_index]
    for i in range(1, n_centers):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        selected[i] = nxt
        np.minimum(min_d2, sq_norms - 2.0 * (pts @ pts[nxt]) + sq_norms[nxt], out=min_d2)
    return selected


def knn(cloud: PointCloud, query_indices, k: int, chunk: int = 512) -> np.ndarray:
    """Exhaustive k-nearest-neighbor indices for the given query points.

    Row i holds the k indices nearest to query point i, sorted ascending by
    Euclidean distance with ties broken by the lower index. The query point
    itself is included when it is among the k nearest (it is, at distance 0,
    whenever the query is a cloud point).
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    queries = np.asarray(query_indices, dtype=np.int64)
    if queries.ndim != 1:
        raise InvalidArgumentError("query_indices must be a 1-D index list")
    if queries.size and (queries.min() < 0 or queries.max() >= n):
        raise InvalidArgumentError("query index out of range")
    pts = cloud.points
    all_idx = np.arange(n)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for lo in range(0, queries.shape[0], chunk):
        q = queries[lo : lo + chunk]
        d2 = np.sum((pts[q][:, None, :] - pts[None, :, :]) ** 2, axis=2)
        for row in range(d2.shape[0]):
            order = np.lexsort((all_idx, d2[row]))
            out[lo + row] = order[:k]
    return out


def patchify(
    cloud: PointCloud, n_centers: int, n_neighbors: int, start_index: int = 0
) -> PatchSet:
    """Decompose a cloud into FPS centers with self-inclusive kNN neighborhoods."""
    if not 1 <= n_neighbors <= len(cloud):
        raise InvalidArgumentError(
            f"n_neighbors must be in [1, {len(cloud)}], got {n_neighbors}"
        )
    centers = fps(cloud, n_centers, start_index=start_index)
    neigh = knn(cloud, centers, n_neighbors)
    return PatchSet(parent=cloud, center_indices=centers, neighbor_indices=neigh)


def apply_rigid(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Map every point p -> R p + t, preserving index order."""
    return PointCloud(cloud.points @ t.rotation.T + t.translation)


def gen_shape(kind: str, n_points: int, seed: int, noise: float = 0.0) -> PointCloud:
    """Deterministic synthetic shape sampler for the test harness.

    ``two_spheres`` produces two clusters of half the points each, separated
    by ten sphere radii along x (used for connected-component tests).
    """
    if kind not in SHAPE_KINDS:
        raise InvalidArgumentError(
            f"unknown shape kind {kind!r}; valid kinds: {', '.join(SHAPE_KINDS)}"
        )
    if n_points < 8:
        raise InvalidArgumentError(f"n_points must be >= 8, got {n_points}")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _sample_sphere(rng, n_points, radius=1.0)
    elif kind == "torus":
        pts = _sample_torus(rng, n_points)
    elif kind == "box":
        pts = _sample_box(rng, n_points)
    else:  # two_spheres
        r = _TWO_SPHERES_RADIUS
        half = n_points // 2
        a = _sample_sphere(rng, half, radius=r)
        b = _sample_sphere(rng, n_points - half, radius=r)
        b[:, 0] += 10.0 * r
        pts = np.concatenate([a, b], axis=0)
    if noise > 0.0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return PointCloud(pts)


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return radius * v / norms


def _sample_torus(rng, n, major=_TORUS_MAJOR, minor=_TORUS_MINOR):
    # rejection on the tube angle gives uniform sampling w.r.t. surface area
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - filled))
        accept = rng.uniform(0.0, 1.0, size=cand.shape[0]) < (
            (major + minor * np.cos(cand)) / (major + minor)
        )
        good = cand[accept][: n - filled]
        phi[filled : filled + good.shape[0]] = good
        filled += good.shape[0]
    ring = major + minor * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)


def _sample_box(rng, n, half=1.0):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        m = axis == a
        others = [c for c in range(3) if c != a]
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def load_xyz(path) -> PointCloud:
    """Parse an ASCII xyz file: one `x y z` triple per line, `#` comments ignored."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 3:
                raise InvalidArgumentError(
                    f"{path}:{lineno}: expected 3 coordinates, got {len(fields)}"
                )
            try:
                points.append([float(v) for v in fields])
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from exc
    if not points:
        raise InvalidArgumentError(f"{path}: no points found")
    return PointCloud(np.asarray(points))


def save_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in cloud.points:
            # repr of Python floats round-trips exactly
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
