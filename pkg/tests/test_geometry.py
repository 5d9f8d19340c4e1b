"""Tests for spectraverse.geometry: FPS, kNN, patchify, rigid motions, shapes."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectraverse.errors import InvalidArgumentError
from spectraverse.geometry import (
    PatchSet,
    PointCloud,
    RigidTransform,
    apply_rigid,
    fps,
    gen_shape,
    knn,
    load_xyz,
    patchify,
    save_xyz,
)


def fps_oracle(points, n_centers, start_index):
    """Greedy max-min FPS recomputed from scratch at every step (no incremental state)."""
    selected = [start_index]
    while len(selected) < n_centers:
        best, best_d = None, -1.0
        for cand in range(points.shape[0]):
            d = min(float(np.sum((points[cand] - points[s]) ** 2)) for s in selected)
            if d > best_d:  # strict: ties keep the earlier (lower) candidate
                best, best_d = cand, d
        selected.append(best)
    return np.asarray(selected)


def knn_oracle(points, query, k):
    """Exhaustive distance sort with (distance, index) lexicographic order."""
    out = []
    for q in query:
        d2 = [(float(np.sum((points[q] - points[j]) ** 2)), j) for j in range(len(points))]
        d2.sort()
        out.append([j for _, j in d2[:k]])
    return np.asarray(out)


def bfs_components(adj_lists):
    """Number of connected components by explicit breadth-first search."""
    n = len(adj_lists)
    seen = [False] * n
    comps = 0
    for s in range(n):
        if seen[s]:
            continue
        comps += 1
        queue = [s]
        seen[s] = True
        while queue:
            u = queue.pop(0)
            for v in adj_lists[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return comps


class TestFps:
    def test_collinear_farthest(self):
        cloud = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], dtype=float))
        assert fps(cloud, 2, start_index=0).tolist() == [0, 2]

    def test_exhaustion_is_permutation(self):
        cloud = gen_shape("sphere", 32, seed=1)
        idx = fps(cloud, 32)
        assert sorted(idx.tolist()) == list(range(32))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(50, 3))
        cloud = PointCloud(pts)
        got = fps(cloud, 8, start_index=3)
        np.testing.assert_array_equal(got, fps_oracle(pts, 8, 3))

    def test_maxmin_monotone(self):
        cloud = gen_shape("torus", 200, seed=5)
        idx = fps(cloud, 20)
        pts = cloud.points
        dists = []
        for i in range(1, len(idx)):
            dists.append(
                min(np.linalg.norm(pts[idx[i]] - pts[idx[j]]) for j in range(i))
            )
        assert all(dists[i + 1] <= dists[i] + 1e-12 for i in range(len(dists) - 1))

    def test_too_many_centers_rejected(self):
        cloud = gen_shape("sphere", 16, seed=0)
        with pytest.raises(InvalidArgumentError):
            fps(cloud, 17)


class TestKnn:
    def test_collinear(self):
        cloud = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], dtype=float))
        assert knn(cloud, [0], 2).tolist() == [[0, 1]]

    def test_k_equals_n_is_permutation(self):
        cloud = gen_shape("box", 24, seed=3)
        rows = knn(cloud, np.arange(24), 24)
        for row in rows:
            assert sorted(row.tolist()) == list(range(24))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(100, 3))
        cloud = PointCloud(pts)
        q = np.arange(0, 100, 7)
        np.testing.assert_array_equal(knn(cloud, q, 5), knn_oracle(pts, q, 5))

    def test_rows_sorted_by_distance(self):
        cloud = gen_shape("sphere", 64, seed=9)
        rows = knn(cloud, np.arange(64), 6)
        pts = cloud.points
        for i, row in enumerate(rows):
            d = np.linalg.norm(pts[row] - pts[i], axis=1)
            assert np.all(np.diff(d) >= -1e-12)

    def test_tie_break_by_lower_index(self):
        # four points equidistant from the query; only the two lowest indices win
        pts = np.array(
            [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float
        )
        rows = knn(PointCloud(pts), [0], 3)
        assert rows.tolist() == [[0, 1, 2]]

    def test_k_too_large_rejected(self):
        cloud = gen_shape("sphere", 10, seed=0)
        with pytest.raises(InvalidArgumentError):
            knn(cloud, [0], 11)


class TestPatchify:
    def test_paper_scale_shapes(self):
        cloud = gen_shape("sphere", 2048, seed=2, noise=0.01)
        patches = patchify(cloud, 128, 32)
        assert patches.neighbor_indices.shape == (128, 32)
        assert patches.n_centers == 128

    def test_single_patch(self):
        cloud = gen_shape("sphere", 40, seed=4)
        patches = patchify(cloud, 1, 5)
        np.testing.assert_array_equal(
            patches.neighbor_indices, knn(cloud, patches.center_indices, 5)
        )

    def test_center_in_own_patch(self):
        cloud = gen_shape("torus", 300, seed=6)
        patches = patchify(cloud, 24, 8)
        for c, row in zip(patches.center_indices, patches.neighbor_indices):
            assert c in row

    def test_pure_function_of_inputs(self):
        cloud = gen_shape("box", 256, seed=8)
        a = patchify(cloud, 16, 12, start_index=5)
        b = patchify(cloud, 16, 12, start_index=5)
        np.testing.assert_array_equal(a.center_indices, b.center_indices)
        np.testing.assert_array_equal(a.neighbor_indices, b.neighbor_indices)

    def test_index_validation(self):
        cloud = gen_shape("sphere", 16, seed=0)
        with pytest.raises(InvalidArgumentError):
            PatchSet(cloud, np.array([0, 0]), np.zeros((2, 3), dtype=int))


class TestRigid:
    def test_identity(self):
        cloud = gen_shape("sphere", 50, seed=1)
        out = apply_rigid(cloud, RigidTransform.identity())
        np.testing.assert_array_equal(out.points, cloud.points)

    def test_translation_preserves_distances(self):
        cloud = gen_shape("box", 60, seed=2)
        t = RigidTransform(np.eye(3), np.array([3.0, -1.0, 0.5]))
        out = apply_rigid(cloud, t)
        d0 = np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=2)
        d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
        assert np.max(np.abs(d0 - d1)) < 1e-9

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_rotation_preserves_distance_matrix(self, seed):
        rng = np.random.default_rng(seed)
        cloud = PointCloud(rng.normal(size=(40, 3)))
        out = apply_rigid(cloud, RigidTransform.random(seed))
        d0 = np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=2)
        d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
        assert np.max(np.abs(d0 - d1)) < 1e-9

    def test_knn_rows_invariant_under_isometry(self):
        cloud = gen_shape("torus", 150, seed=3, noise=0.02)
        moved = apply_rigid(cloud, RigidTransform.random(17))
        q = np.arange(0, 150, 11)
        np.testing.assert_array_equal(knn(cloud, q, 6), knn(moved, q, 6))

    def test_bad_rotation_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RigidTransform(2.0 * np.eye(3), np.zeros(3))


class TestGenShape:
    def test_sphere_radius(self):
        cloud = gen_shape("sphere", 100, seed=0, noise=0.0)
        r = np.linalg.norm(cloud.points, axis=1)
        assert np.max(np.abs(r - 1.0)) < 1e-9

    def test_two_spheres_components(self):
        cloud = gen_shape("two_spheres", 80, seed=1)
        rows = knn(cloud, np.arange(80), 5)
        adj = [set() for _ in range(80)]
        for i, row in enumerate(rows):
            for j in row:
                if j != i:
                    adj[i].add(int(j))
                    adj[int(j)].add(i)
        assert bfs_components([sorted(a) for a in adj]) >= 2

    def test_seed_determinism(self):
        a = gen_shape("torus", 64, seed=42, noise=0.05)
        b = gen_shape("torus", 64, seed=42, noise=0.05)
        np.testing.assert_array_equal(a.points, b.points)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError, match="sphere"):
            gen_shape("pyramid", 32, seed=0)

    def test_minimum_points(self):
        with pytest.raises(InvalidArgumentError):
            gen_shape("sphere", 4, seed=0)


class TestXyzIO:
    def test_roundtrip(self, tmp_path):
        cloud = gen_shape("box", 30, seed=5, noise=0.01)
        path = tmp_path / "cloud.xyz"
        save_xyz(cloud, path)
        back = load_xyz(path)
        np.testing.assert_array_equal(back.points, cloud.points)

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("# header\n0 0 0\n# mid\n1 2 3\n")
        cloud = load_xyz(path)
        assert len(cloud) == 2

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("0 0 0\n1 2\n")
        with pytest.raises(InvalidArgumentError, match=":2"):
            load_xyz(path)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=40),
    k=st.integers(min_value=1, max_value=10),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_fps_prefix_property(n, k, seed):
    """The first m selections of fps(n) equal fps(m): greedy choices never change."""
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(n, 3)))
    m = min(k, n)
    np.testing.assert_array_equal(fps(cloud, n)[:m], fps(cloud, m))
