"""Patch-connectivity graph, random-walk Laplacian and its low spectrum.

The graph connects each patch center to its K nearest neighbors (symmetrized)
with Gaussian-kernel weights W_ij = exp(-||p_i - p_j||^2 / sigma). Eigenpairs
are computed through the symmetric similarity L_sym = D^{1/2} L_rw D^{-1/2}
so that one symmetric solver serves everything: a dense LAPACK path for small
graphs and an ARPACK shift-invert path for the scaling benchmark.

Canonicalization removes the two spectral ambiguities (eigenvector sign, and
the order of near-degenerate pairs) so that orderings derived from the
spectrum are reproducible across isometric copies of the same cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from .errors import (
    ConvergenceError,
    DegenerateEigenvectorError,
    DegenerateGeometryError,
    InvalidArgumentError,
    IsolatedNodeError,
    PreconditionError,
)

ZERO_MODE_TOL = 1e-8
ANCHOR_TOL = 1e-8
DEFAULT_EPSILON = 1e-6
DENSE_LIMIT = 1024  # above this, eigensolve(method="auto") switches to Lanczos


@dataclass(frozen=True)
class GraphParams:
    """K for the neighbor relation; sigma=None selects self-tuning kernel width."""

    k_neighbors: int = 20
    sigma: float | None = None

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise InvalidArgumentError("k_neighbors must be >= 1")
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidArgumentError("fixed sigma must be > 0")


class AdjacencyGraph:
    """Sparse symmetric weighted adjacency with per-node degree sums."""

    def __init__(self, weights: sp.spmatrix):
        w = sp.csr_matrix(weights, dtype=np.float64)
        if w.shape[0] != w.shape[1]:
            raise InvalidArgumentError("adjacency must be square")
        if w.diagonal().any():
            raise InvalidArgumentError("adjacency must have no self-loops")
        asym = abs(w - w.T)
        if asym.nnz and asym.max() > 1e-12:
            raise InvalidArgumentError("adjacency must be symmetric")
        if w.nnz:
            if w.data.min() <= 0 or w.data.max() > 1.0 + 1e-12:
                raise InvalidArgumentError("edge weights must lie in (0, 1]")
        self.weights = w
        self.degrees = np.asarray(w.sum(axis=1)).ravel()

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return self.weights.nnz // 2

    def dense(self) -> np.ndarray:
        return self.weights.toarray()


def build_graph(centers, params: GraphParams) -> AdjacencyGraph:
    """Symmetrized kNN graph over patch centers with Gaussian edge weights.

    An edge (i, j) exists if either endpoint lists the other among its K
    nearest neighbors. In self-tuning mode sigma is the mean squared length
    of the stored edges, which keeps the weights isometry-invariant without
    a per-dataset width parameter.
    """
    pts = np.asarray(centers, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgumentError(f"centers must be (N, 3), got {pts.shape}")
    n = pts.shape[0]
    k = params.k_neighbors
    if n < 2:
        raise InvalidArgumentError("graph needs at least two centers")
    if k >= n:
        raise InvalidArgumentError(f"k_neighbors must be < n_centers ({k} >= {n})")

    _, idx = cKDTree(pts).query(pts, k=k + 1)
    rows = np.repeat(np.arange(n), k)
    # drop each row's self entry; with duplicate points self may be absent
    # from the k+1 returned, in which case the farthest entry is dropped
    non_self = idx != np.arange(n)[:, None]
    order = np.argsort(~non_self, axis=1, kind="stable")
    cols = np.take_along_axis(idx, order[:, :k], axis=1).ravel()

    # symmetrize the relation: keep unique undirected pairs
    a = np.minimum(rows, cols)
    b = np.maximum(rows, cols)
    pairs = np.unique(np.stack([a, b], axis=1), axis=0)
    d2 = np.sum((pts[pairs[:, 0]] - pts[pairs[:, 1]]) ** 2, axis=1)

    if params.sigma is None:
        sigma = float(np.mean(d2))
        if sigma <= 0.0:
            raise DegenerateGeometryError(
                "self-tuning sigma is 0: all centers coincide"
            )
    else:
        sigma = params.sigma
    w = np.exp(-d2 / sigma)

    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    mat = sp.coo_matrix((np.concatenate([w, w]), (i, j)), shape=(n, n))
    return AdjacencyGraph(mat.tocsr())


class LaplacianOperator:
    """Random-walk Laplacian L_rw = I - D^{-1} W as an operator over the graph."""

    def __init__(self, graph: AdjacencyGraph):
        if np.any(graph.degrees <= 0.0):
            bad = int(np.argmin(graph.degrees))
            raise IsolatedNodeError(
                f"node {bad} has zero degree; raise K or drop the node"
            )
        self.graph = graph
        self.degrees = graph.degrees
        self._n_components: int | None = None
        self._sym_dense: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x - (self.graph.weights @ x) / self.degrees

    def dense(self) -> np.ndarray:
        return np.eye(self.n_nodes) - self.graph.dense() / self.degrees[:, None]

    def sym(self) -> sp.csr_matrix:
        """Similar symmetric matrix L_sym = D^{-1/2} (D - W) D^{-1/2}."""
        inv_sqrt = 1.0 / np.sqrt(self.degrees)
        scale = sp.diags(inv_sqrt)
        return sp.identity(self.n_nodes, format="csr") - scale @ self.graph.weights @ scale

    def sym_dense(self) -> np.ndarray:
        if self._sym_dense is None:
            inv_sqrt = 1.0 / np.sqrt(self.degrees)
            m = -self.graph.dense() * inv_sqrt[:, None] * inv_sqrt[None, :]
            np.fill_diagonal(m, 1.0)
            self._sym_dense = m
        return self._sym_dense

    @property
    def n_components(self) -> int:
        if self._n_components is None:
            self._n_components = _count_components(self.graph.weights)
        return self._n_components


def _count_components(weights: sp.csr_matrix) -> int:
    n = weights.shape[0]
    indptr, indices = weights.indptr, weights.indices
    seen = np.zeros(n, dtype=bool)
    comps = 0
    for start in range(n):
        if seen[start]:
            continue
        comps += 1
        stack = [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            for v in indices[indptr[u] : indptr[u + 1]]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
    return comps


def random_walk_laplacian(graph: AdjacencyGraph) -> LaplacianOperator:
    return LaplacianOperator(graph)


@dataclass(frozen=True)
class SpectralEmbedding:
    """The s smallest non-constant eigenpairs of L_rw; row k of eigenvectors is v^(k)."""

    eigenvalues: np.ndarray  # (s,)
    eigenvectors: np.ndarray  # (s, n), unit-norm rows
    canonicalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=np.float64)
        vecs = np.asarray(self.eigenvectors, dtype=np.float64)
        if vals.ndim != 1 or vecs.ndim != 2 or vecs.shape[0] != vals.shape[0]:
            raise InvalidArgumentError("eigenvalue/eigenvector shapes inconsistent")
        if vals.size and vals.min() < -ZERO_MODE_TOL:
            raise InvalidArgumentError(f"negative eigenvalue {vals.min()}")
        # near-identical pairs may be reordered by canonicalization; allow
        # inversions only within the degeneracy tolerance
        if vals.size > 1 and np.min(np.diff(vals)) < -DEFAULT_EPSILON:
            raise InvalidArgumentError("eigenvalues must be non-decreasing")
        norms = np.linalg.norm(vecs, axis=1)
        if vals.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise InvalidArgumentError("eigenvectors must have unit norm")
        vals.flags.writeable = False
        vecs.flags.writeable = False
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def n_vectors(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.eigenvectors.shape[1]

    def truncate(self, s: int) -> "SpectralEmbedding":
        if not 1 <= s <= self.n_vectors:
            raise InvalidArgumentError(f"cannot truncate to {s} of {self.n_vectors}")
        return SpectralEmbedding(
            self.eigenvalues[:s], self.eigenvectors[:s], self.canonicalized
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "eigenvalues": self.eigenvalues.tolist(),
                "eigenvectors": self.eigenvectors.tolist(),
                "canonicalized": self.canonicalized,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SpectralEmbedding":
        blob = json.loads(text)
        return cls(
            np.asarray(blob["eigenvalues"], dtype=np.float64),
            np.asarray(blob["eigenvectors"], dtype=np.float64),
            bool(blob["canonicalized"]),
        )


def _low_spectrum(lap: LaplacianOperator, k: int, method: str):
    """Smallest k eigenpairs of L_sym (ascending), including constant modes."""
    n = lap.n_nodes
    if method not in ("auto", "dense", "lanczos"):
        raise InvalidArgumentError(f"unknown eigensolver method {method!r}")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense":
        try:
            vals, vecs = scipy.linalg.eigh(
                lap.sym_dense(), subset_by_index=(0, min(k, n) - 1)
            )
        except np.linalg.LinAlgError as exc:  # pragma: no cover - eigh rarely fails
            raise ConvergenceError(f"dense eigensolve failed: {exc}") from exc
        return vals[:k], vecs[:, :k]
    if k >= n:
        raise InvalidArgumentError("lanczos path requires k < n")
    # shift-invert about a point left of the spectrum targets the smallest
    # eigenvalues; L_sym + 0.1 I is positive definite so the solve is safe
    v0 = np.random.default_rng(0).normal(size=n)
    try:
        vals, vecs = eigsh(lap.sym(), k=k, sigma=-0.1, which="LM", v0=v0)
    except ArpackNoConvergence as exc:
        raise ConvergenceError(f"Lanczos iteration did not converge: {exc}") from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _embedding_from_sym(lap, vals, vecs, c, s) -> SpectralEmbedding:
    vals, vecs = vals[c : c + s], vecs[:, c : c + s]
    rw_vecs = vecs / np.sqrt(lap.degrees)[:, None]
    rw_vecs /= np.linalg.norm(rw_vecs, axis=0)
    return SpectralEmbedding(np.maximum(vals, 0.0), rw_vecs.T, canonicalized=False)


def eigensolve(lap: LaplacianOperator, s: int, method: str = "auto") -> SpectralEmbedding:
    """Compute the s smallest non-constant eigenpairs of L_rw.

    Solves the similar symmetric problem, maps u -> D^{-1/2} u back to
    eigenvectors of L_rw and renormalizes. One constant mode per connected
    component (eigenvalue ~ 0) is skipped before counting the s pairs.
    """
    c = lap.n_components
    if not 1 <= s < lap.n_nodes - c:
        raise InvalidArgumentError(
            f"s must satisfy 1 <= s < n - components ({lap.n_nodes} - {c})"
        )
    vals, vecs = _low_spectrum(lap, s + c, method)
    return _embedding_from_sym(lap, vals, vecs, c, s)


def eigensolve_with_gap(
    lap: LaplacianOperator, s: int, method: str = "auto"
) -> tuple[SpectralEmbedding, float]:
    """One spectrum computation serving both the embedding and its eigen-gap."""
    c = lap.n_components
    if not 1 <= s + 1 < lap.n_nodes - c:
        raise InvalidArgumentError("s too large for eigengap computation")
    vals, vecs = _low_spectrum(lap, s + 1 + c, method)
    gap = float(np.min(np.diff(vals[c - 1 :])))
    return _embedding_from_sym(lap, vals, vecs, c, s), gap


def min_eigengap(lap: LaplacianOperator, s: int, method: str = "auto") -> float:
    """Smallest spacing among the low eigenvalues up to and including lambda_{s+1}.

    Includes the gap between the constant modes and lambda_1, and the gap
    lambda_{s+1} - lambda_s that decides whether "the s smallest" is a stable
    set. Used as the degeneracy guard for invariance claims.
    """
    c = lap.n_components
    if not 1 <= s + 1 < lap.n_nodes - c:
        raise InvalidArgumentError("s too large for eigengap computation")
    vals, _ = _low_spectrum(lap, s + 1 + c, method)
    # keep only the last constant mode: gaps among the zero modes themselves
    # are structurally ~0 and say nothing about the non-constant set
    return float(np.min(np.diff(vals[c - 1 :])))


def anchor_index(vec: np.ndarray) -> int:
    above = np.flatnonzero(np.abs(vec) > ANCHOR_TOL)
    if above.size == 0:
        raise DegenerateEigenvectorError(
            "eigenvector has no element above the anchor tolerance"
        )
    return int(above[0])


def canonicalize(
    embedding: SpectralEmbedding, epsilon: float = DEFAULT_EPSILON
) -> SpectralEmbedding:
    """Fix eigenvector signs and the order of near-degenerate pairs.

    Sign rule: negate v^(k) when its anchor element (the first element with
    magnitude above 1e-8) is negative. Order rule: for consecutive pairs with
    |lambda_k - lambda_{k+1}| <= epsilon, swap when the anchor value of v^(k)
    exceeds that of v^(k+1); passes repeat until nothing changes. Idempotent.
    """
    vals = np.array(embedding.eigenvalues)
    vecs = np.array(embedding.eigenvectors)
    for k in range(vecs.shape[0]):
        if vecs[k, anchor_index(vecs[k])] < 0:
            vecs[k] = -vecs[k]
    changed = True
    while changed:
        changed = False
        for k in range(vecs.shape[0] - 1):
            if abs(vals[k] - vals[k + 1]) <= epsilon:
                if vecs[k, anchor_index(vecs[k])] > vecs[k + 1, anchor_index(vecs[k + 1])]:
                    vecs[[k, k + 1]] = vecs[[k + 1, k]]
                    vals[[k, k + 1]] = vals[[k + 1, k]]
                    changed = True
    return SpectralEmbedding(vals, vecs, canonicalized=True)


def spectral_pipeline(
    centers,
    s: int,
    params: GraphParams | None = None,
    epsilon: float = DEFAULT_EPSILON,
    method: str = "auto",
) -> SpectralEmbedding:
    """Convenience chain: graph -> Laplacian -> eigensolve -> canonicalize."""
    graph = build_graph(centers, params or GraphParams())
    lap = random_walk_laplacian(graph)
    return canonicalize(eigensolve(lap, s, method=method), epsilon=epsilon)


def require_canonical(embedding: SpectralEmbedding) -> None:
    if not embedding.canonicalized:
        raise PreconditionError("embedding must be canonicalized first")
