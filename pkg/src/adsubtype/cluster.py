"""Spectral clustering of binary feature matrices.

Pipeline: pairwise Hamming distances -> Laplacian-kernel affinity ->
normalized-Laplacian eigen-embedding (top-k eigenvectors of
D^{-1/2} A D^{-1/2}, rows renormalized) -> k-means labels in the embedding.
Also provides the raw-feature SSE elbow probe for choosing k and the
adjusted Rand index for partition agreement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralConfig:
    k: int
    gamma: float | None = None  # None -> 1 / feature_count
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-4
    seed: int = 0
    knn_sparsify: int | None = None
    dense_cap: int = 20000

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")


@dataclass
class AffinityMatrix:
    """Symmetric affinity with unit diagonal; dense ndarray or sparse CSR."""

    values: np.ndarray | sp.csr_matrix

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)


@dataclass
class Embedding:
    values: np.ndarray  # N x k, unit-norm rows
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # N x k, raw unit-norm columns


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    sse: float
    seed: int
    sse_history: list[float] = field(default_factory=list)


@dataclass
class ElbowCurve:
    points: list[tuple[int, float]]
    chosen_k: int | None = None


def hamming_distance_matrix(X: np.ndarray) -> np.ndarray:
    """Pairwise count of differing positions between binary rows.

    Uses the identity d(x, y) = |x| + |y| - 2 x.y for 0/1 vectors; the float
    matmul is exact here (all intermediates are integers far below 2^53), so
    the result is independent of BLAS threading.
    """
    X = np.asarray(X)
    if X.size and not np.isin(X, (0, 1)).all():
        raise ValueError("hamming_distance_matrix expects a binary matrix")
    Xf = X.astype(np.float64)
    gram = Xf @ Xf.T
    counts = Xf.sum(axis=1)
    D = counts[:, None] + counts[None, :] - 2.0 * gram
    return np.rint(D).astype(np.int64)


def laplacian_kernel_affinity(D: np.ndarray, gamma: float) -> AffinityMatrix:
    """A(i,j) = exp(-gamma * D(i,j)); for binary rows Hamming equals L1."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if (np.diag(D) != 0).any():
        raise ValueError("distance matrix must have zero diagonal")
    return AffinityMatrix(np.exp(-gamma * D))


def knn_sparsified_affinity(
    X: np.ndarray, gamma: float, neighbors: int, block: int = 1024
) -> AffinityMatrix:
    """Sparse affinity keeping the `neighbors` largest entries per row.

    Distances are computed in row blocks so the full N x N matrix is never
    materialized; the kept pattern is symmetrized by elementwise max (union
    of directed kNN edges). The diagonal is always kept.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    n = X.shape[0]
    m = min(neighbors + 1, n)  # +1: the diagonal is its own best neighbor
    Xf = np.asarray(X, dtype=np.float64)
    counts = Xf.sum(axis=1)
    rows, cols, vals = [], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        Db = counts[start:stop, None] + counts[None, :] - 2.0 * (Xf[start:stop] @ Xf.T)
        Db = np.rint(Db)
        idx = np.argpartition(Db, m - 1, axis=1)[:, :m]
        for r in range(stop - start):
            keep = np.sort(idx[r])
            rows.extend([start + r] * len(keep))
            cols.extend(keep.tolist())
            vals.extend(np.exp(-gamma * Db[r, keep]).tolist())
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A = A.maximum(A.T)
    A.setdiag(1.0)
    return AffinityMatrix(A.tocsr())


def normalized_laplacian_embedding(A: AffinityMatrix, k: int) -> Embedding:
    """Top-k eigenvectors of M = D^{-1/2} A D^{-1/2}, rows renormalized.

    Dense input uses a full symmetric eigendecomposition; sparse input uses a
    restarted iterative solver. Eigenvector signs are fixed so the largest-
    magnitude component of each column is positive.
    """
    n = A.n
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if A.is_sparse:
        d = np.asarray(A.values.sum(axis=1)).ravel()
    else:
        d = A.values.sum(axis=1)
    if (d <= 0).any():
        raise ValueError("affinity has a zero-degree row")
    inv_sqrt = 1.0 / np.sqrt(d)

    if A.is_sparse:
        M = sp.diags(inv_sqrt) @ A.values @ sp.diags(inv_sqrt)
        M = (M + M.T) * 0.5
        if k >= n - 1:  # iterative solver needs k < n-1; fall back to dense
            return normalized_laplacian_embedding(AffinityMatrix(np.asarray(M.todense())), k)
        try:
            eigvals, eigvecs = spla.eigsh(M, k=k, which="LA")
        except spla.ArpackNoConvergence as exc:
            raise RuntimeError(
                f"eigensolver failed to converge: {len(exc.eigenvalues)} of {k} "
                f"eigenpairs converged"
            ) from exc
        order = np.argsort(eigvals)[::-1]
    else:
        M = inv_sqrt[:, None] * A.values * inv_sqrt[None, :]
        M = (M + M.T) * 0.5
        eigvals, eigvecs = np.linalg.eigh(M)
        order = np.argsort(eigvals)[::-1][:k]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    # deterministic sign convention
    for j in range(eigvecs.shape[1]):
        pivot = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[pivot, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]

    norms = np.linalg.norm(eigvecs, axis=1)
    if (norms == 0).any():
        raise RuntimeError("embedding produced a zero row; affinity is malformed")
    values = eigvecs / norms[:, None]
    return Embedding(values=values, eigenvalues=eigvals, eigenvectors=eigvecs)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _kmeanspp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all points coincide with a chosen center; lowest index wins
            idx = int(np.argmin(closest))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        closest = np.minimum(closest, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _point_center_sqdist(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2; used for assignment only (argmin)
    x2 = np.einsum("ij,ij->i", X, X)
    c2 = np.einsum("ij,ij->i", centers, centers)
    d2 = x2[:, None] + c2[None, :] - 2.0 * (X @ centers.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _assigned_residuals(X: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # exact per-point squared distance to the assigned center
    diff = X - centers[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _lloyd(
    X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd iterations; returns (labels, centers, sse, per-iteration sse).

    The recorded objective is evaluated after each assignment step and is
    non-increasing. An empty cluster is re-seeded at the point farthest from
    its assigned center.
    """
    k = centers.shape[0]
    history: list[float] = []
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = _point_center_sqdist(X, centers).argmin(axis=1)
        point_d2 = _assigned_residuals(X, centers, labels)
        history.append(float(point_d2.sum()))

        new_centers = centers.copy()
        empties = [j for j in range(k) if not (labels == j).any()]
        claim_d2 = point_d2.copy()
        for j in empties:
            far = int(np.argmax(claim_d2))
            new_centers[j] = X[far]
            claim_d2[far] = -1.0  # a point re-seeds at most one centroid
        for j in range(k):
            if j in empties:
                continue
            new_centers[j] = X[labels == j].mean(axis=0)

        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    labels = _point_center_sqdist(X, centers).argmin(axis=1)
    sse = float(_assigned_residuals(X, centers, labels).sum())
    history.append(sse)
    return labels, centers, sse, history


def kmeans(
    X: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-4,
    seed: int = 0,
) -> ClusterAssignment:
    """k-means++ seeded Lloyd's algorithm; best of `restarts` runs by SSE.

    Each restart draws from an independent substream of the seed, so results
    are reproducible and independent of evaluation order. Ties between
    restarts keep the earliest.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points n={n}")
    best: tuple[float, int] | None = None
    best_result = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = _kmeanspp_centers(X, k, rng)
        labels, centers, sse, history = _lloyd(X, centers, max_iter, tol)
        if best is None or sse < best[0]:
            best = (sse, r)
            best_result = (labels, sse, history)
    labels, sse, history = best_result
    return ClusterAssignment(labels=labels, k=k, sse=sse, seed=seed, sse_history=history)


def spectral_cluster(
    X: np.ndarray, config: SpectralConfig, return_details: bool = False
):
    """Full pipeline: Hamming -> Laplacian-kernel affinity -> embedding -> k-means.

    With return_details=True also returns the intermediates for audit dumps.
    """
    X = np.asarray(X)
    n, n_features = X.shape
    gamma = config.gamma if config.gamma is not None else 1.0 / n_features

    if n > config.dense_cap and config.knn_sparsify is None:
        raise ValueError(
            f"n={n} exceeds dense_cap={config.dense_cap}; set knn_sparsify or raise the cap"
        )
    if config.knn_sparsify is not None:
        affinity = knn_sparsified_affinity(X, gamma, config.knn_sparsify)
        distances = None
    else:
        distances = hamming_distance_matrix(X)
        affinity = laplacian_kernel_affinity(distances, gamma)

    embedding = normalized_laplacian_embedding(affinity, config.k)
    assignment = kmeans(
        embedding.values,
        config.k,
        restarts=config.kmeans_restarts,
        max_iter=config.kmeans_max_iter,
        tol=config.kmeans_tol,
        seed=config.seed,
    )
    if return_details:
        return assignment, {
            "distances": distances,
            "affinity": affinity,
            "embedding": embedding,
        }
    return assignment


def elbow_sse_curve(
    X: np.ndarray,
    kmin: int = 1,
    kmax: int = 10,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-4,
    seed: int = 0,
) -> ElbowCurve:
    """Best k-means SSE on the raw features for each k in [kmin, kmax]."""
    X = np.asarray(X, dtype=np.float64)
    if kmax > X.shape[0]:
        raise ValueError(f"kmax={kmax} exceeds number of points n={X.shape[0]}")
    if kmin < 1 or kmin > kmax:
        raise ValueError("need 1 <= kmin <= kmax")
    points = []
    for k in range(kmin, kmax + 1):
        result = kmeans(X, k, restarts=restarts, max_iter=max_iter, tol=tol, seed=seed)
        points.append((k, result.sse))
    return ElbowCurve(points=points)


def detect_elbow(curve: ElbowCurve | list[tuple[int, float]]) -> int:
    """k of the interior point farthest from the chord joining the curve ends.

    Ties resolve to the smaller k. A flat (near-linear) curve has no clear
    elbow; the smallest interior k is returned with a warning.
    """
    points = curve.points if isinstance(curve, ElbowCurve) else list(curve)
    if len(points) < 3:
        raise ValueError("elbow detection needs at least 3 curve points")
    ks = np.array([float(k) for k, _ in points])
    ys = np.array([float(s) for _, s in points])
    x1, y1 = ks[0], ys[0]
    x2, y2 = ks[-1], ys[-1]
    # perpendicular distance from each interior point to the chord
    num = np.abs((y2 - y1) * ks - (x2 - x1) * ys + x2 * y1 - y2 * x1)
    den = np.hypot(x2 - x1, y2 - y1)
    dist = num[1:-1] / den
    best = int(np.argmax(dist))  # argmax keeps the first (smallest k) on ties
    if dist[best] <= 1e-9 * max(abs(y1 - y2), 1.0):
        log.warning("detect_elbow: no clear elbow on a near-linear curve")
    return int(ks[1 + best])


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected pair-counting agreement between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.shape} vs {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = sum(comb(int(v), 2) for v in table.ravel())
    sum_rows = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0  # both partitions trivial and identical in pair structure
    return (sum_cells - expected) / (max_index - expected)
