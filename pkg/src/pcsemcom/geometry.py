"""Deterministic point-set kernels.

Point clouds are plain ``(N, 3)`` float64 arrays.  All neighbour searches are
brute force with squared distances computed as ``dx*dx + dy*dy + dz*dz`` so
that rankings are exactly reproducible; ties always go to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# rows of the distance matrix evaluated at once in chunked searches
_CHUNK = 256


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite coordinates")
    return pts


def squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distance from ``query`` (broadcast over leading axes) to each point."""
    d = points - query
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return x * x + y * y + z * z


def pairwise_squared(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(Na, Nb)`` squared distances, same arithmetic as :func:`squared_distances`."""
    return squared_distances(a[:, None, :], b[None, :, :])


def fps(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Farthest point sampling: ``m`` indices starting at ``seed_index``."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"fps: seed index {seed_index} out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    mind = squared_distances(pts, pts[seed_index])
    mind[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        np.minimum(mind, squared_distances(pts, pts[nxt]), out=mind)
        mind[selected[: i + 1]] = -1.0
    return selected


def fps_batched(points: np.ndarray, m: int, seed_indices: np.ndarray) -> np.ndarray:
    """FPS applied independently to every cloud of a ``(P, K, 3)`` stack."""
    p, k, _ = points.shape
    if not 1 <= m <= k:
        raise ValueError(f"fps: need 1 <= m <= K, got m={m}, K={k}")
    rows = np.arange(p)
    selected = np.empty((p, m), dtype=np.int64)
    selected[:, 0] = seed_indices
    mind = squared_distances(points, points[rows, seed_indices][:, None, :])
    mind[rows, seed_indices] = -1.0
    for i in range(1, m):
        nxt = np.argmax(mind, axis=1)
        selected[:, i] = nxt
        np.minimum(mind, squared_distances(points, points[rows, nxt][:, None, :]), out=mind)
        mind[rows[:, None], selected[:, : i + 1]] = -1.0
    return selected


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to ``query``, nearest first."""
    pts = as_cloud(cloud)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"knn: need 1 <= k <= N, got k={k}, N={pts.shape[0]}")
    d = squared_distances(pts, np.asarray(query, dtype=np.float64))
    return np.argsort(d, kind="stable")[:k]


def knn_many(cloud: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`knn` for a ``(Q, 3)`` query array -> ``(Q, k)`` indices."""
    if not 1 <= k <= cloud.shape[0]:
        raise ValueError(f"knn: need 1 <= k <= N, got k={k}, N={cloud.shape[0]}")
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], _CHUNK):
        d = pairwise_squared(queries[start:start + _CHUNK], cloud)
        out[start:start + _CHUNK] = _smallest_k(d, k)
    return out


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    # row-wise k smallest ordered by (distance, index), without a full sort
    if k == d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    below = d < kth
    at = d == kth
    need = k - below.sum(axis=1, keepdims=True)
    keep = below | (at & (np.cumsum(at, axis=1) <= need))
    cols = np.nonzero(keep)[1].reshape(d.shape[0], k)
    order = np.argsort(np.take_along_axis(d, cols, axis=1), axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def knn_batched(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """kNN inside each cloud of a stack: ``(P, K, 3)``, ``(P, M, 3)`` -> ``(P, M, k)``."""
    d = squared_distances(points[:, None, :, :], queries[:, :, None, :])
    return np.argsort(d, axis=2, kind="stable")[:, :, :k]


def nearest_neighbors(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """For every point of ``src`` the index of, and squared distance to, its nearest ``dst`` point."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    idx = np.empty(src.shape[0], dtype=np.int64)
    dist = np.empty(src.shape[0])
    for start in range(0, src.shape[0], _CHUNK):
        d = pairwise_squared(src[start:start + _CHUNK], dst)
        j = np.argmin(d, axis=1)
        idx[start:start + _CHUNK] = j
        dist[start:start + _CHUNK] = d[np.arange(j.size), j]
    return idx, dist


@dataclass
class PatchSet:
    """``S`` centred patches of ``K`` points plus their centroid coordinates."""

    patches: np.ndarray      # (S, K, 3), centroid subtracted
    centroids: np.ndarray    # (S, 3)
    indices: np.ndarray      # (S, K) source indices of patch members
    centroid_indices: np.ndarray  # (S,)

    @property
    def S(self) -> int:
        return self.patches.shape[0]

    @property
    def K(self) -> int:
        return self.patches.shape[1]


def patch_size(n_points: int, n_patches: int) -> int:
    """``K`` from the oversampled cover rule ``S * K = 2 * N``."""
    if n_patches < 1 or (2 * n_points) % n_patches:
        raise ValueError(f"S={n_patches} does not divide 2N={2 * n_points}")
    k = 2 * n_points // n_patches
    if k > n_points:
        raise ValueError(f"patch size K={k} exceeds point count N={n_points}")
    return k


def extract_patches(cloud, S: int, seed_index: int = 0) -> PatchSet:
    pts = as_cloud(cloud)
    k = patch_size(pts.shape[0], S)
    centre_idx = fps(pts, S, seed_index)
    centroids = pts[centre_idx]
    members = knn_many(pts, centroids, k)
    patches = pts[members] - centroids[:, None, :]
    return PatchSet(patches, centroids, members, centre_idx)


def reassemble(patches, centroids) -> np.ndarray:
    """Shift each patch back by its centroid and concatenate the patches."""
    patches = np.asarray(patches, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[2] != 3 or centroids.shape != (patches.shape[0], 3):
        raise ValueError(f"reassemble: patches {patches.shape} incompatible with centroids {centroids.shape}")
    return (patches + centroids[:, None, :]).reshape(-1, 3)


def bbox_diagonal(cloud) -> float:
    pts = as_cloud(cloud)
    extent = pts.max(axis=0) - pts.min(axis=0)
    return float(np.sqrt(extent @ extent))


def estimate_normals(cloud, k: int = 12) -> np.ndarray:
    """Unit normals from the covariance of each point's ``k`` nearest neighbours.

    The normal is the eigenvector of the smallest eigenvalue; its sign is
    chosen so that the largest-magnitude component is positive.
    """
    pts = as_cloud(cloud)
    if k < 3:
        raise ValueError("estimate_normals needs k >= 3")
    if k > pts.shape[0]:
        raise ValueError(f"estimate_normals: k={k} exceeds N={pts.shape[0]}")
    nbrs = pts[knn_many(pts, pts, k)]                  # (N, k, 3)
    centred = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    lead = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(normals.shape[0]), lead])
    sign[sign == 0] = 1.0
    normals = normals * sign[:, None]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)
