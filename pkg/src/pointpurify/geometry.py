"""Point-cloud containers, sparse voxelization, spatial search, normals.

Everything downstream (feature lifting, the student network, pooling)
builds on the types here. All containers are immutable after construction
and safe to share across threads; arrays are stored float64/int64,
C-contiguous, with the writeable flag cleared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError
from .kernels import knn_search


def _frozen(a, dtype):
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


def _check_finite(a, what):
    bad = ~np.isfinite(a)
    if bad.any():
        idx = int(np.argwhere(bad.any(axis=tuple(range(1, a.ndim))))[0, 0]) if a.ndim > 1 else int(np.argwhere(bad)[0, 0])
        raise DataError(f"non-finite {what} at index {idx}")


@dataclass(frozen=True)
class PointCloud:
    """One scene: N positions plus optional colors/normals/labels.

    positions: (N, 3) meters. colors: (N, 3) in [0, 1]. normals: (N, 3)
    unit rows (checked to 1e-4). labels: (N,) int class ids, -1 = unlabeled.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None
    scene_id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ParameterError("positions must be a nonempty (N, 3) array")
        _check_finite(pos, "position")
        object.__setattr__(self, "positions", _frozen(pos, np.float64))
        n = pos.shape[0]
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != (n, 3):
                raise ParameterError("colors must be (N, 3)")
            _check_finite(col, "color")
            if col.min() < 0.0 or col.max() > 1.0:
                raise DataError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(col, np.float64))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != (n, 3):
                raise ParameterError("normals must be (N, 3)")
            _check_finite(nrm, "normal")
            lens = np.sqrt(nrm[:, 0] ** 2 + nrm[:, 1] ** 2 + nrm[:, 2] ** 2)
            if np.abs(lens - 1.0).max() > 1e-4:
                raise DataError("normals must be unit length within 1e-4")
            object.__setattr__(self, "normals", _frozen(nrm, np.float64))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,):
                raise ParameterError("labels must be (N,)")
            lab = lab.astype(np.int64)
            if lab.min() < -1:
                raise DataError("labels must be >= -1")
            object.__setattr__(self, "labels", _frozen(lab, np.int64))

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class VoxelGrid:
    """Point-to-voxel assignment over the lattice floor(p / voxel_size).

    voxel_keys are the V distinct lattice triples in lexicographic order;
    point_to_voxel maps each point into [0, V); centroids are arithmetic
    means of member-point positions.
    """

    voxel_size: float
    voxel_keys: np.ndarray
    point_to_voxel: np.ndarray
    voxel_centroids: np.ndarray

    @property
    def num_voxels(self) -> int:
        return self.voxel_keys.shape[0]


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Partition a cloud into a sparse voxel grid.

    Keys are componentwise floor(p / voxel_size) on signed integers, so
    negative coordinates are supported. Key order is lexicographic, which
    makes the output deterministic.
    """
    if not np.isfinite(voxel_size) or voxel_size <= 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    pos = cloud.positions
    _check_finite(pos, "position")
    keys = np.floor(pos / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1).astype(np.int64)
    v = uniq.shape[0]
    counts = np.bincount(inverse, minlength=v).astype(np.float64)
    centroids = np.zeros((v, 3), dtype=np.float64)
    np.add.at(centroids, inverse, pos)
    centroids /= counts[:, None]
    return VoxelGrid(
        voxel_size=float(voxel_size),
        voxel_keys=_frozen(uniq, np.int64),
        point_to_voxel=_frozen(inverse, np.int64),
        voxel_centroids=_frozen(centroids, np.float64),
    )


class NeighborIndex:
    """Exact spatial index over a fixed point set.

    Queries agree with a brute-force scan, with ties broken by ascending
    point index; the heavy lifting happens in the kernel backend. Read-only
    after construction, so concurrent queries are safe.
    """

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ParameterError("index needs a nonempty (M, 3) point array")
        _check_finite(pts, "index point")
        pts.setflags(write=False)
        self._points = pts

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def query_knn(self, query, k: int) -> list[tuple[int, float]]:
        """k nearest neighbours of one query point, (index, distance) pairs."""
        if k < 1:
            raise ParameterError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64).reshape(1, 3)
        idx, dist = knn_search(self._points, q, k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def query_knn_batch(self, queries, k: int):
        """Vectorized k-NN; returns (indices, distances) arrays of shape (Q, k')."""
        if k < 1:
            raise ParameterError("k must be >= 1")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        return knn_search(self._points, q, k)

    def query_radius(self, query, radius: float) -> list[tuple[int, float]]:
        """All points within ``radius`` (inclusive), ordered by (distance, index)."""
        if radius < 0:
            raise ParameterError("radius must be >= 0")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        diff = self._points - q
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
        hit = np.flatnonzero(d2 <= radius * radius)
        order = np.argsort(d2[hit], kind="stable")
        return [(int(hit[i]), float(np.sqrt(d2[hit[i]]))) for i in order]


def build_neighbor_index(points) -> NeighborIndex:
    """Build the exact spatial index used throughout the pipeline."""
    return NeighborIndex(points)


def estimate_normals(cloud: PointCloud, k: int):
    """Per-point unit normals via k-NN covariance analysis.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    sign-oriented toward +z (then +x, then +y when the earlier dot products
    are exactly zero). Neighbourhoods whose covariance has rank < 2 fall
    back to (0, 0, 1) and are reported in the returned warning list.

    Returns (normals, degenerate_indices).
    """
    n = len(cloud)
    if n < 3:
        raise ParameterError("normal estimation needs at least 3 points")
    if k < 3:
        raise ParameterError("k must be >= 3")
    pos = cloud.positions
    idx, _ = knn_search(pos, pos, min(k, n))
    nbrs = pos[idx]  # (N, k, 3)
    mean = nbrs.mean(axis=1, keepdims=True)
    centered = nbrs - mean
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvecs[:, :, 0].copy()

    # rank < 2 <=> the second-smallest eigenvalue vanishes
    scale = np.maximum(eigvals[:, 2], 0.0)
    degenerate = eigvals[:, 1] <= np.maximum(scale * 1e-9, 1e-18)
    normals[degenerate] = (0.0, 0.0, 1.0)

    # deterministic sign: +z, then +x, then +y on exact ties
    z = normals[:, 2]
    x = normals[:, 0]
    y = normals[:, 1]
    flip = (z < 0) | ((z == 0) & (x < 0)) | ((z == 0) & (x == 0) & (y < 0))
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, np.flatnonzero(degenerate).tolist()
