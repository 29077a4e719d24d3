"""Geometry-guided pooling: sharpened-softmax affinities over voxels and
iterated feature averaging.

The affinity matrix is sparse and row-stochastic: each voxel attends to
its K nearest voxels (itself included) with weights from a softmax of
alpha-scaled embedding cosine similarities. Pooling applies F <- A F for
T Jacobi sweeps, so every output row is a convex combination of inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .geometry import PointCloud, voxelize
from .kernels import knn_search, pool_sweeps
from .lifting import FeatureField
from .student import StudentNet, embed_points, featurize_context


@dataclass(frozen=True)
class AffinityGraph:
    """Sparse row-stochastic affinity operator over V voxels.

    neighbor_idx/weights are (V, Kn); every row sums to 1 within 1e-6 and
    includes the voxel itself as one neighbour.
    """

    neighbor_idx: np.ndarray
    weights: np.ndarray
    alpha: float
    k: int

    def __post_init__(self):
        idx = np.ascontiguousarray(self.neighbor_idx, dtype=np.int64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if idx.ndim != 2 or w.shape != idx.shape:
            raise ParameterError("neighbor_idx and weights must be matching (V, K)")
        if (w <= 0).any():
            raise DataError("affinity weights must be positive")
        sums = w.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise DataError("affinity rows must sum to 1 within 1e-6")
        self_present = (idx == np.arange(idx.shape[0])[:, None]).any(axis=1)
        if not self_present.all():
            raise DataError("every affinity row must include the self-index")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "neighbor_idx", idx)
        object.__setattr__(self, "weights", w)

    @property
    def num_voxels(self) -> int:
        return self.neighbor_idx.shape[0]

    def dense(self) -> np.ndarray:
        """Materialize the full V x V matrix (small graphs / tests only)."""
        v = self.num_voxels
        out = np.zeros((v, v), dtype=np.float64)
        rows = np.repeat(np.arange(v), self.neighbor_idx.shape[1])
        np.add.at(out, (rows, self.neighbor_idx.reshape(-1)), self.weights.reshape(-1))
        return out


def build_affinity(geo_embeds, centroids, k: int, alpha: float) -> AffinityGraph:
    """Affinity over the K spatial nearest voxels (self included).

    A_ij = exp(alpha * <g_i, g_j>) / sum_{k in N(i)} exp(alpha * <g_i, g_k>),
    computed with max-subtracted exponentials. K saturates to V on small
    scenes.
    """
    if k < 1:
        raise ParameterError("K must be >= 1")
    if not np.isfinite(alpha) or alpha <= 0:
        raise ParameterError("alpha must be positive")
    g = geo_embeds.values if isinstance(geo_embeds, FeatureField) else np.asarray(geo_embeds, dtype=np.float64)
    cent = np.ascontiguousarray(centroids, dtype=np.float64)
    v = g.shape[0]
    if cent.shape != (v, 3):
        raise ParameterError("centroids must be (V, 3) aligned with embeddings")
    norms = np.linalg.norm(g, axis=1)
    if v and np.abs(norms - 1.0).max() > 1e-4:
        raise DataError("embedding rows must be unit-norm within 1e-4")
    kn = min(k, v)
    idx, _ = knn_search(cent, cent, kn)
    # distance-0 self always wins its slot, so the self-index is present
    sims = np.einsum("vd,vkd->vk", g, g[idx])
    logits = alpha * sims
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    weights = expd / expd.sum(axis=1, keepdims=True)
    return AffinityGraph(neighbor_idx=idx, weights=weights, alpha=float(alpha), k=int(k))


def iterate_pool(graph: AffinityGraph, f0: FeatureField, t: int) -> FeatureField:
    """Compute F_T = A^T F0 by T sparse sweeps (no renormalization).

    Coverage propagates through the graph: a voxel becomes covered once
    any voxel in its T-hop neighbourhood is covered, which keeps the
    zero-row invariant exact for rows no information can reach.
    """
    if t < 0 or int(t) != t:
        raise ParameterError("T must be a non-negative integer")
    if len(f0) != graph.num_voxels:
        raise ParameterError("feature rows must match the graph's voxel count")
    if t == 0:
        return f0
    values = pool_sweeps(graph.neighbor_idx, graph.weights, f0.values, int(t))
    coverage = f0.coverage.copy()
    for _ in range(int(t)):
        coverage = coverage[graph.neighbor_idx].any(axis=1)
    values = values.copy()
    values[~coverage] = 0.0
    return FeatureField(values, "voxel", coverage)


@dataclass(frozen=True)
class PoolingConfig:
    """End-to-end purification settings (published defaults)."""

    voxel_size: float = 0.02
    k: int = 96
    alpha: float = 0.05
    t: int = 18
    k_ctx: int = 16


def purify(
    cloud: PointCloud,
    sem: FeatureField,
    net: StudentNet,
    cfg: PoolingConfig = PoolingConfig(),
) -> FeatureField:
    """Purify a per-point semantic field with geometry-guided pooling.

    Pipeline: voxelize; per-voxel mean of member-point semantic features
    (uncovered points contribute their zero rows); per-voxel student
    embedding = renormalized mean of member-point embeddings; build the
    affinity graph; iterate T sweeps; scatter voxel features back to
    member points.
    """
    n = len(cloud)
    if len(sem) != n:
        raise ParameterError("semantic field does not align with the cloud")
    if sem.dim < 1:
        raise ParameterError("semantic field is empty")
    grid = voxelize(cloud, cfg.voxel_size)
    v = grid.num_voxels
    p2v = grid.point_to_voxel
    counts = np.bincount(p2v, minlength=v).astype(np.float64)

    f0 = np.zeros((v, sem.dim), dtype=np.float64)
    np.add.at(f0, p2v, sem.values)
    f0 /= counts[:, None]
    vox_cov = np.zeros(v, dtype=bool)
    np.logical_or.at(vox_cov, p2v, sem.coverage)
    f0[~vox_cov] = 0.0

    desc = featurize_context(cloud, cfg.k_ctx)
    point_emb, _ = embed_points(net, desc)
    emb = np.zeros((v, point_emb.dim), dtype=np.float64)
    np.add.at(emb, p2v, point_emb.values)
    norms = np.linalg.norm(emb, axis=1)
    degenerate = norms < 1e-12
    safe = np.where(degenerate, 1.0, norms)
    emb /= safe[:, None]
    if degenerate.any():
        emb[degenerate] = 0.0
        emb[degenerate, 0] = 1.0

    graph = build_affinity(emb, grid.voxel_centroids, cfg.k, cfg.alpha)
    pooled = iterate_pool(graph, FeatureField(f0, "voxel", vox_cov), cfg.t)
    return FeatureField(
        pooled.values[p2v], "point", pooled.coverage[p2v]
    )
