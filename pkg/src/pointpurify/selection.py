"""Entropy/richness scene statistics and stratified subset selection.

Scenes are scored by semantic richness (unique-label count) and semantic
complexity (Shannon entropy of label proportions), median-filtered on both,
clustered by label histogram with K-means, scored by a normalized
complexity + gamma * richness composite, and picked per cluster by quota.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError
from .geometry import PointCloud

log = logging.getLogger(__name__)


@dataclass
class SceneStats:
    """Per-scene label statistics over the global class list."""

    scene_id: str
    n_classes: int
    entropy_bits: float
    histogram: np.ndarray
    cluster: int | None = None
    score: float | None = None

    def __post_init__(self):
        hist = np.asarray(self.histogram, dtype=np.float64)
        if abs(hist.sum() - 1.0) > 1e-9:
            raise DataError("histogram must sum to 1 within 1e-9")
        bound = np.log2(max(self.n_classes, 1))
        if not (-1e-12 <= self.entropy_bits <= bound + 1e-9):
            raise DataError("entropy outside [0, log2(N_c)]")
        self.histogram = hist


def scene_stats(cloud: PointCloud, class_count: int) -> SceneStats:
    """Richness, entropy (base 2, 0*log0 := 0) and normalized histogram.

    Unlabeled points (label -1) are excluded from the proportions.
    """
    if cloud.labels is None:
        raise ParameterError(f"scene {cloud.scene_id!r} has no labels")
    labels = cloud.labels[cloud.labels >= 0]
    if labels.size == 0:
        raise DataError(f"scene {cloud.scene_id!r} has no labeled points")
    if labels.max() >= class_count:
        raise DataError(
            f"scene {cloud.scene_id!r} has label {int(labels.max())} >= class_count"
        )
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    props = counts / counts.sum()
    nz = props[props > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return SceneStats(
        scene_id=cloud.scene_id,
        n_classes=int((counts > 0).sum()),
        entropy_bits=entropy,
        histogram=props,
    )


def _lower_median(values) -> float:
    """Median with the lower-middle convention for even counts."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    return float(s[(len(s) - 1) // 2])


def filter_median(stats: list[SceneStats]) -> list[SceneStats]:
    """Keep scenes at or above the median in BOTH richness and entropy."""
    if not stats:
        raise ParameterError("empty stats list")
    med_n = _lower_median([s.n_classes for s in stats])
    med_h = _lower_median([s.entropy_bits for s in stats])
    return [s for s in stats if s.n_classes >= med_n and s.entropy_bits >= med_h]


def kmeans_histograms(stats: list[SceneStats], k_clusters: int, seed: int):
    """Lloyd's K-means on the label histograms.

    Initialization is greedy farthest-point seeding from one seeded uniform
    pick; assignment/selection ties break toward the lowest index, empty
    clusters are re-seeded with the point farthest from its centroid, and
    iteration stops at an assignment fixed point or 100 rounds.
    """
    n = len(stats)
    if k_clusters < 1:
        raise ParameterError("k_clusters must be >= 1")
    if n < k_clusters:
        raise ParameterError(f"{n} scenes cannot fill {k_clusters} clusters")
    x = np.stack([s.histogram for s in stats]).astype(np.float64)
    rng = np.random.default_rng(seed)

    centers = np.empty((k_clusters, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k_clusters):
        centers[j] = x[int(np.argmax(d2))]  # argmax takes the first maximum
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(100):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)  # first minimum = lowest cluster id
        grabbed = np.zeros(n, dtype=bool)
        for j in range(k_clusters):
            if not (new_assign == j).any():
                own = dist[np.arange(n), new_assign].copy()
                own[grabbed] = -np.inf
                taken = int(np.argmax(own))
                grabbed[taken] = True
                centers[j] = x[taken]
                new_assign[taken] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k_clusters):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return assign


def _minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def select_subset(
    stats: list[SceneStats],
    k_subset: int,
    k_clusters: int,
    gamma: float,
    seed: int,
) -> list[str]:
    """Stratified pick of k_subset scene ids from pre-filtered stats.

    Scores are min-max normalized entropy + gamma * normalized richness
    (constant columns normalize to zero). Each cluster contributes
    floor(k_subset/k_clusters) scenes, the first k_subset % k_clusters
    clusters one more; clusters short of their quota push the deficit to
    later clusters in index order, wrapping around once if needed. Within
    a cluster, scenes rank by descending score with scene_id tie-break.
    The input stats are annotated with cluster and score in place.
    """
    if len(stats) < k_subset:
        raise ParameterError(
            f"{len(stats)} scenes after filtering < requested subset {k_subset}"
        )
    clusters = kmeans_histograms(stats, k_clusters, seed)
    h_norm = _minmax([s.entropy_bits for s in stats])
    n_norm = _minmax([s.n_classes for s in stats])
    for i, s in enumerate(stats):
        s.cluster = int(clusters[i])
        s.score = float(h_norm[i] + gamma * n_norm[i])

    ranked = {
        j: sorted(
            (s for s in stats if s.cluster == j),
            key=lambda s: (-s.score, s.scene_id),
        )
        for j in range(k_clusters)
    }
    base = k_subset // k_clusters
    rem = k_subset % k_clusters
    take = [0] * k_clusters
    carry = 0
    for j in range(k_clusters):
        want = base + (1 if j < rem else 0) + carry
        take[j] = min(want, len(ranked[j]))
        short = want - take[j]
        if short:
            log.warning(
                "cluster %d short %d scene(s); deficit moved to later clusters",
                j, short,
            )
        carry = short
    while carry:  # wrap leftover deficit across clusters with spare scenes
        absorbed = False
        for j in range(k_clusters):
            spare = len(ranked[j]) - take[j]
            if spare > 0 and carry > 0:
                extra = min(spare, carry)
                take[j] += extra
                carry -= extra
                absorbed = True
        if not absorbed:
            break
    selected = []
    for j in range(k_clusters):
        selected.extend(s.scene_id for s in ranked[j][: take[j]])
    return selected
