"""Kernel backend selection.

The compiled Cython core is used when importable; otherwise (or when the
environment variable POINTPURIFY_PURE=1 is set) the pure-numpy fallback is
selected. Both backends implement the same contracts; ``BACKEND`` records
which one is active. `benchmarks/bench_kernels.py` compares their speed.
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("POINTPURIFY_PURE") == "1":
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _core as _impl

        BACKEND = "native"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "fallback"


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def knn_search(points, queries, k):
    """Exact k-NN with (distance, index) ordering; k is clamped to len(points)."""
    points = _as_f64(points)
    queries = _as_f64(queries)
    k = min(int(k), points.shape[0])
    return _impl.knn_search(points, queries, k)


def pool_sweeps(neighbor_idx, weights, feats, t):
    """t Jacobi sweeps of row-stochastic neighbourhood averaging."""
    neighbor_idx = np.ascontiguousarray(neighbor_idx, dtype=np.int64)
    weights = _as_f64(weights)
    feats = _as_f64(feats)
    return _impl.pool_sweeps(neighbor_idx, weights, feats, int(t))
