"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when POINTPURIFY_PURE=1.
Semantics are identical to ``_core``: exact neighbours with deterministic
(distance, index) ordering, and Jacobi-style pooling sweeps.
"""

import numpy as np

_QUERY_CHUNK = 512
_ROW_CHUNK = 1024


def knn_search(points, queries, k):
    """Exact k nearest neighbours of each query among ``points``.

    Returns (indices, distances), each of shape (Q, k), rows sorted by
    ascending distance with ties broken by ascending point index.
    ``k`` must already be clamped to len(points) by the caller.
    """
    m = points.shape[0]
    q = queries.shape[0]
    idx_out = np.empty((q, k), dtype=np.int64)
    dist_out = np.empty((q, k), dtype=np.float64)
    for start in range(0, q, _QUERY_CHUNK):
        stop = min(start + _QUERY_CHUNK, q)
        diff = queries[start:stop, None, :] - points[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        # stable sort on distance keeps equal distances in index order
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx_out[start:stop] = order
        dist_out[start:stop] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx_out, dist_out


def pool_sweeps(neighbor_idx, weights, feats, t):
    """Apply ``t`` sweeps of row-stochastic neighbourhood averaging.

    feats is (V, D); neighbor_idx/weights are (V, K). Each sweep computes
    out[v] = sum_k weights[v, k] * feats[neighbor_idx[v, k]] from the
    previous iterate only (Jacobi, never in place).
    """
    cur = np.array(feats, dtype=np.float64, copy=True)
    v = cur.shape[0]
    for _ in range(t):
        nxt = np.empty_like(cur)
        for start in range(0, v, _ROW_CHUNK):
            stop = min(start + _ROW_CHUNK, v)
            gathered = cur[neighbor_idx[start:stop]]
            nxt[start:stop] = np.einsum(
                "vk,vkd->vd", weights[start:stop], gathered
            )
        cur = nxt
    return cur
