# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: exact k-NN selection and pooling sweeps.

Matches the semantics of ``_fallback`` exactly: neighbours ordered by
(distance, index), pooling accumulates over neighbours in storage order.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _worse(double da, Py_ssize_t ia, double db, Py_ssize_t ib) nogil:
    # is (da, ia) further in (distance, index) order than (db, ib)?
    if da != db:
        return da > db
    return ia > ib


def knn_search(const double[:, ::1] points, const double[:, ::1] queries, Py_ssize_t k):
    """Exact k nearest neighbours; rows sorted by (distance, index)."""
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t q = queries.shape[0]
    idx_arr = np.empty((q, k), dtype=np.int64)
    dist_arr = np.empty((q, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr

    # max-heap of the k best candidates, worst at the root
    heap_d_arr = np.empty(k, dtype=np.float64)
    heap_i_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] heap_d = heap_d_arr
    cdef long long[::1] heap_i = heap_i_arr

    cdef Py_ssize_t iq, ip, size, pos, child, parent, out
    cdef double qx, qy, qz, dx, dy, dz, d2, td
    cdef long long ti

    with nogil:
        for iq in range(q):
            qx = queries[iq, 0]
            qy = queries[iq, 1]
            qz = queries[iq, 2]
            size = 0
            for ip in range(m):
                dx = points[ip, 0] - qx
                dy = points[ip, 1] - qy
                dz = points[ip, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if size < k:
                    # push
                    pos = size
                    heap_d[pos] = d2
                    heap_i[pos] = ip
                    size += 1
                    while pos > 0:
                        parent = (pos - 1) >> 1
                        if _worse(heap_d[pos], heap_i[pos], heap_d[parent], heap_i[parent]):
                            td = heap_d[pos]; heap_d[pos] = heap_d[parent]; heap_d[parent] = td
                            ti = heap_i[pos]; heap_i[pos] = heap_i[parent]; heap_i[parent] = ti
                            pos = parent
                        else:
                            break
                elif _worse(heap_d[0], heap_i[0], d2, ip):
                    # replace root and sift down
                    heap_d[0] = d2
                    heap_i[0] = ip
                    pos = 0
                    while True:
                        child = 2 * pos + 1
                        if child >= k:
                            break
                        if child + 1 < k and _worse(heap_d[child + 1], heap_i[child + 1],
                                                    heap_d[child], heap_i[child]):
                            child += 1
                        if _worse(heap_d[child], heap_i[child], heap_d[pos], heap_i[pos]):
                            td = heap_d[pos]; heap_d[pos] = heap_d[child]; heap_d[child] = td
                            ti = heap_i[pos]; heap_i[pos] = heap_i[child]; heap_i[child] = ti
                            pos = child
                        else:
                            break
            # heap-sort: repeatedly move the current worst to the tail
            out = size - 1
            while out > 0:
                td = heap_d[0]; heap_d[0] = heap_d[out]; heap_d[out] = td
                ti = heap_i[0]; heap_i[0] = heap_i[out]; heap_i[out] = ti
                pos = 0
                while True:
                    child = 2 * pos + 1
                    if child >= out:
                        break
                    if child + 1 < out and _worse(heap_d[child + 1], heap_i[child + 1],
                                                  heap_d[child], heap_i[child]):
                        child += 1
                    if _worse(heap_d[child], heap_i[child], heap_d[pos], heap_i[pos]):
                        td = heap_d[pos]; heap_d[pos] = heap_d[child]; heap_d[child] = td
                        ti = heap_i[pos]; heap_i[pos] = heap_i[child]; heap_i[child] = ti
                        pos = child
                    else:
                        break
                out -= 1
            for pos in range(size):
                idx[iq, pos] = heap_i[pos]
                dist[iq, pos] = sqrt(heap_d[pos])
    return idx_arr, dist_arr


def pool_sweeps(const long long[:, ::1] neighbor_idx, const double[:, ::1] weights,
                const double[:, ::1] feats, Py_ssize_t t):
    """Jacobi sweeps of out[v] = sum_k w[v,k] * feats[nbr[v,k]]."""
    cdef Py_ssize_t v = feats.shape[0]
    cdef Py_ssize_t d = feats.shape[1]
    cdef Py_ssize_t kn = neighbor_idx.shape[1]
    cur_arr = np.array(feats, dtype=np.float64, copy=True)
    nxt_arr = np.empty_like(cur_arr)
    cdef double[:, ::1] cur = cur_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[:, ::1] tmp
    cdef Py_ssize_t it, iv, ik, jd
    cdef double w
    cdef long long j

    with nogil:
        for it in range(t):
            for iv in range(v):
                for jd in range(d):
                    nxt[iv, jd] = 0.0
                for ik in range(kn):
                    j = neighbor_idx[iv, ik]
                    w = weights[iv, ik]
                    for jd in range(d):
                        nxt[iv, jd] += w * cur[j, jd]
            tmp = cur
            cur = nxt
            nxt = tmp
    if t % 2 == 0:
        return cur_arr
    return nxt_arr
