# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for farthest point sampling and kNN selection.

Must stay bit-identical to r3d.kernels.fallback: distances accumulate in
float64 as dx*dx + dy*dy + dz*dz (left to right, no FMA; the build passes
-ffp-contract=off), ties break toward the lowest index, and selected points
are marked with a -1 sentinel distance.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def fps_indices(const float[:, ::1] pts, Py_ssize_t n, Py_ssize_t start):
    """Greedy max-min sampling of n indices from pts [N, 3], seeded at start."""
    cdef Py_ssize_t N = pts.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] sel = out
    dist = np.empty(N, dtype=np.float64)
    cdef double[::1] d = dist
    cdef Py_ssize_t i, t, last, best
    cdef double cx, cy, cz, dx, dy, dz, nd, bestd

    for i in range(N):
        d[i] = np.inf
    sel[0] = start
    d[start] = -1.0
    last = start
    for t in range(1, n):
        cx = <double> pts[last, 0]
        cy = <double> pts[last, 1]
        cz = <double> pts[last, 2]
        best = -1
        bestd = -2.0
        for i in range(N):
            if d[i] < 0.0:
                continue
            dx = <double> pts[i, 0] - cx
            dy = <double> pts[i, 1] - cy
            dz = <double> pts[i, 2] - cz
            nd = dx * dx + dy * dy + dz * dz
            if nd < d[i]:
                d[i] = nd
            if d[i] > bestd:
                bestd = d[i]
                best = i
        sel[t] = best
        d[best] = -1.0
        last = best
    return out


def knn_indices(const float[:, ::1] pts, const long long[::1] centers, Py_ssize_t k):
    """For each center index, the k nearest point indices sorted by (d2, index)."""
    cdef Py_ssize_t N = pts.shape[0]
    cdef Py_ssize_t C = centers.shape[0]
    out = np.empty((C, k), dtype=np.int64)
    cdef long long[:, ::1] res = out
    bd_arr = np.empty(k, dtype=np.float64)
    bi_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = bd_arr
    cdef long long[::1] bi = bi_arr
    cdef Py_ssize_t c, i, j, count, pos
    cdef double cx, cy, cz, dx, dy, dz, nd

    for c in range(C):
        cx = <double> pts[centers[c], 0]
        cy = <double> pts[centers[c], 1]
        cz = <double> pts[centers[c], 2]
        count = 0
        for i in range(N):
            dx = <double> pts[i, 0] - cx
            dy = <double> pts[i, 1] - cy
            dz = <double> pts[i, 2] - cz
            nd = dx * dx + dy * dy + dz * dz
            if count == k:
                # reject unless strictly better than the current worst
                if nd > bd[k - 1] or (nd == bd[k - 1] and i > bi[k - 1]):
                    continue
                count = k - 1
            # insertion sort from the back, ordering by (distance, index)
            pos = count
            while pos > 0 and (bd[pos - 1] > nd or (bd[pos - 1] == nd and bi[pos - 1] > i)):
                bd[pos] = bd[pos - 1]
                bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = nd
            bi[pos] = i
            count += 1
        for j in range(k):
            res[c, j] = bi[j]
    return out
