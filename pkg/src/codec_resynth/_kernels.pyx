# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled nearest-code search and cluster accumulation.

Both kernels accumulate squared differences in dimension order, exactly as
the numpy fallback in ``_kernels_py`` does, so the two backends agree bit for
bit. The nearest-code scan abandons a candidate as soon as its partial sum
reaches the best full distance seen so far; since partial sums are
non-decreasing this never changes the winner.
"""

import numpy as np

from libc.math cimport INFINITY


def nearest_code(const double[:, ::1] x, const double[:, ::1] codes):
    """Index and squared distance of the nearest row of ``codes`` for each row of ``x``.

    Ties go to the lowest index.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t v = codes.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    if codes.shape[1] != d:
        raise ValueError(f"dimension mismatch: data has d={d}, codes have d={codes.shape[1]}")
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, k
    cdef double best, s, diff
    cdef long long best_j
    with nogil:
        for i in range(n):
            best = INFINITY
            best_j = 0
            for j in range(v):
                s = 0.0
                for k in range(d):
                    diff = x[i, k] - codes[j, k]
                    s = s + diff * diff
                    if s >= best:
                        break
                if s < best:
                    best = s
                    best_j = j
            idx[i] = best_j
            dist[i] = best
    return idx_arr, dist_arr


def cluster_sums(const double[:, ::1] x, const long long[::1] assign, Py_ssize_t num_clusters):
    """Per-cluster coordinate sums and member counts, accumulated in row order."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    if assign.shape[0] != n:
        raise ValueError("assignment length does not match number of rows")
    sums_arr = np.zeros((num_clusters, d), dtype=np.float64)
    counts_arr = np.zeros(num_clusters, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, k
    cdef long long c
    for i in range(n):
        c = assign[i]
        if c < 0 or c >= num_clusters:
            raise IndexError(f"cluster index {c} out of range")
        counts[c] += 1
        for k in range(d):
            sums[c, k] = sums[c, k] + x[i, k]
    return sums_arr, counts_arr
