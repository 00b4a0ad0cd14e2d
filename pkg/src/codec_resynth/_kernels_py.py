"""Pure-numpy versions of the compiled kernels.

Summation order matches ``_kernels.pyx`` term for term, so results are
bit-identical whichever backend is active.
"""

import numpy as np

# rows per block; bounds the (rows x V) distance buffer
_BLOCK = 512


def nearest_code(x, codes):
    x = np.ascontiguousarray(x, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    if x.ndim != 2 or codes.ndim != 2:
        raise ValueError("nearest_code expects 2-D arrays")
    if codes.shape[1] != x.shape[1]:
        raise ValueError(
            f"dimension mismatch: data has d={x.shape[1]}, codes have d={codes.shape[1]}"
        )
    n, d = x.shape
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    codes_t = codes.T.copy()
    for start in range(0, n, _BLOCK):
        xb = x[start:start + _BLOCK]
        acc = np.zeros((xb.shape[0], codes.shape[0]))
        for k in range(d):
            diff = xb[:, k, None] - codes_t[k][None, :]
            acc += diff * diff
        best = np.argmin(acc, axis=1)
        idx[start:start + _BLOCK] = best
        dist[start:start + _BLOCK] = acc[np.arange(xb.shape[0]), best]
    return idx, dist


def cluster_sums(x, assign, num_clusters):
    x = np.ascontiguousarray(x, dtype=np.float64)
    assign = np.asarray(assign, dtype=np.int64)
    if assign.shape[0] != x.shape[0]:
        raise ValueError("assignment length does not match number of rows")
    if assign.size and (assign.min() < 0 or assign.max() >= num_clusters):
        raise IndexError("cluster index out of range")
    sums = np.zeros((num_clusters, x.shape[1]))
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=num_clusters).astype(np.int64)
    return sums, counts
