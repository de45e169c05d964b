"""Numpy implementation of the hot kernels.

Mirrors the compiled module ``fednn._ckernels``: same signatures, same
float64 arithmetic with direct squared-difference accumulation, so the
two backends agree on exact-tie inputs and differ only by float
summation order elsewhere.
"""

import numpy as np

# elements per (block, k, d) difference tensor; keeps peak memory ~32 MB
_BLOCK_ELEMS = 4_000_000


def nearest_centroid(points, centroids):
    """Nearest-centroid index and squared L2 distance per point.

    ``points`` is (n, d) float64, ``centroids`` (k, d) float64.  Ties go
    to the lowest centroid index.  Returns (idx int64 (n,), d2 float64 (n,)).
    """
    n, d = points.shape
    k = centroids.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    block = max(1, _BLOCK_ELEMS // max(1, k * d))
    for start in range(0, n, block):
        chunk = points[start : start + block]
        diff = chunk[:, None, :] - centroids[None, :, :]
        d2 = np.einsum("bkd,bkd->bk", diff, diff)
        best = np.argmin(d2, axis=1)
        idx[start : start + block] = best
        dist[start : start + block] = d2[np.arange(chunk.shape[0]), best]
    return idx, dist


def adc_scan(lut, codes):
    """Distance of each code row under a per-query lookup table.

    ``lut`` is (m, c) float64, ``codes`` (n, m) uint16.  Returns the
    (n,) float64 sums ``lut[j, codes[i, j]]`` over j.
    """
    m = lut.shape[0]
    return lut[np.arange(m), codes].sum(axis=1)
