# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: nearest-centroid assignment and ADC code scans.

Same contracts as fednn._pykernels; see that module for documentation.
"""

from libc.math cimport INFINITY

import numpy as np


def nearest_centroid(double[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t k = centroids.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, c, j, best_c
    cdef double best, acc, diff
    with nogil:
        for i in range(n):
            best = INFINITY
            best_c = 0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = points[i, j] - centroids[c, j]
                    acc += diff * diff
                if acc < best:  # strict: ties keep the lowest index
                    best = acc
                    best_c = c
            idx[i] = best_c
            dist[i] = best
    return idx_arr, dist_arr


def adc_scan(double[:, ::1] lut, unsigned short[:, ::1] codes):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t m = codes.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc += lut[j, codes[i, j]]
            out[i] = acc
    return out_arr
