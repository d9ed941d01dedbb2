# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``tagcorr._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()


def coincidence_counts(const int64_t[::1] a, const int64_t[::1] b,
                       int64_t lo, int64_t bin_width, Py_ssize_t nbins):
    """Count pairs with ``lo <= b[j] - a[i] < lo + nbins * bin_width``."""
    cdef cnp.ndarray[int64_t, ndim=1] out = np.zeros(nbins, dtype=np.int64)
    cdef int64_t[::1] counts = out
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t i, j, j0 = 0
    cdef int64_t hi = lo + nbins * bin_width
    cdef int64_t ai, start, stop
    with nogil:
        for i in range(na):
            ai = a[i]
            start = ai + lo
            stop = ai + hi
            while j0 < nb and b[j0] < start:
                j0 += 1
            j = j0
            while j < nb and b[j] < stop:
                counts[(b[j] - start) // bin_width] += 1
                j += 1
    return out


def dead_time_mask(const int64_t[::1] t, int64_t dead_time):
    """Non-paralyzable dead time: keep events at least ``dead_time`` after the last kept one."""
    cdef Py_ssize_t n = t.shape[0], i
    cdef cnp.ndarray[uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef uint8_t[::1] keep = out
    cdef int64_t last
    if n == 0:
        return out.view(np.bool_)
    with nogil:
        keep[0] = 1
        last = t[0]
        for i in range(1, n):
            if t[i] - last >= dead_time:
                keep[i] = 1
                last = t[i]
    return out.view(np.bool_)
