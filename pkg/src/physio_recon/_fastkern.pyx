# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: window gather/scatter and sliding-window statistics.

Accumulation order matches the numpy fallbacks in ``kernels.py`` exactly
(ascending window index, then ascending in-window position), so both backends
produce bitwise-identical sums.
"""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused real:
    float
    double


from libc.string cimport memcpy


def gather_windows(real[:, ::1] x, long[::1] starts, long window, real[:, :, ::1] out):
    """out[w, j, :] = x[starts[w] + j, :]"""
    cdef Py_ssize_t nw = starts.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t block = window * d * sizeof(real)
    cdef Py_ssize_t w
    with nogil:
        for w in range(nw):
            memcpy(&out[w, 0, 0], &x[starts[w], 0], block)


def scatter_add_windows(real[:, :, ::1] feats, long[::1] starts, real[:, ::1] out):
    """out[starts[w] + j, :] += feats[w, j, :], windows visited in order."""
    cdef Py_ssize_t nw = feats.shape[0]
    cdef Py_ssize_t window = feats.shape[1]
    cdef Py_ssize_t d = feats.shape[2]
    cdef Py_ssize_t w, j, c, s
    cdef real* dst
    cdef const real* src
    with nogil:
        for w in range(nw):
            s = starts[w]
            for j in range(window):
                dst = &out[s + j, 0]
                src = &feats[w, j, 0]
                for c in range(d):
                    dst[c] += src[c]


def windowed_std(double[::1] values, long[::1] starts, long[::1] stops, double[::1] out):
    """Population standard deviation of values[starts[k]:stops[k]] per window.

    Two-pass mean/variance per window; windows with fewer than two samples are
    rejected by the caller beforehand.
    """
    cdef Py_ssize_t k, i
    cdef Py_ssize_t nwin = starts.shape[0]
    cdef double acc, mean, dev
    cdef long n
    for k in range(nwin):
        n = stops[k] - starts[k]
        acc = 0.0
        for i in range(starts[k], stops[k]):
            acc += values[i]
        mean = acc / n
        acc = 0.0
        for i in range(starts[k], stops[k]):
            dev = values[i] - mean
            acc += dev * dev
        out[k] = (acc / n) ** 0.5
