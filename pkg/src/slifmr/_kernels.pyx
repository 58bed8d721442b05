# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sparse kernels. Mirrors ``slifmr.kernels._py_*`` exactly."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp

cnp.import_array()


def spmm(const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] cols,
         const floating[::1] weights, const floating[:, ::1] x):
    """out[r] = sum_e weights[e] * x[cols[e]] over the edges of row r."""
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t r, e, k, c
    cdef floating w
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_rows, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    for r in range(n_rows):
        for e in range(offsets[r], offsets[r + 1]):
            c = cols[e]
            w = weights[e]
            for k in range(d):
                out[r, k] += w * x[c, k]
    return out_arr


def edge_dot(const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] cols,
             const floating[:, ::1] a, const floating[:, ::1] b):
    """out[e] = <a[row(e)], b[cols[e]]> for every stored edge."""
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t d = a.shape[1]
    cdef Py_ssize_t r, e, k, c
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty(cols.shape[0], dtype=dtype)
    cdef floating[::1] out = out_arr
    for r in range(n_rows):
        for e in range(offsets[r], offsets[r + 1]):
            c = cols[e]
            acc = 0
            for k in range(d):
                acc = acc + a[r, k] * b[c, k]
            out[e] = acc
    return out_arr


def segment_softmax(const cnp.int64_t[::1] offsets, const floating[::1] scores):
    """Softmax over each contiguous segment [offsets[r], offsets[r+1])."""
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t r, e, lo, hi
    cdef floating m, total
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty(scores.shape[0], dtype=dtype)
    cdef floating[::1] out = out_arr
    for r in range(n_rows):
        lo = offsets[r]
        hi = offsets[r + 1]
        if lo == hi:
            continue
        m = scores[lo]
        for e in range(lo + 1, hi):
            if scores[e] > m:
                m = scores[e]
        total = 0
        for e in range(lo, hi):
            out[e] = exp(scores[e] - m)
            total = total + out[e]
        for e in range(lo, hi):
            out[e] = out[e] / total
    return out_arr


def segment_sum(const cnp.int64_t[::1] offsets, const floating[::1] values):
    """Per-segment sums; empty segments give 0."""
    cdef Py_ssize_t n_rows = offsets.shape[0] - 1
    cdef Py_ssize_t r, e
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros(n_rows, dtype=dtype)
    cdef floating[::1] out = out_arr
    for r in range(n_rows):
        acc = 0
        for e in range(offsets[r], offsets[r + 1]):
            acc = acc + values[e]
        out[r] = acc
    return out_arr
