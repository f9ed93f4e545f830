# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Max-Min kernels; same contract as ``_maxmin_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _before_top(double a, Py_ssize_t ia, double b, Py_ssize_t ib) nogil:
    return a > b or (a == b and ia < ib)


cdef inline bint _before_bottom(double a, Py_ssize_t ia, double b, Py_ssize_t ib) nogil:
    return a < b or (a == b and ia < ib)


def maxmin_select(values, Py_ssize_t s):
    cdef const double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t batch = v.shape[0], n = v.shape[1], c = v.shape[2]
    out_arr = np.empty((batch, 2 * s, c), dtype=np.float64)
    idx_arr = np.empty((batch, 2 * s, c), dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, j, i, k, fill_top, fill_bot
    cdef double x
    with nogil:
        for b in range(batch):
            for j in range(c):
                fill_top = 0
                fill_bot = 0
                for i in range(n):
                    x = v[b, i, j]
                    # insertion into the sorted top block
                    if fill_top < s or _before_top(x, i, out[b, s - 1, j], idx[b, s - 1, j]):
                        k = fill_top if fill_top < s else s - 1
                        while k > 0 and _before_top(x, i, out[b, k - 1, j], idx[b, k - 1, j]):
                            out[b, k, j] = out[b, k - 1, j]
                            idx[b, k, j] = idx[b, k - 1, j]
                            k -= 1
                        out[b, k, j] = x
                        idx[b, k, j] = i
                        if fill_top < s:
                            fill_top += 1
                    # insertion into the sorted bottom block
                    if fill_bot < s or _before_bottom(x, i, out[b, 2 * s - 1, j], idx[b, 2 * s - 1, j]):
                        k = fill_bot if fill_bot < s else s - 1
                        while k > 0 and _before_bottom(x, i, out[b, s + k - 1, j], idx[b, s + k - 1, j]):
                            out[b, s + k, j] = out[b, s + k - 1, j]
                            idx[b, s + k, j] = idx[b, s + k - 1, j]
                            k -= 1
                        out[b, s + k, j] = x
                        idx[b, s + k, j] = i
                        if fill_bot < s:
                            fill_bot += 1
    return out_arr, idx_arr


def maxmin_scatter(grad_selected, index, Py_ssize_t n):
    cdef const double[:, :, ::1] g = np.ascontiguousarray(grad_selected, dtype=np.float64)
    cdef const cnp.int64_t[:, :, ::1] idx = np.ascontiguousarray(index, dtype=np.int64)
    cdef Py_ssize_t batch = g.shape[0], rows = g.shape[1], c = g.shape[2]
    out_arr = np.zeros((batch, n, c), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, r, j
    with nogil:
        for b in range(batch):
            for r in range(rows):
                for j in range(c):
                    out[b, idx[b, r, j], j] += g[b, r, j]
    return out_arr
