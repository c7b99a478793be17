# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: patch extraction for convolutions and scatter-add."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride,
           int ho, int wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t ncol = C * kh * kw
    out_arr = np.empty((B * ho * wo, ncol), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, oi, oj, di, dj, row, col, i0, j0
    with nogil:
        for b in range(B):
            for oi in range(ho):
                i0 = oi * stride
                for oj in range(wo):
                    j0 = oj * stride
                    row = (b * ho + oi) * wo + oj
                    col = 0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                out[row, col] = xp[b, c, i0 + di, j0 + dj]
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C,
           Py_ssize_t hp, Py_ssize_t wp, int kh, int kw, int stride,
           int ho, int wo):
    out_arr = np.zeros((B, C, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oi, oj, di, dj, row, col, i0, j0
    with nogil:
        for b in range(B):
            for oi in range(ho):
                i0 = oi * stride
                for oj in range(wo):
                    j0 = oj * stride
                    row = (b * ho + oi) * wo + oj
                    col = 0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                out[b, c, i0 + di, j0 + dj] += cols[row, col]
                                col += 1
    return out_arr


def scatter_add(const cnp.int64_t[::1] index, const double[::1] weights,
                Py_ssize_t size):
    out_arr = np.zeros(size, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t k, n = index.shape[0]
    with nogil:
        for k in range(n):
            out[index[k]] += weights[k]
    return out_arr
