# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Loop orders follow the numpy reference so floating-point sums are
accumulated in the same sequence and results agree bit for bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n * ho * wo, c * kh * kw))
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, oi, oj, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    row = (b * ho + oi) * wo + oj
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = xp[b, ch, oi * stride + i, oj * stride + j]
                                col = col + 1
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oi, oj, ch, i, j, row, col
    # (i, j) outermost matches the reference's slice-add order per input cell
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for oi in range(ho):
                        for oj in range(wo):
                            row = (b * ho + oi) * wo + oj
                            for ch in range(c):
                                col = (ch * kh + i) * kw + j
                                dx[b, ch, oi * stride + i, oj * stride + j] += cols[row, col]
    return out


def maxpool_forward(const double[:, :, :, :] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - window + stride - 1) // stride + 1
    cdef Py_ssize_t wo = (w - window + stride - 1) // stride + 1
    out_arr = np.empty((n, c, ho, wo))
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oi, oj, i, j, r, q, best_idx
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        best = -1.0 / 0.0
                        best_idx = -1
                        for i in range(window):
                            r = oi * stride + i
                            if r >= h:
                                break
                            for j in range(window):
                                q = oj * stride + j
                                if q >= w:
                                    break
                                v = x[b, ch, r, q]
                                if best_idx < 0 or v > best:
                                    best = v
                                    best_idx = r * w + q
                        out[b, ch, oi, oj] = best
                        idx[b, ch, oi, oj] = best_idx
    return out_arr, idx_arr


def maxpool_backward(const double[:, :, :, :] dout, const cnp.int64_t[:, :, :, :] argidx,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    out = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oi, oj, k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        k = argidx[b, ch, oi, oj]
                        dx[b, ch, k // w, k % w] += dout[b, ch, oi, oj]
    return out
