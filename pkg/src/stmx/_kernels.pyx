# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled depthwise convolution kernels.

Same contracts and accumulation order as ``_kernels_py``; built with
floating-point contraction disabled so results match the NumPy backend
bit-for-bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

NAME = "cython"


def dwconv2d_valid(const float[:, :, :, ::1] xpad, kernel, const float[::1] bias):
    cdef Py_ssize_t c = kernel.shape[0]
    cdef Py_ssize_t kh = kernel.shape[1]
    cdef Py_ssize_t kw = kernel.shape[2]
    cdef Py_ssize_t t = xpad.shape[0]
    cdef Py_ssize_t h = xpad.shape[1] - kh + 1
    cdef Py_ssize_t w = xpad.shape[2] - kw + 1
    cdef const float[:, :, ::1] taps = np.ascontiguousarray(
        np.asarray(kernel, dtype=np.float32).transpose(1, 2, 0))
    out_arr = np.empty((t, h, w, c), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ti, i, j, a, b, ch
    cdef float *o
    cdef const float *src
    cdef const float *k

    with nogil:
        for ti in range(t):
            for i in range(h):
                for j in range(w):
                    o = &out[ti, i, j, 0]
                    for ch in range(c):
                        o[ch] = bias[ch]
                    for a in range(kh):
                        for b in range(kw):
                            src = &xpad[ti, i + a, j + b, 0]
                            k = &taps[a, b, 0]
                            for ch in range(c):
                                o[ch] = o[ch] + k[ch] * src[ch]
    return out_arr


def dwconv1d_valid(const float[:, :, ::1] lines, kernel, const float[::1] bias):
    cdef Py_ssize_t c = kernel.shape[0]
    cdef Py_ssize_t kt = kernel.shape[1]
    cdef Py_ssize_t m = lines.shape[0]
    cdef Py_ssize_t t = lines.shape[1] - kt + 1
    cdef const float[:, ::1] taps = np.ascontiguousarray(
        np.asarray(kernel, dtype=np.float32).T)
    out_arr = np.empty((m, t, c), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t mi, ti, a, ch
    cdef float *o
    cdef const float *src
    cdef const float *k

    with nogil:
        for mi in range(m):
            for ti in range(t):
                o = &out[mi, ti, 0]
                for ch in range(c):
                    o[ch] = bias[ch]
                for a in range(kt):
                    src = &lines[mi, ti + a, 0]
                    k = &taps[a, 0]
                    for ch in range(c):
                        o[ch] = o[ch] + k[ch] * src[ch]
    return out_arr
