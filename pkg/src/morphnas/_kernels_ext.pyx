# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv/pool kernels; loop orders mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(float[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n * ho * wo, c * kh * kw), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef Py_ssize_t b, y, x, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[row, col] = xp[b, ch, y0 + i, x0 + j]
                                col += 1
    return out


def col2im(float[:, ::1] cols, shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, x, ch, i, j, col, base
    cdef Py_ssize_t kk = kh * kw
    # (i, j) outermost per element so accumulation order matches the numpy path
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = ch * kk + i * kw + j
                        for y in range(ho):
                            base = (b * ho + y) * wo
                            for x in range(wo):
                                o[b, ch, y * stride + i, x * stride + j] += cols[base + x, col]
    return out


def maxpool_forward(float[:, :, :, ::1] x, int pool):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // pool, wo = x.shape[3] // pool
    out = np.empty((n, c, ho, wo), dtype=np.float32)
    arg = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef float[:, :, :, ::1] o = out
    cdef int[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ch, y, xx, i, j
    cdef float best, v
    cdef int besti, k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[b, ch, y * pool, xx * pool]
                        besti = 0
                        k = 0
                        for i in range(pool):
                            for j in range(pool):
                                v = x[b, ch, y * pool + i, xx * pool + j]
                                if v > best:
                                    best = v
                                    besti = k
                                k += 1
                        o[b, ch, y, xx] = best
                        a[b, ch, y, xx] = besti
    return out, arg


def maxpool_backward(float[:, :, :, ::1] dout, int[:, :, :, ::1] arg, shape, int pool):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dx = np.zeros(tuple(shape), dtype=np.float32)
    cdef float[:, :, :, ::1] d = dx
    cdef Py_ssize_t b, ch, y, xx
    cdef int k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        k = arg[b, ch, y, xx]
                        d[b, ch, y * pool + k // pool, xx * pool + k % pool] = dout[b, ch, y, xx]
    return dx
