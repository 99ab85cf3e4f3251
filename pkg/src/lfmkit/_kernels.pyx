# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every routine mirrors the accumulation order of the matching function in
``_fallback.py`` so both backends agree bit for bit on the convolutions.
Rows are distributed over OpenMP threads; each output element is owned by a
single thread, so results do not depend on the thread count.
"""
import numpy as np
from cython.parallel import prange
from libc.math cimport floor, sqrt


def sv_conv_forward(const double[:, ::1] x, const int[:, ::1] cls,
                    const double[:, :, ::1] kernels, double[:, ::1] out,
                    int nthreads=1):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1]
    cdef Py_ssize_t K = kernels.shape[1], R = (K - 1) // 2
    cdef Py_ssize_t i, j, a, b, qi, qj
    cdef double acc
    for i in prange(H, nogil=True, num_threads=nthreads, schedule="static"):
        for j in range(W):
            acc = 0.0
            for a in range(K):
                qi = i - a + R
                if qi < 0 or qi >= H:
                    continue
                for b in range(K):
                    qj = j - b + R
                    if qj < 0 or qj >= W:
                        continue
                    acc = acc + x[qi, qj] * kernels[cls[qi, qj], a, b]
            out[i, j] = acc


def sv_conv_adjoint(const double[:, ::1] y, const int[:, ::1] cls,
                    const double[:, :, ::1] kernels, double[:, ::1] out,
                    int nthreads=1):
    cdef Py_ssize_t H = y.shape[0], W = y.shape[1]
    cdef Py_ssize_t K = kernels.shape[1], R = (K - 1) // 2
    cdef Py_ssize_t i, j, a, b, pi, pj
    cdef int c
    cdef double acc
    for i in prange(H, nogil=True, num_threads=nthreads, schedule="static"):
        for j in range(W):
            c = cls[i, j]
            acc = 0.0
            for a in range(K):
                pi = i + a - R
                if pi < 0 or pi >= H:
                    continue
                for b in range(K):
                    pj = j + b - R
                    if pj < 0 or pj >= W:
                        continue
                    acc = acc + y[pi, pj] * kernels[c, a, b]
            out[i, j] = acc


def bin_points(const double[::1] gx, const double[::1] gy, double weight,
               double[:, ::1] out):
    """Nearest-bin accumulation of points given in pixel coordinates.

    Sequential on purpose: the summation order per bin is the input order.
    Returns the number of points that fell outside ``out``.
    """
    cdef Py_ssize_t n = gx.shape[0], k, ix, iy
    cdef Py_ssize_t H = out.shape[0], W = out.shape[1]
    cdef Py_ssize_t dropped = 0
    for k in range(n):
        ix = <Py_ssize_t> floor(gx[k] + 0.5)
        iy = <Py_ssize_t> floor(gy[k] + 0.5)
        if ix < 0 or ix >= H or iy < 0 or iy >= W:
            dropped += 1
            continue
        out[ix, iy] += weight
    return dropped


def ncc_valid(const double[:, ::1] template, const double[:, ::1] ref,
              double[:, ::1] out, int nthreads=1):
    cdef Py_ssize_t h = template.shape[0], w = template.shape[1]
    cdef Py_ssize_t H = ref.shape[0], W = ref.shape[1]
    cdef Py_ssize_t oh = H - h + 1, ow = W - w + 1
    cdef Py_ssize_t r, c, u, v
    cdef double n = <double>(h * w)
    cdef double tmean = 0.0, tvar = 0.0, d
    for u in range(h):
        for v in range(w):
            tmean += template[u, v]
    tmean /= n
    for u in range(h):
        for v in range(w):
            d = template[u, v] - tmean
            tvar += d * d
    cdef double wmean, wvar, cross, e
    for r in prange(oh, nogil=True, num_threads=nthreads, schedule="static"):
        for c in range(ow):
            wmean = 0.0
            for u in range(h):
                for v in range(w):
                    wmean = wmean + ref[r + u, c + v]
            wmean = wmean / n
            wvar = 0.0
            cross = 0.0
            for u in range(h):
                for v in range(w):
                    e = ref[r + u, c + v] - wmean
                    wvar = wvar + e * e
                    cross = cross + e * (template[u, v] - tmean)
            if wvar <= 0.0 or tvar <= 0.0:
                out[r, c] = 0.0
            else:
                e = cross / sqrt(wvar * tvar)
                if e > 1.0:
                    e = 1.0
                elif e < -1.0:
                    e = -1.0
                out[r, c] = e
