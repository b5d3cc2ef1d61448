# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fern forward/backward loops.

Output buffers are allocated by the caller (``fernnet.kernels``); these
functions only fill them.  Responses ``c`` arrive precomputed.  Rows are
processed in order and lut gradients are accumulated row by row, so results
are deterministic.
"""
from cython cimport floating
from libc.math cimport sqrt, fabs
from libc.stdint cimport int64_t


def fern_forward(const floating[:, :, ::1] c, const floating[:, ::1] lut, int mode,
                 int64_t[:, ::1] idx, floating[:, ::1] w, floating[:, ::1] out):
    cdef Py_ssize_t n_rows = c.shape[0], n_ferns = c.shape[1], m = c.shape[2]
    cdef Py_ssize_t n_out = lut.shape[1]
    cdef Py_ssize_t u, k, j, ch
    cdef int64_t cell
    cdef floating v, acc, a, wk
    cdef floating root_m = sqrt(<double>m)
    cdef floating* orow
    cdef const floating* lrow
    with nogil:
        for u in range(n_rows):
            orow = &out[u, 0]
            for ch in range(n_out):
                orow[ch] = 0
            for k in range(n_ferns):
                cell = k
                acc = 0
                for j in range(m):
                    v = c[u, k, j]
                    cell = (cell << 1) | (v > 0)
                    if mode == 2:
                        acc = acc + (1 - fabs(v))
                    else:
                        a = fabs(v) - 1
                        acc = acc + a * a
                if mode == 0:
                    wk = sqrt(acc)
                elif mode == 1:
                    wk = 1 - sqrt(acc) / root_m
                else:
                    wk = 1 - acc / m
                idx[u, k] = cell
                w[u, k] = wk
                lrow = &lut[cell, 0]
                for ch in range(n_out):
                    orow[ch] += wk * lrow[ch]


def fern_backward(const floating[:, :, ::1] c, const int64_t[:, ::1] idx,
                  const floating[:, ::1] w, const floating[:, ::1] lut,
                  const floating[:, ::1] grad_out, const int64_t[:, ::1] dims, int mode,
                  floating[:, ::1] grad_lut, floating[:, ::1] grad_thr,
                  floating[:, ::1] grad_rows):
    cdef Py_ssize_t n_rows = c.shape[0], n_ferns = c.shape[1], m = c.shape[2]
    cdef Py_ssize_t n_out = lut.shape[1]
    cdef Py_ssize_t u, k, j, ch
    cdef int64_t cell
    cdef floating v, a, sg, dw, wk, dist, dc, gp
    cdef floating root_m = sqrt(<double>m)
    cdef const floating* grow
    cdef const floating* lrow
    cdef floating* glrow
    with nogil:
        for u in range(n_rows):
            grow = &grad_out[u, 0]
            for k in range(n_ferns):
                cell = idx[u, k]
                wk = w[u, k]
                lrow = &lut[cell, 0]
                glrow = &grad_lut[cell, 0]
                dw = 0
                for ch in range(n_out):
                    dw = dw + lrow[ch] * grow[ch]
                for ch in range(n_out):
                    glrow[ch] += wk * grow[ch]
                dist = 0
                if mode != 2:
                    for j in range(m):
                        a = fabs(c[u, k, j]) - 1
                        dist = dist + a * a
                    dist = sqrt(dist)
                for j in range(m):
                    v = c[u, k, j]
                    sg = (v > 0) - (v < 0)
                    if mode == 2:
                        dc = sg / m
                    elif dist > 0:
                        dc = (fabs(v) - 1) * sg / dist
                        if mode == 1:
                            dc = -dc / root_m
                    else:
                        dc = 0
                    gp = dw * dc * (1 - v * v)
                    grad_rows[u, dims[k, j]] = grad_rows[u, dims[k, j]] + gp
                    grad_thr[k, j] = grad_thr[k, j] - gp
