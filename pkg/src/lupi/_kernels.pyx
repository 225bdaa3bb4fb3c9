# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must agree bit-for-bit with ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def dropout_forward(const double[::1] h, const double[::1] sigma, const double[::1] eps):
    cdef Py_ssize_t i, n = h.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = h[i] * (1.0 + sqrt(sigma[i]) * eps[i])
    return out


def dropout_backward(const double[::1] g, const double[::1] h,
                     const double[::1] sigma, const double[::1] eps):
    cdef Py_ssize_t i, n = h.shape[0]
    cdef double sd
    dh_arr = np.empty(n, dtype=np.float64)
    ds_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] dh = dh_arr
    cdef double[::1] ds = ds_arr
    with nogil:
        for i in range(n):
            sd = sqrt(sigma[i])
            dh[i] = g[i] * (1.0 + sd * eps[i])
            if sd > 0.0:
                ds[i] = g[i] * h[i] * eps[i] * (0.5 / sd)
            else:
                ds[i] = 0.0
    return dh_arr, ds_arr


def enumerate_paths(Py_ssize_t n_inputs, Py_ssize_t total,
                    const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indptr_off,
                    const cnp.int64_t[::1] dst, const double[::1] weight,
                    const cnp.uint8_t[::1] gate):
    """Depth-first walk over a layered CSR edge list.

    Stage ``s`` owns ``indptr[indptr_off[s]:indptr_off[s+1]]``; edge indices are
    global. Paths are emitted in lexicographic (input, edge, edge, ...) order.
    """
    cdef Py_ssize_t n_stages = indptr_off.shape[0] - 1
    cdef Py_ssize_t i, depth, k = 0
    cdef cnp.int64_t e, unit
    src_arr = np.empty(total, dtype=np.int64)
    end_arr = np.empty(total, dtype=np.int64)
    w_arr = np.empty(total, dtype=np.float64)
    g_arr = np.empty(total, dtype=np.uint8)
    cdef cnp.int64_t[::1] src = src_arr
    cdef cnp.int64_t[::1] end = end_arr
    cdef double[::1] wout = w_arr
    cdef cnp.uint8_t[::1] gout = g_arr
    if n_stages == 0:
        for i in range(n_inputs):
            src[i] = i
            end[i] = i
            wout[i] = 1.0
            gout[i] = 1
        return src_arr, end_arr, w_arr, g_arr

    cursor_arr = np.zeros(n_stages, dtype=np.int64)
    stop_arr = np.zeros(n_stages, dtype=np.int64)
    wacc_arr = np.ones(n_stages + 1, dtype=np.float64)
    gacc_arr = np.ones(n_stages + 1, dtype=np.uint8)
    cdef cnp.int64_t[::1] cursor = cursor_arr
    cdef cnp.int64_t[::1] stop = stop_arr
    cdef double[::1] wacc = wacc_arr
    cdef cnp.uint8_t[::1] gacc = gacc_arr

    with nogil:
        for i in range(n_inputs):
            depth = 0
            cursor[0] = indptr[indptr_off[0] + i]
            stop[0] = indptr[indptr_off[0] + i + 1]
            while depth >= 0:
                if cursor[depth] >= stop[depth]:
                    depth -= 1
                    continue
                e = cursor[depth]
                cursor[depth] += 1
                wacc[depth + 1] = wacc[depth] * weight[e]
                gacc[depth + 1] = gacc[depth] & gate[e]
                unit = dst[e]
                if depth + 1 == n_stages:
                    src[k] = i
                    end[k] = unit
                    wout[k] = wacc[depth + 1]
                    gout[k] = gacc[depth + 1]
                    k += 1
                else:
                    depth += 1
                    cursor[depth] = indptr[indptr_off[depth] + unit]
                    stop[depth] = indptr[indptr_off[depth] + unit + 1]
    return src_arr, end_arr, w_arr, g_arr
