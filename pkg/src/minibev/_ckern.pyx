# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scatter-add kernels.

These are the hot non-BLAS inner loops of the stack: conv backward
(col2im), frustum-to-BEV splatting, bilinear-warp backward, and max-pool
backward all reduce to "sum rows of a value matrix into an output matrix
at precomputed row indices". Accumulation runs in input order, so results
are bit-identical to the pure-numpy fallback in minibev.kernels.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def scatter_rows(cnp.int64_t[::1] idx, cnp.float64_t[:, ::1] vals, Py_ssize_t n_rows):
    """out[idx[i], :] += vals[i, :] for every i; rows with idx < 0 are dropped."""
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t c = vals.shape[1]
    if vals.shape[0] != m:
        raise ValueError(f"scatter_rows: idx has {m} rows, vals has {vals.shape[0]}")
    out_arr = np.zeros((n_rows, c), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t t
    for i in range(m):
        t = idx[i]
        if t < 0:
            continue
        if t >= n_rows:
            raise IndexError(f"scatter_rows: index {t} out of range for {n_rows} rows")
        for j in range(c):
            out[t, j] += vals[i, j]
    return out_arr


def scatter_rows_weighted(cnp.int64_t[::1] idx, cnp.float64_t[:, ::1] vals,
                          cnp.float64_t[::1] w, Py_ssize_t n_rows):
    """out[idx[i], :] += w[i] * vals[i, :]; rows with idx < 0 are dropped."""
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t c = vals.shape[1]
    if vals.shape[0] != m or w.shape[0] != m:
        raise ValueError("scatter_rows_weighted: idx/vals/w length mismatch")
    out_arr = np.zeros((n_rows, c), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t t
    cdef cnp.float64_t wi
    for i in range(m):
        t = idx[i]
        if t < 0:
            continue
        if t >= n_rows:
            raise IndexError(f"scatter_rows_weighted: index {t} out of range for {n_rows} rows")
        wi = w[i]
        for j in range(c):
            out[t, j] += wi * vals[i, j]
    return out_arr
