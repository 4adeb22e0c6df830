"""Compiled correlation-search kernel.

BLAS gemm on entry chunks with the per-probe argmax fused into the
same pass, so the full N x B score matrix is never materialized.
"""

import numpy as np

from scipy.linalg.cython_blas cimport sgemm, dgemm

ctypedef fused floating:
    float
    double

DEF ENTRY_CHUNK = 4096


def match_argmax(floating[:, ::1] dict_mat, floating[:, ::1] probes,
                 long long[::1] out_idx, double[::1] out_score):
    cdef int n = <int> dict_mat.shape[0]
    cdef int d = <int> dict_mat.shape[1]
    cdef int b = <int> probes.shape[0]
    cdef int start, rows, r, j
    cdef floating one = 1.0
    cdef floating zero = 0.0
    cdef char ct = b'T'
    cdef char cn = b'N'
    cdef double v

    if floating is float:
        sbuf_arr = np.empty(ENTRY_CHUNK * b, dtype=np.float32)
    else:
        sbuf_arr = np.empty(ENTRY_CHUNK * b, dtype=np.float64)
    cdef floating[::1] sbuf = sbuf_arr

    best_arr = np.full(b, -np.inf)
    cdef double[::1] best = best_arr
    idx_arr = np.zeros(b, dtype=np.int64)
    cdef long long[::1] idx = idx_arr

    with nogil:
        start = 0
        while start < n:
            rows = n - start
            if rows > ENTRY_CHUNK:
                rows = ENTRY_CHUNK
            # col-major (b, rows) score block = probes @ chunk.T
            if floating is float:
                sgemm(&ct, &cn, &b, &rows, &d, <float*> &one,
                      <float*> &probes[0, 0], &d,
                      <float*> &dict_mat[start, 0], &d,
                      <float*> &zero, <float*> &sbuf[0], &b)
            else:
                dgemm(&ct, &cn, &b, &rows, &d, <double*> &one,
                      <double*> &probes[0, 0], &d,
                      <double*> &dict_mat[start, 0], &d,
                      <double*> &zero, <double*> &sbuf[0], &b)
            for r in range(rows):
                for j in range(b):
                    v = <double> sbuf[r * b + j]
                    if v > best[j]:
                        best[j] = v
                        idx[j] = start + r
            start += rows

    out_idx[:] = idx
    out_score[:] = best
