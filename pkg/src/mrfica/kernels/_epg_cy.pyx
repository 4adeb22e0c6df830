"""Compiled EPG simulation kernel.

Same recurrence as kernels._epg_np, one tissue at a time in tight C
loops. Expressions are parenthesized exactly like the numpy fallback
and the module is compiled with -ffp-contract=off, so the two backends
are bit-identical.
"""

import numpy as np


def simulate_batch(double[::1] c2, double[::1] s2, double[::1] sa,
                   double[::1] ha, double[::1] ca,
                   double[::1] e1, double[::1] e2, double[::1] r1,
                   double[::1] ete, int max_order,
                   double[:, ::1] out):
    cdef Py_ssize_t n = e1.shape[0]
    cdef Py_ssize_t t_points = c2.shape[0]
    cdef Py_ssize_t k = max_order
    cdef Py_ssize_t i, t, j

    buf = np.zeros((3, k + 1), dtype=np.float64)
    cdef double[:, ::1] state = buf
    cdef double fp_j, fm_j, z_j
    cdef double te1, te2, tr1, tete
    cdef double pc2, ps2, psa, pha, pca

    for i in range(n):
        te1 = e1[i]
        te2 = e2[i]
        tr1 = r1[i]
        tete = ete[i]
        with nogil:
            for j in range(k + 1):
                state[0, j] = 0.0
                state[1, j] = 0.0
                state[2, j] = 0.0
            state[2, 0] = 1.0

            for t in range(t_points):
                pc2 = c2[t]
                ps2 = s2[t]
                psa = sa[t]
                pha = ha[t]
                pca = ca[t]
                for j in range(k + 1):
                    fp_j = state[0, j]
                    fm_j = state[1, j]
                    z_j = state[2, j]
                    state[0, j] = (pc2 * fp_j + ps2 * fm_j) - psa * z_j
                    state[1, j] = (ps2 * fp_j + pc2 * fm_j) + psa * z_j
                    state[2, j] = (pha * fp_j - pha * fm_j) + pca * z_j

                out[i, t] = state[0, 0] * tete

                for j in range(k + 1):
                    state[0, j] = state[0, j] * te2
                    state[1, j] = state[1, j] * te2
                    state[2, j] = state[2, j] * te1
                state[2, 0] = state[2, 0] + tr1

                for j in range(k, 0, -1):
                    state[0, j] = state[0, j - 1]
                for j in range(k):
                    state[1, j] = state[1, j + 1]
                state[1, k] = 0.0
                state[0, 0] = -state[1, 0]
