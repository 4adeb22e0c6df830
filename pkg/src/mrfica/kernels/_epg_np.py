"""Pure-numpy EPG simulation kernel, vectorized over tissue entries.

Gradient-spoiled (FISP-type) train with RF phase fixed at 0. In that
case the EPG state stays in a real subspace: F+ and F- are purely
imaginary and Z is real, so the recurrence below tracks the imaginary
parts ``fp``/``fm`` and the real ``z`` directly.

Operation order is kept identical to the compiled kernel so both
backends produce bit-identical output.
"""

import numpy as np


def simulate_batch(c2, s2, sa, ha, ca, e1, e2, r1, ete, max_order, out):
    """Run the spoiled gradient-echo train for a batch of tissues.

    Parameters
    ----------
    c2, s2, sa, ha, ca : ndarray, shape (T,)
        Per-pulse cos^2(a/2), sin^2(a/2), sin(a), sin(a)/2, cos(a).
    e1, e2, r1, ete : ndarray, shape (N,)
        Per-tissue exp(-TR/T1), exp(-TR/T2), 1-exp(-TR/T1), exp(-TE/T2).
    max_order : int
        Highest dephasing order retained.
    out : ndarray, shape (N, T)
        Output buffer; receives the signed echo amplitudes.
    """
    n = e1.shape[0]
    t_points = c2.shape[0]
    k = max_order
    fp = np.zeros((n, k + 1))
    fm = np.zeros((n, k + 1))
    z = np.zeros((n, k + 1))
    z[:, 0] = 1.0

    e1c = e1[:, None]
    e2c = e2[:, None]

    for t in range(t_points):
        # RF rotation at phase 0 on the (i*fp, i*fm, z) subspace
        fp_n = (c2[t] * fp + s2[t] * fm) - sa[t] * z
        fm_n = (s2[t] * fp + c2[t] * fm) + sa[t] * z
        z_n = (ha[t] * fp - ha[t] * fm) + ca[t] * z
        fp, fm, z = fp_n, fm_n, z_n

        # echo at TE: only T2 decay acts on F+_0 before the readout
        out[:, t] = fp[:, 0] * ete

        # relaxation over the full TR, then the unbalanced gradient
        # shifts F+ up and F- down by one order
        fp *= e2c
        fm *= e2c
        z *= e1c
        z[:, 0] += r1

        fp[:, 1:] = fp[:, :-1]
        fm[:, :-1] = fm[:, 1:]
        fm[:, -1] = 0.0
        fp[:, 0] = -fm[:, 0]
