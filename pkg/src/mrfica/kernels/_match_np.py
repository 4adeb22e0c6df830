"""Pure-numpy correlation-search kernel.

Scores a block of probes against every dictionary row and keeps the
running best per probe. Entries are processed in index order with a
strict ``>`` update, so ties resolve to the lowest entry index.
"""

import numpy as np

ENTRY_CHUNK = 4096


def match_argmax(dict_mat, probes, out_idx, out_score):
    """Argmax of ``dict_mat @ probes.T`` along the entry axis, chunked.

    dict_mat : (N, D) C-contiguous float32/float64
    probes   : (B, D) same dtype
    out_idx  : (B,) int64, receives best entry index per probe
    out_score: (B,) float64, receives best raw score per probe
    """
    n = dict_mat.shape[0]
    best = np.full(probes.shape[0], -np.inf)
    idx = np.zeros(probes.shape[0], dtype=np.int64)
    for start in range(0, n, ENTRY_CHUNK):
        block = dict_mat[start:start + ENTRY_CHUNK]
        scores = probes @ block.T
        local = np.argmax(scores, axis=1)
        vals = scores[np.arange(scores.shape[0]), local].astype(np.float64)
        upd = vals > best
        idx[upd] = start + local[upd]
        best[upd] = vals[upd]
    out_idx[:] = idx
    out_score[:] = best
