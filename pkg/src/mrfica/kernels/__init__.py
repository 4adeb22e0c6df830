"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The Cython extensions are picked at import when available; set
``MRFICA_PURE_PYTHON=1`` to force the numpy fallback. Both backends are
bit-identical (same operation order, FMA contraction disabled in the
compiled build), so everything downstream is backend-independent.
"""

import os

import numpy as np

from mrfica.kernels import _epg_np, _match_np

_FORCE_PURE = os.environ.get("MRFICA_PURE_PYTHON", "") not in ("", "0")

if not _FORCE_PURE:
    try:
        from mrfica.kernels import _epg_cy, _match_cy
        _epg_impl = _epg_cy
        _match_impl = _match_cy
        _BACKEND = "compiled"
    except ImportError:
        _epg_impl = _epg_np
        _match_impl = _match_np
        _BACKEND = "python"
else:
    _epg_impl = _epg_np
    _match_impl = _match_np
    _BACKEND = "python"


def backend():
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _BACKEND


def epg_simulate_batch(flips_deg, tr_ms, te_ms, t1s_ms, t2s_ms, max_order,
                       impl=None):
    """Signed echo trains for a batch of tissues, shape (N, T) float64.

    All trigonometric and exponential constants are precomputed here so
    both backends consume identical values.
    """
    flips = np.ascontiguousarray(flips_deg, dtype=np.float64)
    t1s = np.ascontiguousarray(t1s_ms, dtype=np.float64)
    t2s = np.ascontiguousarray(t2s_ms, dtype=np.float64)
    a = np.deg2rad(flips)
    half = 0.5 * a
    c2 = np.cos(half) ** 2
    s2 = np.sin(half) ** 2
    sa = np.sin(a)
    ha = 0.5 * sa
    ca = np.cos(a)
    e1 = np.exp(-tr_ms / t1s)
    e2 = np.exp(-tr_ms / t2s)
    r1 = 1.0 - e1
    ete = np.exp(-te_ms / t2s)
    out = np.empty((t1s.shape[0], flips.shape[0]), dtype=np.float64)
    mod = _epg_impl if impl is None else impl
    mod.simulate_batch(c2, s2, sa, ha, ca, e1, e2, r1, ete, int(max_order),
                       out)
    return out


def match_argmax(dict_mat, probes, impl=None):
    """Best entry index and raw score per probe row.

    ``dict_mat`` (N, D) and ``probes`` (B, D) must share a float dtype.
    Ties resolve to the lowest entry index.
    """
    dict_mat = np.ascontiguousarray(dict_mat)
    probes = np.ascontiguousarray(probes, dtype=dict_mat.dtype)
    out_idx = np.empty(probes.shape[0], dtype=np.int64)
    out_score = np.empty(probes.shape[0], dtype=np.float64)
    mod = _match_impl if impl is None else impl
    mod.match_argmax(dict_mat, probes, out_idx, out_score)
    return out_idx, out_score
