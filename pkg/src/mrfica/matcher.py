"""Template matching: exhaustive normalized-correlation search.

The inner loop runs through :mod:`mrfica.kernels` (compiled when
available). Scoring precision is float64 up to a size threshold and
float32 beyond it; adjacent dictionary entries can correlate to within
~5e-7 of each other, so the exact-recovery use cases stay in float64
while the 100k x 2000 regime keeps float32 throughput. The winning
score is always recomputed in float64 and clamped to [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from mrfica import kernels
from mrfica.dictgen import CompressedDictionary, Dictionary
from mrfica.errors import DegenerateSignalError, ShapeError
from mrfica.metrics import TissueMaps

ZERO_NORM_EPS = 1e-12

# above this many matrix elements the search scores in float32
_F32_THRESHOLD = 40_000_000

_PROBE_BLOCK = 512


@dataclass(frozen=True)
class MatchResult:
    """Best dictionary entry for one probe signal."""

    t1_ms: float
    t2_ms: float
    score: float
    entry_index: int


def _score_dtype(n_entries, dim):
    return np.float32 if n_entries * dim > _F32_THRESHOLD else np.float64


def _normalize_probes(signals, dim):
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if signals.shape[1] != dim:
        raise ShapeError(
            f"probe length {signals.shape[1]} != dictionary t_points {dim}")
    norms = np.linalg.norm(signals, axis=1)
    degenerate = norms < ZERO_NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    return signals / safe[:, None], degenerate


def match_batch(dictionary, signals):
    """Match a (B, T) block of probes against a raw dictionary.

    Returns (entry indices, float64 scores, degenerate mask); the
    score is |<normalized probe, normalized entry>| for the winning
    entry, computed in float64 and clamped to [0, 1]. Degenerate
    (zero-norm) probes get index -1 and score 0.
    """
    if not isinstance(dictionary, Dictionary):
        raise TypeError("match_batch expects a raw Dictionary")
    probes, degenerate = _normalize_probes(signals, dictionary.t_points)
    dtype = _score_dtype(dictionary.n_entries, dictionary.t_points)
    dict_mat = dictionary.normalized(dtype)
    idx = np.empty(probes.shape[0], dtype=np.int64)
    for start in range(0, probes.shape[0], _PROBE_BLOCK):
        block = probes[start:start + _PROBE_BLOCK].astype(dtype)
        bidx, _ = kernels.match_argmax(dict_mat, block)
        idx[start:start + _PROBE_BLOCK] = bidx
    # exact score of the winner, independent of the search dtype
    winners = dictionary.normalized(np.float64)[idx]
    scores = np.clip(np.abs(np.sum(winners * probes, axis=1)), 0.0, 1.0)
    idx[degenerate] = -1
    scores[degenerate] = 0.0
    return idx, scores, degenerate


def match_compressed_batch(cdict, signals):
    """Match probes in the rank-r projected space.

    Probes are normalized, projected onto the basis, and scored by
    cosine against the entries' projected directions (projection norms
    carry per-entry captured energy, which would otherwise bias the
    argmax toward well-captured neighbors).
    """
    if not isinstance(cdict, CompressedDictionary):
        raise TypeError("match_compressed_batch expects a "
                        "CompressedDictionary")
    probes, degenerate = _normalize_probes(signals, cdict.t_points)
    coords = probes @ cdict.basis                       # (B, r)
    dtype = _score_dtype(cdict.n_entries, cdict.rank)
    dict_mat = cdict.unit_coords(dtype)
    idx = np.empty(coords.shape[0], dtype=np.int64)
    for start in range(0, coords.shape[0], _PROBE_BLOCK):
        block = coords[start:start + _PROBE_BLOCK].astype(dtype)
        bidx, _ = kernels.match_argmax(dict_mat, block)
        idx[start:start + _PROBE_BLOCK] = bidx
    cnorm = np.linalg.norm(coords, axis=1)
    csafe = np.where(cnorm < ZERO_NORM_EPS, 1.0, cnorm)
    unit = cdict.unit_coords(np.float64)[idx]
    scores = np.clip(np.abs(np.sum(unit * (coords / csafe[:, None]),
                                   axis=1)), 0.0, 1.0)
    idx[degenerate] = -1
    scores[degenerate] = 0.0
    return idx, scores, degenerate


def _single_result(dictionary, params, idx, score, degenerate):
    if degenerate:
        raise DegenerateSignalError("probe signal has (near-)zero norm")
    i = int(idx)
    return MatchResult(t1_ms=float(params[i, 0]), t2_ms=float(params[i, 1]),
                       score=float(score), entry_index=i)


def match_full(dictionary, signal):
    """Best entry for one probe by exhaustive normalized correlation."""
    idx, score, degen = match_batch(dictionary, signal)
    return _single_result(dictionary, dictionary.params, idx[0], score[0],
                          degen[0])


def match_compressed(cdict, signal):
    """Best entry for one probe, scored in the projected subspace."""
    idx, score, degen = match_compressed_batch(cdict, signal)
    return _single_result(cdict, cdict.entry_params, idx[0], score[0],
                          degen[0])


def reconstruct_maps(dictionary, image, mask=None):
    """Per-pixel dictionary matching over a fingerprint image.

    ``dictionary`` may be raw or compressed. Pixels outside ``mask``
    (or with zero-norm signals, counted as degenerate) are left at 0.
    """
    data = image.data
    h, w, t = data.shape
    if isinstance(dictionary, CompressedDictionary):
        if t != dictionary.t_points:
            raise ShapeError(f"image channels {t} != dictionary "
                             f"t_points {dictionary.t_points}")
        params = dictionary.entry_params
        batch_fn = lambda sig: match_compressed_batch(dictionary, sig)
    else:
        if t != dictionary.t_points:
            raise ShapeError(f"image channels {t} != dictionary "
                             f"t_points {dictionary.t_points}")
        params = dictionary.params
        batch_fn = lambda sig: match_batch(dictionary, sig)

    flat = data.reshape(h * w, t)
    norms = np.linalg.norm(flat.astype(np.float64), axis=1)
    auto = norms >= ZERO_NORM_EPS
    if mask is not None:
        wanted = mask.reshape(h * w).astype(bool)
        select = auto & wanted
        # degenerate = explicitly requested pixels with no signal
        degenerate_count = int((wanted & ~auto).sum())
    else:
        select = auto
        degenerate_count = 0

    t1 = np.zeros(h * w, dtype=np.float64)
    t2 = np.zeros(h * w, dtype=np.float64)
    sel_idx = np.flatnonzero(select)
    if sel_idx.size:
        idx, _, degen = batch_fn(flat[sel_idx])
        good = ~degen
        rows = sel_idx[good]
        t1[rows] = params[idx[good], 0]
        t2[rows] = params[idx[good], 1]
    out_mask = np.zeros(h * w, dtype=bool)
    out_mask[sel_idx] = True
    return TissueMaps(t1_map=t1.reshape(h, w), t2_map=t2.reshape(h, w),
                      mask=out_mask.reshape(h, w),
                      degenerate_pixels=degenerate_count)
