"""Dictionary generation: grid expansion, simulation, SVD compression.

The (T1, T2) grid is a union of inclusive stepped segments per axis.
Non-physical pairs (zero relaxation times, T2 > T1) are dropped by
default; both filters can be disabled and the expansion report keeps
the counts auditable either way.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mrfica import epg
from mrfica.errors import DomainError, FormatError

MAGIC = b"MRFD"
FORMAT_VERSION = 1
FLAG_COMPRESSED = 1

# Segment notation: (start, step, end), inclusive on both ends.
FULL_T1_SEGMENTS = ((0.0, 2.0, 500.0), (500.0, 5.0, 1000.0),
                    (1000.0, 10.0, 2000.0), (2000.0, 50.0, 4000.0))
FULL_T2_SEGMENTS = ((0.0, 1.0, 100.0), (100.0, 2.0, 500.0))

# np.linalg.svd is preferred below this problem size; the Gram-matrix
# eigendecomposition handles tall dictionaries.
_DIRECT_SVD_LIMIT = 8_000_000


@dataclass(frozen=True)
class GridSpec:
    """Axis segments defining the (T1, T2) dictionary grid."""

    t1_segments: tuple
    t2_segments: tuple

    def __post_init__(self):
        for name, segs in (("t1", self.t1_segments),
                           ("t2", self.t2_segments)):
            if not segs:
                raise DomainError(f"{name}_segments must be non-empty")
            for start, step, end in segs:
                if step <= 0:
                    raise DomainError(f"{name} segment step must be > 0")
                if end < start:
                    raise DomainError(f"{name} segment end before start")

    @staticmethod
    def full_scale():
        return GridSpec(FULL_T1_SEGMENTS, FULL_T2_SEGMENTS)

    @staticmethod
    def desk_scale(step_factor=5):
        """Full-scale segments with steps widened by ``step_factor``."""
        widen = lambda segs: tuple((a, s * step_factor, b)
                                   for a, s, b in segs)
        return GridSpec(widen(FULL_T1_SEGMENTS), widen(FULL_T2_SEGMENTS))

    def t1_values(self):
        return _expand_axis(self.t1_segments)

    def t2_values(self):
        return _expand_axis(self.t2_segments)


@dataclass
class ExpansionReport:
    """Entry-count audit of a grid expansion."""

    t1_count: int
    t2_count: int
    raw_pairs: int
    dropped_zero: int
    dropped_t2_above_t1: int
    kept: int

    def as_dict(self):
        return dict(self.__dict__)


def _expand_axis(segments):
    parts = []
    for start, step, end in segments:
        n = int(np.floor((end - start) / step + 1e-9))
        parts.append(start + step * np.arange(n + 1))
    return np.unique(np.concatenate(parts))


def expand_grid(spec, drop_zero=True, drop_t2_above_t1=True):
    """Sorted, deduplicated (T1, T2) pairs of the grid, shape (N, 2)."""
    pairs, _ = expand_grid_with_report(spec, drop_zero=drop_zero,
                                       drop_t2_above_t1=drop_t2_above_t1)
    return pairs


def expand_grid_with_report(spec, drop_zero=True, drop_t2_above_t1=True):
    """Grid expansion plus an :class:`ExpansionReport` of the filters."""
    t1v = spec.t1_values()
    t2v = spec.t2_values()
    t1g, t2g = np.meshgrid(t1v, t2v, indexing="ij")
    pairs = np.stack([t1g.ravel(), t2g.ravel()], axis=1)
    raw = pairs.shape[0]

    zero_mask = (pairs[:, 0] <= 0.0) | (pairs[:, 1] <= 0.0)
    order_mask = pairs[:, 1] > pairs[:, 0]
    keep = np.ones(raw, dtype=bool)
    dropped_zero = 0
    dropped_order = 0
    if drop_zero:
        keep &= ~zero_mask
        dropped_zero = int(zero_mask.sum())
    if drop_t2_above_t1:
        order_only = order_mask & keep
        dropped_order = int(order_only.sum())
        keep &= ~order_mask
    pairs = pairs[keep]
    if pairs.shape[0] == 0:
        raise DomainError("grid expansion produced no entries")
    report = ExpansionReport(t1_count=len(t1v), t2_count=len(t2v),
                             raw_pairs=raw, dropped_zero=dropped_zero,
                             dropped_t2_above_t1=dropped_order,
                             kept=pairs.shape[0])
    return pairs, report


@dataclass
class Dictionary:
    """Simulated fingerprints indexed by (T1, T2).

    Signals are stored unnormalized in float32 (the on-disk precision);
    L2 norms are cached separately so matching can normalize without
    losing the physical scale.
    """

    params: np.ndarray            # (N, 2) float64, columns (t1_ms, t2_ms)
    signals: np.ndarray           # (N, T) float32 magnitudes
    norms: np.ndarray             # (N,) float64
    report: dict = field(default_factory=dict)
    _normalized: dict = field(default_factory=dict, repr=False)

    @property
    def n_entries(self):
        return self.params.shape[0]

    @property
    def t_points(self):
        return self.signals.shape[1]

    def normalized(self, dtype=np.float64):
        """Row-normalized signal matrix, cached per dtype."""
        key = np.dtype(dtype).name
        if key not in self._normalized:
            safe = np.where(self.norms > 0.0, self.norms, 1.0)
            mat = self.signals.astype(np.float64) / safe[:, None]
            self._normalized[key] = np.ascontiguousarray(mat, dtype=dtype)
        return self._normalized[key]

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return (np.array_equal(self.params, other.params)
                and np.array_equal(self.signals, other.signals))


@dataclass(eq=False)
class CompressedDictionary:
    """Rank-r projection of a dictionary onto its top right singular
    vectors. Projected coordinates are kept in float64 in memory and
    rounded to float32 on disk."""

    rank: int
    basis: np.ndarray             # (T, r) float64, orthonormal columns
    projected: np.ndarray         # (N, r) float64
    entry_params: np.ndarray      # (N, 2) float64
    energy_fraction: float = 1.0
    singular_values: np.ndarray = None
    _unit_coords: np.ndarray = field(default=None, repr=False)

    @property
    def n_entries(self):
        return self.entry_params.shape[0]

    @property
    def t_points(self):
        return self.basis.shape[0]

    def unit_coords(self, dtype=np.float64):
        """Projected coordinates renormalized to unit length (used for
        cosine scoring; raw projections keep their captured-energy
        norms)."""
        if self._unit_coords is None:
            norms = np.linalg.norm(self.projected, axis=1)
            safe = np.where(norms > 0.0, norms, 1.0)
            self._unit_coords = self.projected / safe[:, None]
        return np.ascontiguousarray(self._unit_coords, dtype=dtype)


def build_dictionary(seq, grid, parallel=False, threads=None,
                     max_order=None, report=None):
    """Simulate one fingerprint per grid entry.

    ``grid`` is an (N, 2) array of (t1_ms, t2_ms) rows (or a sequence
    of :class:`~mrfica.epg.TissueParams`). Parallel and serial builds
    are bit-identical: entries are partitioned into contiguous blocks
    and every entry is simulated independently.
    """
    pairs = _as_param_array(grid)
    if pairs.shape[0] == 0:
        raise DomainError("grid must be non-empty")
    n = pairs.shape[0]
    signals = np.empty((n, seq.t_points), dtype=np.float32)

    def run_block(start, stop):
        signed = epg.simulate_signed_batch(seq, pairs[start:stop, 0],
                                           pairs[start:stop, 1],
                                           max_order=max_order)
        signals[start:stop] = np.abs(signed).astype(np.float32)

    workers = threads if threads else 4
    if parallel and workers > 1 and n > 1:
        block = max(1, -(-n // workers))
        bounds = [(s, min(s + block, n)) for s in range(0, n, block)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda se: run_block(*se), bounds))
    else:
        run_block(0, n)

    norms = np.linalg.norm(signals.astype(np.float64), axis=1)
    return Dictionary(params=pairs, signals=signals, norms=norms,
                      report=dict(report or {}))


def _as_param_array(grid):
    if isinstance(grid, np.ndarray):
        pairs = np.ascontiguousarray(grid, dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise DomainError("grid array must have shape (N, 2)")
        return pairs
    return np.array([[t.t1_ms, t.t2_ms] for t in grid], dtype=np.float64)


def compress_svd(dictionary, rank):
    """Project the dictionary onto its top-``rank`` right singular
    vectors (computed from the L2-normalized fingerprints)."""
    n, t = dictionary.signals.shape
    rank = int(rank)
    if not 1 <= rank <= min(n, t):
        raise DomainError(f"rank must lie in [1, {min(n, t)}], got {rank}")
    normalized = dictionary.normalized(np.float64)
    if n * t <= _DIRECT_SVD_LIMIT:
        _, svals, vt = np.linalg.svd(normalized, full_matrices=False)
        total = float(np.sum(svals ** 2))
        basis = np.ascontiguousarray(vt[:rank].T)
        svals = svals[:rank].copy()
    else:
        gram = _gram_f64(normalized)
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        total = float(np.sum(evals))
        basis = np.ascontiguousarray(evecs[:, order[:rank]])
        svals = np.sqrt(evals[:rank])
    _fix_signs(basis)
    projected = normalized @ basis
    energy = float(np.sum(svals ** 2) / total) if total > 0.0 else 1.0
    return CompressedDictionary(rank=rank, basis=basis, projected=projected,
                                entry_params=dictionary.params.copy(),
                                energy_fraction=energy,
                                singular_values=svals)


def _gram_f64(mat, chunk=8192):
    t = mat.shape[1]
    gram = np.zeros((t, t), dtype=np.float64)
    for start in range(0, mat.shape[0], chunk):
        block = mat[start:start + chunk].astype(np.float64, copy=False)
        gram += block.T @ block
    return gram


def _fix_signs(basis):
    # deterministic orientation: first nonzero component positive
    for j in range(basis.shape[1]):
        col = basis[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0.0:
            basis[:, j] = -col


def save_dictionary(dictionary, path):
    """Write a raw or compressed dictionary in the MRFD container."""
    if isinstance(dictionary, CompressedDictionary):
        _save_compressed(dictionary, path)
    elif isinstance(dictionary, Dictionary):
        _save_raw(dictionary, path)
    else:
        raise TypeError("expected Dictionary or CompressedDictionary")


def _save_raw(d, path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQII", MAGIC, FORMAT_VERSION,
                             d.n_entries, d.t_points, 0))
        fh.write(np.ascontiguousarray(d.params, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(d.signals, dtype="<f4").tobytes())


def _save_compressed(d, path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQII", MAGIC, FORMAT_VERSION,
                             d.n_entries, d.t_points, FLAG_COMPRESSED))
        fh.write(struct.pack("<I", d.rank))
        fh.write(np.ascontiguousarray(d.basis, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(d.projected, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(d.entry_params,
                                      dtype="<f8").tobytes())


def load_dictionary(path):
    """Read an MRFD file, returning a Dictionary or a
    CompressedDictionary depending on the stored flags."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIQII")
    if len(blob) < header:
        raise FormatError("truncated header")
    magic, version, n, t, flags = struct.unpack("<4sIQII", blob[:header])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    body = blob[header:]
    if flags & FLAG_COMPRESSED:
        return _load_compressed(body, n, t)
    return _load_raw(body, n, t)


def _take(body, offset, dtype, count, what):
    nbytes = np.dtype(dtype).itemsize * count
    if offset + nbytes > len(body):
        raise FormatError(
            f"truncated {what}: need {nbytes} bytes at offset {offset}, "
            f"have {len(body) - offset}")
    arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
    return arr, offset + nbytes


def _load_raw(body, n, t):
    params, off = _take(body, 0, "<f8", n * 2, "params")
    sig, off = _take(body, off, "<f4", n * t, "signals")
    if off != len(body):
        raise FormatError(f"trailing bytes after signals: {len(body) - off}")
    signals = sig.reshape(n, t).copy()
    norms = np.linalg.norm(signals.astype(np.float64), axis=1)
    return Dictionary(params=params.reshape(n, 2).astype(np.float64),
                      signals=signals, norms=norms)


def _load_compressed(body, n, t):
    if len(body) < 4:
        raise FormatError("truncated rank field")
    (rank,) = struct.unpack("<I", body[:4])
    if not 1 <= rank <= t:
        raise FormatError(f"rank {rank} out of range for T={t}")
    basis, off = _take(body, 4, "<f8", t * rank, "basis")
    coords, off = _take(body, off, "<f4", n * rank, "coords")
    params, off = _take(body, off, "<f8", n * 2, "entry params")
    if off != len(body):
        raise FormatError(f"trailing bytes after params: {len(body) - off}")
    return CompressedDictionary(
        rank=int(rank),
        basis=basis.reshape(t, rank).astype(np.float64),
        projected=coords.reshape(n, rank).astype(np.float64),
        entry_params=params.reshape(n, 2).astype(np.float64))


def export_params_csv(dictionary, path):
    """Write the (index, t1_ms, t2_ms) entry index as CSV."""
    params = (dictionary.entry_params
              if isinstance(dictionary, CompressedDictionary)
              else dictionary.params)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("index,t1_ms,t2_ms\n")
        for i, (t1, t2) in enumerate(params):
            fh.write(f"{i},{float(t1)!r},{float(t2)!r}\n")
