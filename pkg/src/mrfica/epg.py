"""Extended Phase Graph simulation of gradient-echo fingerprint signals.

The EPG formalism (Hennig 1988; Weigel 2015) tracks transverse and
longitudinal configuration states (F+, F-, Z) over integer dephasing
orders. Here it drives a spoiled gradient-echo train with a variable
flip-angle schedule and fixed TR/TE: each repetition applies the RF
rotation at phase 0, records the echo at TE (T2 decay on F+_0), then
relaxes over TR and shifts the transverse states one order.

``simulate_fingerprint`` runs through the selected hot kernel
(:mod:`mrfica.kernels`); the state-level operators in this module are
the general complex-valued formulation used to cross-check it.
"""

from dataclasses import dataclass, field

import numpy as np

from mrfica import kernels
from mrfica.errors import DomainError, InvalidStateError

DEFAULT_TR_MS = 4.3
DEFAULT_TE_MS = 2.0
MAX_ORDER_CAP = 100

FLIP_MIN_DEG = 5.0
FLIP_MAX_DEG = 70.0


@dataclass(frozen=True)
class SequenceParams:
    """Acquisition schedule: flip-angle train plus fixed TR and TE."""

    flip_train: np.ndarray
    tr_ms: float = DEFAULT_TR_MS
    te_ms: float = DEFAULT_TE_MS

    def __post_init__(self):
        flips = np.ascontiguousarray(self.flip_train, dtype=np.float64)
        object.__setattr__(self, "flip_train", flips)
        if flips.ndim != 1 or flips.size == 0:
            raise DomainError("flip_train must be a non-empty 1-D array")
        if np.any(flips < 0.0) or np.any(flips > 180.0):
            raise DomainError("flip angles must lie in [0, 180] degrees")
        if not self.tr_ms > 0.0:
            raise DomainError("tr_ms must be positive")
        if not 0.0 <= self.te_ms <= self.tr_ms:
            raise DomainError("te_ms must lie in [0, tr_ms]")

    @property
    def t_points(self):
        return int(self.flip_train.shape[0])


@dataclass(frozen=True)
class TissueParams:
    """Relaxation times of one tissue, in milliseconds."""

    t1_ms: float
    t2_ms: float

    def __post_init__(self):
        if not (self.t1_ms > 0.0 and self.t2_ms > 0.0):
            raise DomainError(
                f"relaxation times must be positive, got "
                f"T1={self.t1_ms}, T2={self.t2_ms}")


@dataclass
class EpgState:
    """Configuration states over dephasing orders 0..max_order."""

    f_plus: np.ndarray
    f_minus: np.ndarray
    z: np.ndarray

    @classmethod
    def equilibrium(cls, max_order):
        """All-zero transverse state with Z_0 = 1."""
        k = int(max_order) + 1
        z = np.zeros(k, dtype=np.complex128)
        z[0] = 1.0
        return cls(f_plus=np.zeros(k, dtype=np.complex128),
                   f_minus=np.zeros(k, dtype=np.complex128), z=z)

    @property
    def max_order(self):
        return self.f_plus.shape[0] - 1

    def copy(self):
        return EpgState(self.f_plus.copy(), self.f_minus.copy(),
                        self.z.copy())


def _require_finite(state):
    for arr in (state.f_plus, state.f_minus, state.z):
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise InvalidStateError("EPG state contains non-finite values")


def rf_rotation(flip_deg, phase_deg=0.0):
    """3x3 complex mixing matrix of an RF pulse on (F+, F-, Z)."""
    a = np.deg2rad(float(flip_deg))
    p = np.deg2rad(float(phase_deg))
    c2 = np.cos(a / 2.0) ** 2
    s2 = np.sin(a / 2.0) ** 2
    sa = np.sin(a)
    ca = np.cos(a)
    ei = np.exp(1j * p)
    return np.array([
        [c2, ei * ei * s2, -1j * ei * sa],
        [np.conj(ei) ** 2 * s2, c2, 1j * np.conj(ei) * sa],
        [-0.5j * np.conj(ei) * sa, 0.5j * ei * sa, ca],
    ], dtype=np.complex128)


def epg_rf(state, flip_deg, phase_deg=0.0):
    """Apply an RF rotation at every dephasing order.

    The rotation preserves the state energy in the standard EPG metric
    (see :func:`state_energy`).
    """
    _require_finite(state)
    if not 0.0 <= flip_deg <= 180.0:
        raise DomainError("flip angle must lie in [0, 180] degrees")
    t = rf_rotation(flip_deg, phase_deg)
    fp = t[0, 0] * state.f_plus + t[0, 1] * state.f_minus + t[0, 2] * state.z
    fm = t[1, 0] * state.f_plus + t[1, 1] * state.f_minus + t[1, 2] * state.z
    z = t[2, 0] * state.f_plus + t[2, 1] * state.f_minus + t[2, 2] * state.z
    return EpgState(fp, fm, z)


def epg_relax(state, tissue, dt_ms):
    """Relax for ``dt_ms``: E2 on F states, E1 on Z, regrowth into Z_0."""
    if not dt_ms > 0.0:
        raise DomainError("dt_ms must be positive")
    e1 = np.exp(-dt_ms / tissue.t1_ms)
    e2 = np.exp(-dt_ms / tissue.t2_ms)
    z = e1 * state.z
    z[0] += 1.0 - e1
    return EpgState(e2 * state.f_plus, e2 * state.f_minus, z)


def epg_shift(state):
    """Dephase by one order: F+ shifts up, F- shifts down.

    The new F+_0 is conj(F-_0) after the shift (the refocusing
    pathway); the highest F+ order falls off the truncated ladder.
    """
    fp = np.empty_like(state.f_plus)
    fm = np.empty_like(state.f_minus)
    fp[1:] = state.f_plus[:-1]
    fm[:-1] = state.f_minus[1:]
    fm[-1] = 0.0
    fp[0] = np.conj(fm[0])
    return EpgState(fp, fm, state.z.copy())


def epg_relax_shift(state, tissue, dt_ms):
    """Relaxation over ``dt_ms`` followed by the gradient shift."""
    return epg_shift(epg_relax(state, tissue, dt_ms))


def state_energy(state):
    """Per-order energy |F+|^2/2 + |F-|^2/2 + |Z|^2.

    This is the quadratic form the RF rotation is unitary under (the
    transverse states carry weight 1/2 because F-_k duplicates the
    k <= 0 half of the configuration spectrum).
    """
    return (0.5 * np.abs(state.f_plus) ** 2
            + 0.5 * np.abs(state.f_minus) ** 2
            + np.abs(state.z) ** 2)


def default_max_order(t_points):
    """Truncation order used by the simulators: min(T, 100)."""
    return min(int(t_points), MAX_ORDER_CAP)


def simulate_signed_batch(seq, t1s_ms, t2s_ms, max_order=None):
    """Signed echo amplitudes for many tissues at once, shape (N, T).

    The sign carries the transverse phase (pulses at phase 0 keep the
    signal on one axis); take ``abs`` for magnitude fingerprints.
    """
    t1s = np.atleast_1d(np.asarray(t1s_ms, dtype=np.float64))
    t2s = np.atleast_1d(np.asarray(t2s_ms, dtype=np.float64))
    if t1s.shape != t2s.shape:
        raise DomainError("t1s and t2s must have matching shapes")
    if np.any(t1s <= 0.0) or np.any(t2s <= 0.0):
        bad = np.argmax((t1s <= 0.0) | (t2s <= 0.0))
        raise DomainError(
            f"relaxation times must be positive, got "
            f"T1={t1s[bad]}, T2={t2s[bad]}")
    if max_order is None:
        max_order = default_max_order(seq.t_points)
    return kernels.epg_simulate_batch(seq.flip_train, seq.tr_ms, seq.te_ms,
                                      t1s, t2s, max_order)


def simulate_fingerprint(seq, tissue, max_order=None):
    """Magnitude fingerprint of one tissue, shape (T,) float64."""
    signed = simulate_signed_batch(seq, [tissue.t1_ms], [tissue.t2_ms],
                                   max_order=max_order)
    return np.abs(signed[0])


def default_flip_train(t_points, seed):
    """Smooth lobed flip-angle schedule in [5, 70] degrees.

    Two rectified sinusoidal lobes (periods 500 and 250 points) are
    rescaled to the full range and perturbed by seeded +-2 degree
    jitter. Deterministic per seed; a stand-in schedule, not a
    published one.
    """
    t_points = int(t_points)
    if t_points < 1:
        raise DomainError("t_points must be >= 1")
    t = np.arange(t_points, dtype=np.float64)
    raw = (0.6 * np.abs(np.sin(2.0 * np.pi * t / 500.0))
           + 0.4 * np.abs(np.sin(2.0 * np.pi * t / 250.0)))
    lo = raw.min()
    hi = raw.max()
    if hi - lo < 1e-12:
        base = np.full(t_points, 0.5 * (FLIP_MIN_DEG + FLIP_MAX_DEG))
    else:
        base = FLIP_MIN_DEG + (raw - lo) * ((FLIP_MAX_DEG - FLIP_MIN_DEG)
                                            / (hi - lo))
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-2.0, 2.0, size=t_points)
    return np.clip(base + jitter, FLIP_MIN_DEG, FLIP_MAX_DEG)


def save_flip_train(path, flips_deg):
    """Write a flip-angle train as single-column CSV (degrees)."""
    arr = np.asarray(flips_deg, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for v in arr:
            fh.write(f"{float(v)!r}\n")


def load_flip_train(path):
    """Read a single-column CSV of flip angles in degrees."""
    vals = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                vals.append(float(line))
    if not vals:
        raise DomainError(f"no flip angles in {path}")
    return np.array(vals, dtype=np.float64)
