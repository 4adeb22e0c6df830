"""Synthetic ground-truth subjects and their fingerprint images.

A phantom is a label map (background / GM / WM / CSF) with per-pixel
T1/T2 values: concentric smooth-boundary regions (CSF core, GM ring,
WM ring) inside an elliptical head mask, with seeded low-frequency
spatial variation around each region's nominal relaxation times.
Synthesis runs the EPG kernel per pixel and optionally adds seeded
complex Gaussian noise before the magnitude is taken.
"""

import struct
from dataclasses import dataclass

import numpy as np

from mrfica import epg
from mrfica.errors import DomainError, FormatError

LABEL_BACKGROUND = 0
LABEL_GM = 1
LABEL_WM = 2
LABEL_CSF = 3

LABEL_NAMES = {LABEL_BACKGROUND: "background", LABEL_GM: "gm",
               LABEL_WM: "wm", LABEL_CSF: "csf"}

MAP_MAGIC = b"MRFM"
IMAGE_MAGIC = b"MRFI"


@dataclass(frozen=True)
class RegionParams:
    """Nominal relaxation times of one region plus the relative
    amplitude of its smooth spatial variation."""

    t1_ms: float
    t2_ms: float
    variation: float = 0.1


# Literature-typical stand-in values, inside the dictionary grid range.
DEFAULT_REGIONS = {
    LABEL_WM: RegionParams(t1_ms=800.0, t2_ms=70.0),
    LABEL_GM: RegionParams(t1_ms=1300.0, t2_ms=110.0),
    LABEL_CSF: RegionParams(t1_ms=3500.0, t2_ms=480.0),
}


@dataclass(eq=False)
class Phantom:
    """Ground-truth label map and per-pixel relaxation times."""

    labels: np.ndarray            # (H, W) uint8
    t1_map: np.ndarray            # (H, W) float64, 0 on background
    t2_map: np.ndarray            # (H, W) float64, 0 on background

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def foreground(self):
        return self.labels != LABEL_BACKGROUND


@dataclass(eq=False)
class FingerprintImage:
    """Spatial grid of magnitude signal evolutions."""

    data: np.ndarray              # (H, W, T) float32

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def t_points(self):
        return self.data.shape[2]


def generate_phantom(width, height, seed, regions=None):
    """Build a deterministic phantom with smooth region boundaries.

    Regions from the center out: CSF core, GM ring, WM ring, all
    inside an elliptical mask. Per-pixel values are the region nominal
    times one plus ``variation`` times a smooth field in [-1, 1].
    """
    width = int(width)
    height = int(height)
    if width < 8 or height < 8:
        raise DomainError("phantom dimensions must be at least 8x8")
    regions = dict(DEFAULT_REGIONS if regions is None else regions)
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    nx = (xx - cx) / (0.46 * width)
    ny = (yy - cy) / (0.46 * height)
    rho = np.sqrt(nx * nx + ny * ny)
    theta = np.arctan2(ny, nx)

    # wobble each boundary with two seeded angular harmonics
    def boundary(base):
        p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        return base * (1.0 + 0.06 * np.sin(3.0 * theta + p1)
                       + 0.04 * np.sin(5.0 * theta + p2))

    skull = boundary(1.0)
    gm_edge = boundary(0.62)
    csf_edge = boundary(0.28)

    labels = np.zeros((height, width), dtype=np.uint8)
    inside = rho <= skull
    labels[inside] = LABEL_WM
    labels[inside & (rho <= gm_edge)] = LABEL_GM
    labels[inside & (rho <= csf_edge)] = LABEL_CSF

    def smooth_field():
        f = np.zeros((height, width))
        for _ in range(4):
            kxy = rng.uniform(1.0, 3.0, size=2)
            ph = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            f += amp * np.sin(2.0 * np.pi * (kxy[0] * nx + kxy[1] * ny)
                              / 4.0 + ph)
        peak = np.abs(f).max()
        return f / peak if peak > 0 else f

    t1_field = smooth_field()
    t2_field = smooth_field()
    t1_map = np.zeros((height, width))
    t2_map = np.zeros((height, width))
    for code, params in regions.items():
        sel = labels == code
        t1_map[sel] = params.t1_ms * (1.0 + params.variation * t1_field[sel])
        t2_map[sel] = params.t2_ms * (1.0 + params.variation * t2_field[sel])
    return Phantom(labels=labels, t1_map=t1_map, t2_map=t2_map)


def snap_to_grid(phantom, t1_values, t2_values):
    """Snap per-pixel relaxation times to the nearest grid values.

    Produces an on-grid phantom (labels unchanged, background stays
    zero) so that noiseless matching can recover it exactly.
    """
    t1_values = np.sort(np.asarray(t1_values, dtype=np.float64))
    t2_values = np.sort(np.asarray(t2_values, dtype=np.float64))
    snapped1 = _snap(phantom.t1_map, t1_values)
    snapped2 = _snap(phantom.t2_map, t2_values)
    fg = phantom.foreground
    # keep pairs physical after independent snapping
    t2c = np.where(fg & (snapped2 > snapped1), snapped1, snapped2)
    return Phantom(labels=phantom.labels.copy(),
                   t1_map=np.where(fg, snapped1, 0.0),
                   t2_map=np.where(fg, t2c, 0.0))


def _snap(values, grid):
    pos = np.searchsorted(grid, values)
    pos = np.clip(pos, 1, len(grid) - 1)
    lower = grid[pos - 1]
    upper = grid[pos]
    return np.where(values - lower <= upper - values, lower, upper)


def synthesize_image(phantom, seq, noise_sigma=0.0, seed=0, max_order=None):
    """Per-pixel EPG synthesis of the phantom's fingerprint image.

    With ``noise_sigma`` > 0, zero-mean complex Gaussian noise with
    standard deviation ``noise_sigma`` times the pixel's signal RMS is
    added per component before the magnitude.
    """
    if noise_sigma < 0.0:
        raise DomainError("noise_sigma must be >= 0")
    h, w = phantom.labels.shape
    t = seq.t_points
    data = np.zeros((h, w, t), dtype=np.float32)
    fg = phantom.foreground.reshape(-1)
    if not fg.any():
        return FingerprintImage(data=data)

    pairs = np.stack([phantom.t1_map.reshape(-1)[fg],
                      phantom.t2_map.reshape(-1)[fg]], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    signed_u = epg.simulate_signed_batch(seq, uniq[:, 0], uniq[:, 1],
                                         max_order=max_order)
    signed = signed_u[inverse.reshape(-1)]

    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        rms = np.sqrt(np.mean(signed ** 2, axis=1))
        scale = (noise_sigma * rms)[:, None]
        noise = rng.standard_normal((signed.shape[0], t, 2))
        mag = np.sqrt((signed + scale * noise[:, :, 0]) ** 2
                      + (scale * noise[:, :, 1]) ** 2)
    else:
        mag = np.abs(signed)

    flat = data.reshape(-1, t)
    flat[fg] = mag.astype(np.float32)
    return FingerprintImage(data=data)


# ---------------------------------------------------------------------------
# file formats

def save_labels_pgm(path, labels):
    """8-bit binary PGM with the raw label codes as pixel values."""
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_labels_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError("bad magic: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"truncated PGM payload: need {w * h} bytes, "
                          f"have {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_map_mrfm(path, arr):
    """Little-endian f32 raster with a 16-byte MRFM header."""
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", MAP_MAGIC, w, h, 0))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_map_mrfm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sIII")
    if len(blob) < head:
        raise FormatError("truncated MRFM header")
    magic, w, h, _ = struct.unpack("<4sIII", blob[:head])
    if magic != MAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    need = w * h * 4
    if len(blob) - head != need:
        raise FormatError(f"truncated MRFM payload: need {need} bytes, "
                          f"have {len(blob) - head}")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(
        h, w).astype(np.float64)


def save_phantom(phantom, directory, stem="phantom"):
    """Write labels (PGM) and T1/T2 maps (MRFM) under ``directory``."""
    directory = str(directory)
    save_labels_pgm(f"{directory}/{stem}_labels.pgm", phantom.labels)
    save_map_mrfm(f"{directory}/{stem}_t1.mrfm", phantom.t1_map)
    save_map_mrfm(f"{directory}/{stem}_t2.mrfm", phantom.t2_map)


def load_phantom(directory, stem="phantom"):
    directory = str(directory)
    labels = load_labels_pgm(f"{directory}/{stem}_labels.pgm")
    t1 = load_map_mrfm(f"{directory}/{stem}_t1.mrfm")
    t2 = load_map_mrfm(f"{directory}/{stem}_t2.mrfm")
    return Phantom(labels=labels, t1_map=t1, t2_map=t2)


def save_image_mrfi(path, image):
    """Little-endian f32 fingerprint image, pixel-major sample order."""
    h, w, t = image.data.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", IMAGE_MAGIC, w, h, t))
        fh.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())


def load_image_mrfi(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sIII")
    if len(blob) < head:
        raise FormatError("truncated MRFI header")
    magic, w, h, t = struct.unpack("<4sIII", blob[:head])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    need = w * h * t * 4
    if len(blob) - head != need:
        raise FormatError(f"truncated MRFI payload: need {need} bytes, "
                          f"have {len(blob) - head}")
    data = np.frombuffer(blob, dtype="<f4", offset=head).reshape(h, w, t)
    return FingerprintImage(data=data.copy())
