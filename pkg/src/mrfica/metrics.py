"""Error metrics and reports for reconstructed parameter maps.

The headline metric is the mean absolute error normalized by the
masked ground-truth maximum, in percent:

    (1/N) * sum_i |P_i - Phat_i| / max(P) * 100

with the max taken per map over the evaluated pixels (per-map rather
than per-pixel normalization keeps the metric finite where P_i = 0).
"""

from dataclasses import dataclass

import numpy as np

from mrfica.errors import DomainError, ShapeError
from mrfica.phantom import (LABEL_CSF, LABEL_GM, LABEL_WM, save_map_mrfm)

REGION_ORDER = ("skull_stripped", "gm", "wm", "csf")
_REGION_LABELS = {"gm": LABEL_GM, "wm": LABEL_WM, "csf": LABEL_CSF}


@dataclass(eq=False)
class TissueMaps:
    """Per-pixel T1/T2 maps with the evaluated-region mask."""

    t1_map: np.ndarray            # (H, W) float64, ms
    t2_map: np.ndarray            # (H, W) float64, ms
    mask: np.ndarray              # (H, W) bool
    degenerate_pixels: int = 0

    @property
    def shape(self):
        return self.t1_map.shape


@dataclass
class RegionRow:
    t1_mae_pct: float
    t2_mae_pct: float
    pixels: int
    # summed |error| per parameter; the region rows recombine exactly
    # to the skull-stripped row through these
    t1_err_sum: float = 0.0
    t2_err_sum: float = 0.0


@dataclass
class RegionReport:
    """Per-region MAE% rows; regions without pixels are absent."""

    rows: dict

    def row(self, name):
        return self.rows[name]


def mae_percent(truth, pred, mask):
    """Masked mean absolute error in percent of the masked truth max."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if truth.shape != pred.shape or truth.shape != mask.shape:
        raise ShapeError("truth, pred and mask must share a shape")
    n = int(mask.sum())
    if n == 0:
        raise DomainError("mask selects no pixels")
    tsel = truth[mask]
    peak = float(tsel.max())
    if peak <= 0.0:
        raise DomainError("masked truth maximum must be positive")
    return float(np.sum(np.abs(tsel - pred[mask])) / n / peak * 100.0)


def error_map(truth, pred, mask=None):
    """Per-pixel absolute difference, zero outside the mask."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ShapeError("truth and pred must share a shape")
    err = np.abs(truth - pred)
    if mask is not None:
        err = np.where(np.asarray(mask, dtype=bool), err, 0.0)
    return err


def region_report(phantom, pred):
    """MAE% per segmentation region (skull-stripped = all foreground).

    Each row is :func:`mae_percent` restricted to the region's pixels,
    i.e. normalized by that region's own truth maximum.
    """
    if phantom.labels.shape != pred.t1_map.shape:
        raise ShapeError("phantom and prediction dimensions differ")
    fg = phantom.foreground
    if not fg.any():
        raise DomainError("phantom has no foreground pixels")
    rows = {}

    def add(name, sel):
        n = int(sel.sum())
        if n == 0:
            return
        e1 = float(np.sum(np.abs(phantom.t1_map[sel] - pred.t1_map[sel])))
        e2 = float(np.sum(np.abs(phantom.t2_map[sel] - pred.t2_map[sel])))
        rows[name] = RegionRow(
            t1_mae_pct=mae_percent(phantom.t1_map, pred.t1_map, sel),
            t2_mae_pct=mae_percent(phantom.t2_map, pred.t2_map, sel),
            pixels=n, t1_err_sum=e1, t2_err_sum=e2)

    add("skull_stripped", fg)
    for name, code in _REGION_LABELS.items():
        add(name, phantom.labels == code)
    return RegionReport(rows=rows)


def write_region_report_csv(report, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("region,t1_mae_pct,t2_mae_pct,pixels\n")
        for name in REGION_ORDER:
            if name in report.rows:
                r = report.rows[name]
                fh.write(f"{name},{r.t1_mae_pct:.6f},{r.t2_mae_pct:.6f},"
                         f"{r.pixels}\n")


def write_mae_csv(path, entries):
    """Write (label, t1_mae_pct, t2_mae_pct) rows as CSV."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("label,t1_mae_pct,t2_mae_pct\n")
        for label, m1, m2 in entries:
            fh.write(f"{label},{m1:.6f},{m2:.6f}\n")


def save_error_map(truth, pred, mask, path_raw, path_pgm=None):
    """Write |truth - pred| as MRFM raw plus an optional PGM preview
    (linear scaling, max -> 255)."""
    err = error_map(truth, pred, mask)
    save_map_mrfm(path_raw, err)
    if path_pgm is not None:
        save_map_pgm_preview(path_pgm, err)


def save_map_pgm_preview(path, arr):
    arr = np.asarray(arr, dtype=np.float64)
    peak = arr.max()
    scaled = (arr / peak * 255.0) if peak > 0 else np.zeros_like(arr)
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_tissue_maps(maps, directory, stem):
    """Persist a TissueMaps as MRFM rasters plus a PGM mask."""
    directory = str(directory)
    save_map_mrfm(f"{directory}/{stem}_t1.mrfm", maps.t1_map)
    save_map_mrfm(f"{directory}/{stem}_t2.mrfm", maps.t2_map)
    from mrfica.phantom import save_labels_pgm
    save_labels_pgm(f"{directory}/{stem}_mask.pgm",
                    maps.mask.astype(np.uint8))
