"""Quantitative perfusion analysis: AHA 16-sector split anchored on the
RV insertion point, endo/epi layering, per-sector flow statistics,
perfusion reserve, and AIF-based pulmonary transit time.

Angles are measured about the LV-blood centroid with the image convention
angle = atan2(-(row - r0), col - c0), increasing counterclockwise. Sector 1
starts at the insertion angle and advances counterclockwise by default
(configurable to clockwise). Basal and mid slices get 6 sectors of 60
degrees, apical slices 4 of 90 degrees; ids are offset 0 / 6 / 12 so the
stack covers sectors 1..16 (no apical-cap segment 17).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .artifacts import (LABEL_BACKGROUND, LABEL_LV_BLOOD, LABEL_LV_MYO,
                        LABEL_RV_BLOOD)
from .report import ReportDocument

SLICE_CLASSES = ("basal", "mid", "apical")
SECTOR_COUNTS = {"basal": 6, "mid": 6, "apical": 4}
SECTOR_BASES = {"basal": 0, "mid": 6, "apical": 12}

LAYER_NONE = 0
LAYER_ENDO = 1
LAYER_EPI = 2

MPR_REST_GUARD = 0.05    # mL/min/g; rest flows below this give no ratio

SESSION_ARTIFACT_REST_SECTORS = "perf_rest_sectors"


class PerfError(Exception):
    pass


def _centroid(labels, label):
    pixels = np.argwhere(labels == label)
    if pixels.size == 0:
        raise PerfError(f"mask contains no label {label}")
    return pixels.mean(axis=0)


def pixel_angles_deg(points, center):
    """Counterclockwise angles (degrees, [0, 360)) about ``center``."""
    rows = points[:, 0] - center[0]
    cols = points[:, 1] - center[1]
    return np.degrees(np.arctan2(-rows, cols)) % 360.0


def _eight_adjacent(region):
    padded = np.pad(region, 1, mode="constant")
    out = np.zeros_like(region)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            out |= padded[1 + dr:padded.shape[0] - 1 + dr,
                          1 + dc:padded.shape[1] - 1 + dc]
    return out


def find_rv_insertion(mask):
    """RV insertion point: the counterclockwise end of the arc of
    myocardium pixels that touch (8-adjacency) the RV blood pool.

    Returns ((row, col), angle_deg about the LV-blood centroid).
    """
    labels = mask.labels
    center = _centroid(labels, LABEL_LV_BLOOD)
    myo = labels == LABEL_LV_MYO
    near_rv = _eight_adjacent(labels == LABEL_RV_BLOOD)
    candidates = np.argwhere(myo & near_rv)
    if candidates.size == 0:
        raise PerfError("RV not adjacent to myocardium")
    angles = pixel_angles_deg(candidates.astype(np.float64), center)
    order = np.argsort(angles)
    sorted_angles = angles[order]
    gaps = np.diff(sorted_angles)
    wrap_gap = 360.0 - sorted_angles[-1] + sorted_angles[0]
    all_gaps = np.append(gaps, wrap_gap)
    end_idx = int(np.argmax(all_gaps))    # arc ends where the biggest gap starts
    pick = order[end_idx]
    point = tuple(int(x) for x in candidates[pick])
    return point, float(sorted_angles[end_idx])


def split_sectors(mask, insertion_angle_deg, slice_class, rotation="ccw"):
    """Assign every myocardium pixel an AHA sector id.

    Sector 1 of the slice starts at the insertion angle; basal/mid slices
    split into 6 sectors, apical into 4; ids are offset by the slice-class
    base so a 3-slice stack covers 1..16.
    """
    if slice_class not in SECTOR_COUNTS:
        raise PerfError(f"unknown slice class {slice_class!r}")
    if rotation not in ("ccw", "cw"):
        raise PerfError(f"rotation must be ccw or cw, not {rotation!r}")
    labels = mask.labels
    n = SECTOR_COUNTS[slice_class]
    base = SECTOR_BASES[slice_class]
    width = 360.0 / n
    center = _centroid(labels, LABEL_LV_BLOOD)
    sectors = np.zeros(labels.shape, dtype=np.uint16)
    myo = np.argwhere(labels == LABEL_LV_MYO)
    if myo.size == 0:
        return sectors
    angles = pixel_angles_deg(myo.astype(np.float64), center)
    if rotation == "ccw":
        rel = (angles - insertion_angle_deg) % 360.0
    else:
        rel = (insertion_angle_deg - angles) % 360.0
    idx = np.minimum((rel // width).astype(int), n - 1)
    sectors[myo[:, 0], myo[:, 1]] = base + idx + 1
    return sectors


def split_endo_epi(mask):
    """Layer map: endo where the normalized transmural depth
    d_endo / (d_endo + d_epi) < 0.5, else epi (ties are epi).

    Depths are Euclidean distances to the endocardial (blood-adjacent)
    and epicardial (background-adjacent) myocardium boundary pixels,
    4-adjacency.
    """
    labels = mask.labels
    myo = labels == LABEL_LV_MYO
    if not myo.any():
        raise PerfError("mask contains no myocardium")
    endo_boundary = myo & _four_adjacent(labels == LABEL_LV_BLOOD)
    epi_boundary = myo & _four_adjacent(labels == LABEL_BACKGROUND)
    if not endo_boundary.any():
        raise PerfError("no blood-adjacent myocardium boundary")
    if not epi_boundary.any():
        raise PerfError("no background-adjacent myocardium boundary")
    layer = np.zeros(labels.shape, dtype=np.uint16)
    myo_px = np.argwhere(myo).astype(np.float64)
    d_endo = _min_distances(myo_px, np.argwhere(endo_boundary).astype(np.float64))
    d_epi = _min_distances(myo_px, np.argwhere(epi_boundary).astype(np.float64))
    tau = d_endo / (d_endo + d_epi)
    codes = np.where(tau < 0.5, LAYER_ENDO, LAYER_EPI)
    pix = np.argwhere(myo)
    layer[pix[:, 0], pix[:, 1]] = codes
    return layer


def _four_adjacent(region):
    padded = np.pad(region, 1, mode="constant")
    return (padded[:-2, 1:-1] | padded[2:, 1:-1]
            | padded[1:-1, :-2] | padded[1:-1, 2:])


def _min_distances(points, targets, block=2048):
    out = np.empty(len(points))
    for start in range(0, len(points), block):
        chunk = points[start:start + block]
        d2 = ((chunk[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
        out[start:start + block] = np.sqrt(d2.min(axis=1))
    return out


def sector_stats(flow_pixels, sectors, layers=None):
    """Mean flow per sector (1..16) and, with a layer map, per
    sector x {endo, epi}. Empty sectors map to None."""
    flow = np.asarray(flow_pixels, dtype=np.float64)
    if flow.shape != sectors.shape:
        raise PerfError(
            f"flow grid {flow.shape} does not match sectors {sectors.shape}")
    means = {}
    layer_means = {}
    for sector in range(1, 17):
        member = sectors == sector
        means[sector] = float(flow[member].mean()) if member.any() else None
        if layers is not None:
            for layer, name in ((LAYER_ENDO, "endo"), (LAYER_EPI, "epi")):
                sub = member & (layers == layer)
                layer_means[(sector, name)] = (
                    float(flow[sub].mean()) if sub.any() else None)
    return means, layer_means


def perfusion_reserve(stress_means, rest_means):
    """Per-sector stress/rest ratio; None when either side is absent or
    the rest flow sits below the guard threshold."""
    ratios = {}
    for sector in range(1, 17):
        stress = stress_means.get(sector)
        rest = rest_means.get(sector)
        if stress is None or rest is None or rest < MPR_REST_GUARD:
            ratios[sector] = None
        else:
            ratios[sector] = stress / rest
    return ratios


# ---------------------------------------------------------------------------
# AIF and pulmonary transit time
# ---------------------------------------------------------------------------

@dataclass
class AifCurves:
    times_ms: np.ndarray
    rv: np.ndarray
    lv: np.ndarray
    rv_window: tuple = None
    lv_window: tuple = None
    ptt_s: float = 0.0


def _first_pass_window(signal):
    """(start, stop) frame indices of the first pass: from the first rise
    above 20% of peak through the last frame before the post-peak signal
    drops below 10% of peak (or series end)."""
    peak_idx = int(np.argmax(signal))
    peak = signal[peak_idx]
    if peak <= 0:
        raise PerfError("curve has no positive peak after baseline removal")
    above = np.nonzero(signal >= 0.2 * peak)[0]
    start = int(above[0])
    stop = len(signal)
    for idx in range(peak_idx + 1, len(signal)):
        if signal[idx] < 0.1 * peak:
            stop = idx
            break
    return start, stop


def _windowed_centroid_s(times_ms, signal, window):
    start, stop = window
    t = np.asarray(times_ms[start:stop], dtype=np.float64) / 1000.0
    s = np.asarray(signal[start:stop], dtype=np.float64)
    total = s.sum()
    if total <= 0:
        raise PerfError("first-pass window holds no signal")
    return float((t * s).sum() / total)


def aif_and_ptt(frames, rv_masks, lv_masks, frame_times_ms, method="centroid"):
    """AIF curves over the RV / LV blood pools and the pulmonary transit time.

    Per-frame mean signal over each pool, baseline (mean of the first 3
    frames) subtracted and clamped at zero. PTT is the difference of the
    windowed temporal centroids (method "centroid", default) or of the
    peak times (method "peak").
    """
    if len(frames) < 8:
        raise PerfError("need at least 8 AIF frames")
    if not (len(frames) == len(rv_masks) == len(lv_masks) == len(frame_times_ms)):
        raise PerfError("frames, masks and times must align")
    if method not in ("centroid", "peak"):
        raise PerfError(f"unknown ptt_method {method!r}")

    def pool_curve(masks):
        curve = []
        for frame, mask in zip(frames, masks):
            pixels = np.asarray(frame.pixels, dtype=np.float64)
            if not mask.any():
                raise PerfError("empty AIF pool mask")
            curve.append(float(pixels[mask].mean()))
        curve = np.asarray(curve)
        baseline = curve[:3].mean()
        return np.maximum(curve - baseline, 0.0)

    rv = pool_curve(rv_masks)
    lv = pool_curve(lv_masks)
    if rv.max() <= 0 or lv.max() <= 0:
        raise PerfError("AIF curve is all zero after baseline subtraction")
    times = np.asarray(frame_times_ms, dtype=np.float64)
    rv_window = _first_pass_window(rv)
    lv_window = _first_pass_window(lv)
    if method == "peak":
        ptt = (times[int(np.argmax(lv))] - times[int(np.argmax(rv))]) / 1000.0
    else:
        ptt = (_windowed_centroid_s(times, lv, lv_window)
               - _windowed_centroid_s(times, rv, rv_window))
    return AifCurves(times_ms=times, rv=rv, lv=lv,
                     rv_window=rv_window, lv_window=lv_window, ptt_s=ptt)


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class PerfReport:
    scan_kind: str
    sector_means: dict
    layer_means: dict
    mpr: dict = None
    aif: AifCurves = None
    info: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    rasters: dict = field(default_factory=dict)

    def to_document(self):
        doc = ReportDocument(kind=self.scan_kind or "perf")
        doc.flags = list(self.flags)
        doc.info.update(self.info)
        table = doc.new_table("perf_sectors", ["sector", "mean", "endo", "epi"])

        def cell(x):
            return "-" if x is None else x

        for sector in range(1, 17):
            table.add_row(sector, cell(self.sector_means.get(sector)),
                          cell(self.layer_means.get((sector, "endo"))),
                          cell(self.layer_means.get((sector, "epi"))))
        if self.mpr is not None:
            mpr_table = doc.new_table("perf_mpr", ["sector", "ratio"])
            for sector in range(1, 17):
                mpr_table.add_row(sector, cell(self.mpr.get(sector)))
        if self.aif is not None:
            doc.curves["perf_aif_rv"] = list(
                zip(self.aif.times_ms.tolist(), self.aif.rv.tolist()))
            doc.curves["perf_aif_lv"] = list(
                zip(self.aif.times_ms.tolist(), self.aif.lv.tolist()))
            doc.info["ptt_s"] = repr(self.aif.ptt_s)
        doc.rasters.update(self.rasters)
        return doc


def serialize_sector_means(means):
    cells = []
    for sector in range(1, 17):
        value = means.get(sector)
        cells.append("-" if value is None else repr(float(value)))
    return ",".join(cells).encode("utf-8")


def parse_sector_means(payload):
    means = {}
    for sector, cell in enumerate(payload.decode("utf-8").split(","), start=1):
        means[sector] = None if cell == "-" else float(cell)
    return means
