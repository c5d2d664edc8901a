"""Short-axis cine analysis: LV volumes, mass and function from
segmentation masks, valve-plane slice inclusion from long-axis landmarks,
per-slice maximal wall thickness, and review mosaics.

Volumes are pixel counts times voxel volume (pixel spacing x slice
spacing); masks are the primary model output, contours are derived only
for display. Myocardial mass uses a density of 1.05 g/mL.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .artifacts import LABEL_LV_BLOOD, LABEL_LV_MYO
from .geometry import slice_center_mm, to_patient_coords
from .report import ReportDocument

log = logging.getLogger(__name__)

MYO_DENSITY_G_PER_ML = 1.05


class SaxError(Exception):
    pass


def voxel_ml(header):
    """Volume contribution of one pixel through the slice gap, in mL."""
    sr, sc = header.pixel_spacing_mm
    return sr * sc * header.slice_spacing_mm / 1000.0


def _label_volume(masks, label, included):
    """Per-slice label volumes in mL; excluded slices contribute 0."""
    contributions = []
    for mask, include in zip(masks, included):
        if include:
            contributions.append(mask.count(label) * voxel_ml(mask.header))
        else:
            contributions.append(0.0)
    return contributions


def blood_volume(masks, included=None):
    """LV blood volume of one phase's mask stack, in mL."""
    if included is None:
        included = [True] * len(masks)
    if masks and not any(included):
        log.warning("no slices included, blood volume is 0")
    return sum(_label_volume(masks, LABEL_LV_BLOOD, included))


def find_ed_es(volumes):
    """(ed_phase, es_phase) = (argmax, argmin); ties go to the lowest index."""
    if len(volumes) < 2:
        raise SaxError("need at least 2 phases")
    return int(np.argmax(volumes)), int(np.argmin(volumes))


@dataclass
class ValvePlane:
    """Plane through the mitral annulus; apex side has positive distance."""

    point: np.ndarray
    normal: np.ndarray

    def signed_distance(self, p):
        return float(np.dot(np.asarray(p, dtype=np.float64) - self.point,
                            self.normal))


def fit_valve_plane(mitral_points_mm, apex_mm):
    """Least-squares plane (orthogonal distances) through >= 3 points,
    oriented so the apex has positive signed distance."""
    points = np.asarray(mitral_points_mm, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 3 or points.shape[1] != 3:
        raise SaxError("need at least 3 3D points")
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, singular, vh = np.linalg.svd(centered, full_matrices=False)
    spreads = singular / math.sqrt(points.shape[0])
    if spreads[1] <= 1e-6:
        raise SaxError("mitral points are collinear or coincident")
    normal = vh[2]
    plane = ValvePlane(centroid, normal / np.linalg.norm(normal))
    distance = plane.signed_distance(apex_mm)
    if abs(distance) < 1e-9:
        raise SaxError("apex lies on the valve plane")
    if distance < 0:
        plane.normal = -plane.normal
    return plane


def slice_included(plane, header):
    """True iff the slice center lies strictly on the apical side."""
    return plane.signed_distance(slice_center_mm(header)) > 0


# ---------------------------------------------------------------------------
# Function report
# ---------------------------------------------------------------------------

@dataclass
class FunctionValues:
    """Scalar function biomarkers; None where inputs were missing."""

    edv_ml: float
    esv_ml: float
    sv_ml: float
    ef_percent: float
    mass_g: float
    mcf_percent: float
    co_l_min: float = None
    edvi: float = None
    esvi: float = None
    svi: float = None
    massi: float = None
    ci: float = None


def function_biomarkers(edv_ml, esv_ml, mass_g, heart_rate_bpm=None, bsa_m2=None):
    """Derived function values from EDV/ESV/MASS and session vitals.

    SV = EDV - ESV, EF = 100 * SV / EDV, MCF = 100 * SV / (MASS / 1.05),
    CO = SV * HR / 1000; indexed values divide by BSA. CO and the indexed
    values are None when HR / BSA are unavailable.
    """
    if edv_ml == 0:
        raise SaxError("EDV is zero")
    sv = edv_ml - esv_ml
    ef = 100.0 * sv / edv_ml
    mcf = 100.0 * sv / (mass_g / MYO_DENSITY_G_PER_ML) if mass_g > 0 else None
    values = FunctionValues(edv_ml=edv_ml, esv_ml=esv_ml, sv_ml=sv,
                            ef_percent=ef, mass_g=mass_g, mcf_percent=mcf)
    if heart_rate_bpm is not None:
        values.co_l_min = sv * heart_rate_bpm / 1000.0
    if bsa_m2 is not None and bsa_m2 > 0:
        values.edvi = edv_ml / bsa_m2
        values.esvi = esv_ml / bsa_m2
        values.svi = sv / bsa_m2
        values.massi = mass_g / bsa_m2
        if values.co_l_min is not None:
            values.ci = values.co_l_min / bsa_m2
    return values


@dataclass
class SaxReport:
    values: FunctionValues
    ed_phase: int
    es_phase: int
    slice_blood_ed_ml: list
    slice_blood_es_ml: list
    slice_myo_ed_ml: list
    included_ed: list
    included_es: list
    wall_thickness_mm: list = field(default_factory=list)
    extent_corrected: bool = False
    flags: list = field(default_factory=list)
    rasters: dict = field(default_factory=dict)
    normal_ranges: dict = field(default_factory=dict)

    def to_document(self, session_info=None):
        doc = ReportDocument(kind="sax")
        doc.flags = list(self.flags)
        doc.info.update(session_info or {})
        doc.info["ed_phase"] = self.ed_phase
        doc.info["es_phase"] = self.es_phase
        v = self.values
        table = doc.new_table(
            "sax_function",
            ["biomarker", "value", "normal_range", "index_name",
             "index_value", "index_normal_range"])

        def rng(name):
            return self.normal_ranges.get(name, "-")

        def cell(x):
            return "-" if x is None else x

        table.add_row("EF (%)", v.ef_percent, rng("EF"), "-", "-", "-")
        table.add_row("EDV (ml)", v.edv_ml, rng("EDV"),
                      "EDVi (ml/m2)", cell(v.edvi), rng("EDVi"))
        table.add_row("ESV (ml)", v.esv_ml, rng("ESV"),
                      "ESVi (ml/m2)", cell(v.esvi), rng("ESVi"))
        table.add_row("SV (ml)", v.sv_ml, rng("SV"),
                      "SVi (ml/m2)", cell(v.svi), rng("SVi"))
        table.add_row("MASS (g)", v.mass_g, rng("MASS"),
                      "MASSi (g/m2)", cell(v.massi), rng("MASSi"))
        table.add_row("CO (L/min)", cell(v.co_l_min), rng("CO"),
                      "CI (L/min/m2)", cell(v.ci), rng("CI"))
        table.add_row("MCF (%)", cell(v.mcf_percent), rng("MCF"), "-", "-", "-")

        slices = doc.new_table(
            "sax_slices",
            ["slice", "blood_ed_ml", "blood_es_ml", "myo_ed_ml",
             "included_ed", "included_es", "max_wall_thickness_mm"])
        for i in range(len(self.slice_blood_ed_ml)):
            thickness = (self.wall_thickness_mm[i]
                         if i < len(self.wall_thickness_mm) else None)
            slices.add_row(
                i, self.slice_blood_ed_ml[i], self.slice_blood_es_ml[i],
                self.slice_myo_ed_ml[i],
                int(self.included_ed[i]), int(self.included_es[i]),
                "-" if thickness is None else thickness)
        doc.rasters.update(self.rasters)
        return doc


def sax_biomarkers(mask_stacks, lax_phases=None, heart_rate_bpm=None,
                   bsa_m2=None, normal_ranges=None):
    """Full short-axis function analysis.

    mask_stacks: per-phase list of per-slice SegmentationMasks (all phases,
    all slices, slice order consistent across phases). lax_phases: parsed
    long-axis artifact (phase_idx -> mitral/apex patient geometry) or None.

    ED/ES are found on uncorrected all-slice volumes first; the valve-plane
    extent correction is applied at those phases. Without long-axis data
    every slice is included and the report is flagged "uncorrected extent".
    """
    n_phases = len(mask_stacks)
    if n_phases < 2:
        raise SaxError("need at least 2 phases")
    n_slices = len(mask_stacks[0])
    if any(len(stack) != n_slices for stack in mask_stacks):
        raise SaxError("phases disagree on slice count")

    uncorrected = [blood_volume(stack) for stack in mask_stacks]
    ed, es = find_ed_es(uncorrected)

    flags = []
    included_ed = [True] * n_slices
    included_es = [True] * n_slices
    extent_corrected = False
    if lax_phases:
        planes = {}
        for phase in (ed, es):
            entry = lax_phases.get(phase)
            if entry is None:
                continue
            apex = np.mean(np.asarray(entry["apex_mm"], dtype=np.float64), axis=0)
            planes[phase] = fit_valve_plane(entry["mitral_mm"], apex)
        if ed in planes and es in planes:
            included_ed = [slice_included(planes[ed], m.header)
                           for m in mask_stacks[ed]]
            included_es = [slice_included(planes[es], m.header)
                           for m in mask_stacks[es]]
            extent_corrected = True
        else:
            flags.append("uncorrected extent")
    else:
        flags.append("uncorrected extent")

    slice_blood_ed = _label_volume(mask_stacks[ed], LABEL_LV_BLOOD, included_ed)
    slice_blood_es = _label_volume(mask_stacks[es], LABEL_LV_BLOOD, included_es)
    slice_myo_ed = _label_volume(mask_stacks[ed], LABEL_LV_MYO, included_ed)
    edv = sum(slice_blood_ed)
    esv = sum(slice_blood_es)
    if edv == 0:
        raise SaxError("EDV is zero")
    if not any(included_ed):
        flags.append("no slices included at ED")
    mass = sum(slice_myo_ed) * MYO_DENSITY_G_PER_ML
    if heart_rate_bpm is None or bsa_m2 is None:
        flags.append("missing heart rate or BSA, CO/indexed values omitted")
    values = function_biomarkers(edv, esv, mass, heart_rate_bpm, bsa_m2)
    return SaxReport(
        values=values, ed_phase=ed, es_phase=es,
        slice_blood_ed_ml=slice_blood_ed, slice_blood_es_ml=slice_blood_es,
        slice_myo_ed_ml=slice_myo_ed,
        included_ed=included_ed, included_es=included_es,
        extent_corrected=extent_corrected, flags=flags,
        normal_ranges=dict(normal_ranges or {}))


# ---------------------------------------------------------------------------
# Wall thickness
# ---------------------------------------------------------------------------

def _bilinear(image, r, c):
    rows, cols = image.shape
    r = np.clip(r, 0.0, rows - 1.000001)
    c = np.clip(c, 0.0, cols - 1.000001)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    fr = r - r0
    fc = c - c0
    return ((1 - fr) * (1 - fc) * image[r0, c0]
            + (1 - fr) * fc * image[r0, c0 + 1]
            + fr * (1 - fc) * image[r0 + 1, c0]
            + fr * fc * image[r0 + 1, c0 + 1])


def max_wall_thickness(mask, angle_step_deg=1.0, radial_step_px=0.25):
    """Maximal myocardial wall thickness of one ED mask, in mm.

    Casts rays from the LV-blood centroid (1 degree steps, 0.25 pixel
    sampling). Per-class indicator images are sampled bilinearly along
    each ray, so the boundary estimate is subpixel; per ray the wall runs
    from the last blood-to-myocardium transition to the last myocardium-
    to-background transition (each located at the crossing midpoint).
    Returns the maximum over rays.
    """
    labels = mask.labels
    if not (labels == LABEL_LV_MYO).any():
        raise SaxError("mask contains no myocardium")
    blood_px = np.argwhere(labels == LABEL_LV_BLOOD)
    if blood_px.size == 0:
        raise SaxError("mask contains no LV blood")
    center = blood_px.mean(axis=0)
    rows, cols = labels.shape
    sr, sc = mask.header.pixel_spacing_mm

    classes = np.stack([(labels == LABEL_LV_BLOOD).astype(np.float64),
                        (labels == LABEL_LV_MYO).astype(np.float64),
                        (labels == 0).astype(np.float64)])
    max_radius = math.hypot(rows, cols)
    steps = np.arange(radial_step_px, max_radius, radial_step_px)
    angles = np.radians(np.arange(0.0, 360.0, angle_step_deg))
    dr = -np.sin(angles)[:, None]
    dc = np.cos(angles)[:, None]
    r_path = center[0] + steps[None, :] * dr      # [rays, steps]
    c_path = center[1] + steps[None, :] * dc
    outside = ((r_path < 0) | (r_path > rows - 1)
               | (c_path < 0) | (c_path > cols - 1))
    values = np.stack([_bilinear(img, r_path, c_path) for img in classes])
    values[2][outside] = 1.0                      # beyond the image: background
    values[0][outside] = 0.0
    values[1][outside] = 0.0
    ray_labels = np.argmax(values, axis=0)        # 0 blood, 1 myo, 2 bg
    prev = ray_labels[:, :-1]
    curr = ray_labels[:, 1:]
    idx = np.arange(prev.shape[1])[None, :]
    inner_hits = (prev == 0) & (curr == 1)
    outer_hits = (prev == 1) & (curr == 2)
    inner_last = np.where(inner_hits.any(axis=1),
                          np.max(np.where(inner_hits, idx, -1), axis=1), -1)
    outer_last = np.where(outer_hits.any(axis=1),
                          np.max(np.where(outer_hits, idx, -1), axis=1), -1)
    scale = np.hypot(dr[:, 0] * sr, dc[:, 0] * sc)

    def crossing(ray, i, a, b):
        # subpixel zero of (class a - class b) between samples i and i+1
        f0 = values[a, ray, i] - values[b, ray, i]
        f1 = values[a, ray, i + 1] - values[b, ray, i + 1]
        t = 0.5 if f0 == f1 else f0 / (f0 - f1)
        return steps[i] + min(max(t, 0.0), 1.0) * radial_step_px

    best = 0.0
    for ray in range(len(angles)):
        i, o = inner_last[ray], outer_last[ray]
        if i < 0 or o < 0 or o <= i:
            continue
        start = crossing(ray, i, 0, 1)
        end = crossing(ray, o, 1, 2)
        best = max(best, (end - start) * float(scale[ray]))
    if best == 0.0:
        raise SaxError("no blood-myocardium-background crossing found")
    return best


# ---------------------------------------------------------------------------
# Mosaic rendering
# ---------------------------------------------------------------------------

BOUNDARY_COLORS = {
    LABEL_LV_BLOOD: (255, 64, 64),    # endocardium: red
    LABEL_LV_MYO: (64, 255, 64),      # epicardium: green
    3: (64, 128, 255),                # RV: blue
}


def mask_boundary(labels, label):
    """Pixels of ``label`` having at least one differing 4-neighbor."""
    region = labels == label
    boundary = np.zeros_like(region)
    if not region.any():
        return boundary
    padded = np.pad(region, 1, mode="constant")
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return region & ~interior


def render_mosaic(frames, masks=None, tile_labels=None, cross_lines=None):
    """Grid mosaic of frames with boundary overlays and per-tile text.

    Layout is ceil(sqrt(N)) columns. Base is the 8-bit grayscale image
    (windowed to the mosaic-wide maximum); mask boundaries are colored
    per label; tile_labels are short strings drawn in the top-left corner;
    cross_lines maps frame index -> list of (a, b, d) line coefficients
    a*row + b*col + d = 0 to draw (slice cross-references on a LAX frame).
    """
    from .render import draw_text

    n = len(frames)
    if n == 0:
        return np.zeros((1, 1, 3), dtype=np.uint8)
    rows0, cols0 = np.asarray(frames[0].pixels).shape
    if any(np.asarray(f.pixels).shape != (rows0, cols0) for f in frames):
        raise SaxError("mosaic frames must share dimensions")
    ncols = math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    canvas = np.zeros((nrows * rows0, ncols * cols0, 3), dtype=np.uint8)
    peak = max(float(np.abs(np.asarray(f.pixels)).max()) for f in frames)
    scale = 255.0 / peak if peak > 0 else 0.0
    for idx, frame in enumerate(frames):
        tr, tc = divmod(idx, ncols)
        r0, c0 = tr * rows0, tc * cols0
        gray = np.clip(np.abs(np.asarray(frame.pixels, dtype=np.float64))
                       * scale, 0, 255).astype(np.uint8)
        canvas[r0:r0 + rows0, c0:c0 + cols0] = gray[..., None]
        if masks is not None and idx < len(masks) and masks[idx] is not None:
            labels = masks[idx].labels
            for label, color in BOUNDARY_COLORS.items():
                edge = mask_boundary(labels, label)
                canvas[r0:r0 + rows0, c0:c0 + cols0][edge] = color
        if cross_lines and idx in cross_lines:
            for a, b, d in cross_lines[idx]:
                _draw_implicit_line(canvas, r0, c0, rows0, cols0, a, b, d)
        if tile_labels and idx < len(tile_labels) and tile_labels[idx]:
            draw_text(canvas, r0 + 2, c0 + 2, tile_labels[idx],
                      color=(255, 255, 0))
    return canvas


def _draw_implicit_line(canvas, r0, c0, rows, cols, a, b, d):
    """Draw a*row + b*col + d = 0 clipped to one tile, in orange."""
    norm = math.hypot(a, b)
    if norm == 0:
        return
    if abs(b) >= abs(a):
        rr = np.arange(rows)
        cc = np.rint(-(a * rr + d) / b).astype(int)
        ok = (cc >= 0) & (cc < cols)
        canvas[r0 + rr[ok], c0 + cc[ok]] = (255, 160, 0)
    else:
        cc = np.arange(cols)
        rr = np.rint(-(b * cc + d) / a).astype(int)
        ok = (rr >= 0) & (rr < rows)
        canvas[r0 + rr[ok], c0 + cc[ok]] = (255, 160, 0)


def sax_cross_lines(lax_header, sax_headers):
    """Line coefficients of each SAX slice plane in LAX pixel coordinates."""
    p0 = to_patient_coords((0.0, 0.0), lax_header)
    er = np.asarray(lax_header.row_dir, dtype=np.float64)
    ec = np.asarray(lax_header.col_dir, dtype=np.float64)
    sr, sc = lax_header.pixel_spacing_mm
    lines = []
    from .geometry import slice_normal
    for header in sax_headers:
        normal = slice_normal(header)
        q = slice_center_mm(header)
        a = sr * float(np.dot(normal, er))
        b = sc * float(np.dot(normal, ec))
        d = float(np.dot(normal, p0 - q))
        lines.append((a, b, d))
    return lines
