"""Deterministic synthetic phantoms and their analytic ground truth.

The left ventricle is an ellipsoid centered at the patient origin, long
axis along +z, whose blood-pool semi-axes shrink from their ED values
(phase 0) to the ES values on a cosine schedule over the cardiac cycle.
The myocardium is the shell up to the outer ellipsoid; an RV crescent
hugs the shell over a known angular arc (which pins the RV insertion).

Images are painted at fixed intensity levels (blood 1.0, myocardium 0.6,
RV blood 0.35, background 0.0), so the built-in level-quantizing stub
worker reproduces the ground-truth masks exactly, and every geometric
biomarker has a closed form to verify against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

INTENSITY = {"blood": 1.0, "myo": 0.6, "rv": 0.35}

SECTOR_COUNTS = {"basal": 6, "mid": 6, "apical": 4}
SECTOR_BASES = {"basal": 0, "mid": 6, "apical": 12}


def default_rest_flows():
    return {k: round(0.8 + 0.05 * k, 3) for k in range(1, 17)}


def default_stress_flows():
    return {k: round((0.8 + 0.05 * k) * (2.0 + 0.1 * (k % 4)), 3)
            for k in range(1, 17)}


@dataclass
class PhantomParams:
    n_slices: int = 11
    n_phases: int = 25
    matrix: int = 192
    n_coils: int = 4
    pixel_spacing_mm: float = 1.25
    slice_thickness_mm: float = 8.0
    slice_spacing_mm: float = 10.0
    ed_axes_mm: tuple = (50.0, 25.0, 25.0)      # (long z, in-plane x, y)
    es_axes_mm: tuple = (40.0, 19.0, 19.0)
    myo_thickness_mm: float = 8.0
    rv_arc_deg: tuple = (120.0, 180.0)          # RV crescent, ccw span
    heart_rate_bpm: float = 68.0
    bsa_m2: float = 1.9
    sex: str = "female"
    # pacing (per-slice acquisition duration and inter-slice gap)
    slice_ms: float = 7000.0
    gap_ms: float = 4000.0
    # long-axis phantom
    lax_matrix: int = 160
    lax_mapse_mm: float = 9.0
    # perfusion phantom
    perf_matrix: int = 96
    rest_flows: dict = field(default_factory=default_rest_flows)
    stress_flows: dict = field(default_factory=default_stress_flows)
    aif_frames: int = 40
    aif_matrix: int = 48
    aif_dt_ms: float = 500.0
    rv_lv_delay_s: float = 4.0
    seed: int = 1234

    def validate(self):
        if any(e > d for e, d in zip(self.es_axes_mm, self.ed_axes_mm)):
            raise ValueError("ES semi-axes must not exceed ED semi-axes")
        if self.slice_ms <= 0 or self.gap_ms < 0:
            raise ValueError("pacing durations must be positive")
        if self.n_slices < 1 or self.n_phases < 2:
            raise ValueError("need at least 1 slice and 2 phases")

    def scaled_pacing(self, scale):
        return replace(self, slice_ms=self.slice_ms * scale,
                       gap_ms=self.gap_ms * scale)


@dataclass
class GroundTruth:
    """Closed-form values the verification harness checks reports against."""

    edv_ml: float = None
    esv_ml: float = None
    ef_percent: float = None
    mass_g: float = None
    ed_phase: int = None
    es_phase: int = None
    gls_percent: float = None
    mapse_mm: float = None
    tapse_mm: float = None
    sector_flows: dict = None
    mpr: dict = None
    ptt_s: float = None
    heart_rate_bpm: float = None
    bsa_m2: float = None


def phase_fraction(phase, n_phases):
    """Contraction fraction: 0 at phase 0 (ED), 1 at mid-cycle (ES)."""
    return 0.5 - 0.5 * math.cos(2.0 * math.pi * phase / n_phases)


def axes_at_phase(params, phase):
    f = phase_fraction(phase, params.n_phases)
    return tuple(ed - f * (ed - es)
                 for ed, es in zip(params.ed_axes_mm, params.es_axes_mm))


def ellipsoid_volume_ml(axes_mm):
    a, b, c = axes_mm
    return 4.0 / 3.0 * math.pi * a * b * c / 1000.0


def slice_positions_mm(params):
    offset = (params.n_slices - 1) / 2.0
    return [(s - offset) * params.slice_spacing_mm for s in range(params.n_slices)]


def _grid_mm(matrix, spacing):
    half = (matrix - 1) / 2.0
    coords = (np.arange(matrix) - half) * spacing
    return coords[:, None], coords[None, :]   # x (rows), y (cols)


def sax_slice_image(params, slice_z_mm, phase):
    """(intensity image f32, label mask u8) of one short-axis slice."""
    ax, bx, cx = axes_at_phase(params, phase)
    th = params.myo_thickness_mm
    x, y = _grid_mm(params.matrix, params.pixel_spacing_mm)

    def ellipse_r2(a, b, c):
        z2 = 1.0 - (slice_z_mm / a) ** 2
        if z2 <= 0:
            return None
        return (x / (b * math.sqrt(z2))) ** 2 + (y / (c * math.sqrt(z2))) ** 2

    labels = np.zeros((params.matrix, params.matrix), dtype=np.uint8)
    outer = ellipse_r2(ax + th, bx + th, cx + th)
    if outer is not None:
        labels[outer <= 1.0] = 2
    inner = ellipse_r2(ax, bx, cx)
    if inner is not None:
        labels[inner <= 1.0] = 1

    # RV crescent: a band hugging the shell over a fixed ccw angular arc.
    if outer is not None:
        radius = np.hypot(x, y)
        angle = np.degrees(np.arctan2(-x, y)) % 360.0
        r_out = (bx + th) * math.sqrt(max(1.0 - (slice_z_mm / (ax + th)) ** 2, 0.0))
        lo, hi = params.rv_arc_deg
        band = (outer > 1.0) & (radius <= r_out + 6.0) & (radius > r_out * 0.55)
        arc = (angle - lo) % 360.0 <= (hi - lo) % 360.0
        labels[band & arc] = 3

    image = np.zeros(labels.shape, dtype=np.float32)
    image[labels == 1] = INTENSITY["blood"]
    image[labels == 2] = INTENSITY["myo"]
    image[labels == 3] = INTENSITY["rv"]
    return image, labels


def coil_sensitivities(params, matrix, rng):
    """Smooth complex coil maps with unit root-sum-of-squares everywhere,
    so RSS reconstruction reproduces the painted intensities exactly."""
    n = params.n_coils
    half = (matrix - 1) / 2.0
    rr = (np.arange(matrix)[:, None] - half) / matrix
    cc = (np.arange(matrix)[None, :] - half) / matrix
    maps = []
    for c in range(n):
        theta = 2.0 * math.pi * c / n
        center_r = 0.6 * math.cos(theta)
        center_c = 0.6 * math.sin(theta)
        bump = np.exp(-(((rr - center_r) ** 2 + (cc - center_c) ** 2) / 0.8))
        phase = rng.uniform(0, 2 * math.pi)
        ramp = rng.uniform(-1.0, 1.0) * rr + rng.uniform(-1.0, 1.0) * cc
        maps.append((0.25 + bump) * np.exp(1j * (phase + 2.0 * ramp)))
    stack = np.stack(maps).astype(np.complex64)
    norm = np.sqrt(np.sum(np.abs(stack) ** 2, axis=0))
    return (stack / norm).astype(np.complex64)


def sax_ground_truth(params):
    volumes = [ellipsoid_volume_ml(axes_at_phase(params, p))
               for p in range(params.n_phases)]
    ed = int(np.argmax(volumes))
    es = int(np.argmin(volumes))
    edv, esv = volumes[ed], volumes[es]
    a, b, c = axes_at_phase(params, ed)
    th = params.myo_thickness_mm
    myo_ml = (ellipsoid_volume_ml((a + th, b + th, c + th))
              - ellipsoid_volume_ml((a, b, c)))
    return GroundTruth(
        edv_ml=edv, esv_ml=esv, ef_percent=100.0 * (edv - esv) / edv,
        mass_g=myo_ml * 1.05, ed_phase=ed, es_phase=es,
        heart_rate_bpm=params.heart_rate_bpm, bsa_m2=params.bsa_m2)


# ---------------------------------------------------------------------------
# Long-axis phantom
# ---------------------------------------------------------------------------

def lax_landmarks(params, phase):
    """Landmark pixel coordinates for one long-axis phase.

    The apex stays fixed; the mitral points (one image row) descend toward
    the apex by mapse * fraction(phase); tv_lat rides 10 px lateral of mv2
    with the same descent. All coordinates are in pixels of a 1 mm grid.
    """
    m = params.lax_matrix
    f = phase_fraction(phase, params.n_phases)
    descent = params.lax_mapse_mm * f

    def f32(x):  # keep coordinates exactly representable on the wire
        return float(np.float32(x))

    apex = (f32(m * 0.78), f32(m * 0.5))
    mv_row = f32(m * 0.18 + descent)
    mv1 = (mv_row, f32(m * 0.35))
    mv2 = (mv_row, f32(m * 0.65))
    tv = (mv_row, f32(m * 0.65 + 10.0))
    return {"mv1": mv1, "mv2": mv2, "apex": apex, "tv_lat": tv}


def lax_image(params, phase, view):
    """Soft ellipse painting of the LV cavity in a long-axis view."""
    m = params.lax_matrix
    marks = lax_landmarks(params, phase)
    mid = ((marks["mv1"][0] + marks["mv2"][0]) / 2.0,
           (marks["mv1"][1] + marks["mv2"][1]) / 2.0)
    apex = marks["apex"]
    rr = np.arange(m)[:, None] - (mid[0] + apex[0]) / 2.0
    cc = np.arange(m)[None, :] - (mid[1] + apex[1]) / 2.0
    length = math.hypot(apex[0] - mid[0], apex[1] - mid[1])
    body = ((rr / (length / 2.0)) ** 2 + (cc / (length / 4.0)) ** 2) <= 1.0
    image = np.zeros((m, m), dtype=np.float32)
    image[body] = INTENSITY["blood"] if view == "CH4" else 0.9
    return image


def lax_ground_truth(params):
    lengths = []
    mids = []
    apexes = []
    tvs = []
    for p in range(params.n_phases):
        marks = lax_landmarks(params, p)
        mid = np.array([(marks["mv1"][0] + marks["mv2"][0]) / 2.0,
                        (marks["mv1"][1] + marks["mv2"][1]) / 2.0, 0.0])
        apex = np.array([marks["apex"][0], marks["apex"][1], 0.0])
        tv = np.array([marks["tv_lat"][0], marks["tv_lat"][1], 0.0])
        lengths.append(float(np.linalg.norm(mid - apex)))
        mids.append(mid)
        apexes.append(apex)
        tvs.append(tv)
    ed = int(np.argmax(lengths))
    es = int(np.argmin(lengths))
    gls = 100.0 * (lengths[ed] - lengths[es]) / lengths[ed]

    def excursion(points):
        axis = apexes[ed] - points[ed]
        axis = axis / np.linalg.norm(axis)
        return float(np.dot(points[ed] - points[es], axis))

    return GroundTruth(
        ed_phase=ed, es_phase=es, gls_percent=gls,
        mapse_mm=excursion(mids), tapse_mm=excursion(tvs),
        heart_rate_bpm=params.heart_rate_bpm, bsa_m2=params.bsa_m2)


# ---------------------------------------------------------------------------
# Perfusion phantom
# ---------------------------------------------------------------------------

PERF_SLICE_CLASSES = ("basal", "mid", "apical")


def perf_slice_geometry(params, slice_class):
    m = params.perf_matrix
    base_r = {"basal": 0.26, "mid": 0.22, "apical": 0.17}[slice_class]
    blood_r = base_r * m
    outer_r = blood_r + 0.10 * m
    return blood_r, outer_r


def perf_slice_mask(params, slice_class):
    """Label mask of one perfusion slice: blood disk, myocardial annulus,
    RV crescent spanning the configured arc (its ccw end is the insertion)."""
    m = params.perf_matrix
    blood_r, outer_r = perf_slice_geometry(params, slice_class)
    half = (m - 1) / 2.0
    rr = np.arange(m)[:, None] - half
    cc = np.arange(m)[None, :] - half
    radius = np.hypot(rr, cc)
    labels = np.zeros((m, m), dtype=np.uint8)
    labels[radius <= outer_r] = 2
    labels[radius <= blood_r] = 1
    angle = np.degrees(np.arctan2(-rr, cc)) % 360.0
    lo, hi = params.rv_arc_deg
    arc = (angle - lo) % 360.0 <= (hi - lo) % 360.0
    band = (radius > outer_r) & (radius <= outer_r + 0.08 * m)
    labels[band & arc] = 3
    return labels


def perf_flow_image(params, slice_class, flows):
    """Flow map in mL/min/g: each sector painted with its target flow."""
    labels = perf_slice_mask(params, slice_class)
    m = params.perf_matrix
    half = (m - 1) / 2.0
    myo = np.argwhere(labels == 2).astype(np.float64)
    # centroid of the (symmetric) blood disk is the exact grid center
    center = np.array([half, half])
    flow = np.zeros((m, m), dtype=np.float32)
    n = SECTOR_COUNTS[slice_class]
    base = SECTOR_BASES[slice_class]
    width = 360.0 / n
    insertion = params.rv_arc_deg[1] % 360.0
    angles = np.degrees(np.arctan2(-(myo[:, 0] - center[0]),
                                   myo[:, 1] - center[1])) % 360.0
    rel = (angles - insertion) % 360.0
    idx = np.minimum((rel // width).astype(int), n - 1)
    for k in range(n):
        sector = base + k + 1
        members = myo[idx == k]
        flow[members[:, 0].astype(int), members[:, 1].astype(int)] = flows[sector]
    return flow, labels


def gamma_variate(t_s, onset_s, time_to_peak_s, alpha=3.0):
    """Unit-peak gamma-variate bolus curve, zero before onset."""
    tau = np.maximum(np.asarray(t_s, dtype=np.float64) - onset_s, 0.0) / time_to_peak_s
    return (tau ** alpha) * np.exp(alpha * (1.0 - tau))


def aif_frame_series(params):
    """(signal frames f32 [N, m, m], label masks u8, frame times ms).

    RV and LV pools are disjoint disks; the LV bolus is the RV bolus
    delayed by exactly rv_lv_delay_s (a multiple of the frame interval
    keeps the windowed-centroid transit time exact).
    """
    m = params.aif_matrix
    n = params.aif_frames
    half = (m - 1) / 2.0
    rr = np.arange(m)[:, None] - half
    cc = np.arange(m)[None, :] - half
    rv_pool = np.hypot(rr, cc + m * 0.25) <= m * 0.14
    lv_pool = np.hypot(rr, cc - m * 0.25) <= m * 0.14
    labels = np.zeros((m, m), dtype=np.uint8)
    labels[rv_pool] = 3
    labels[lv_pool] = 1

    times_ms = np.arange(n) * params.aif_dt_ms
    onset = 3.0 * params.aif_dt_ms / 1000.0
    peak_after = 2.0
    rv_curve = 80.0 * gamma_variate(times_ms / 1000.0, onset, peak_after)
    lv_curve = 80.0 * gamma_variate(times_ms / 1000.0,
                                    onset + params.rv_lv_delay_s, peak_after)
    frames = np.zeros((n, m, m), dtype=np.float32)
    baseline = 5.0
    frames += baseline
    for i in range(n):
        frames[i][rv_pool] = baseline + rv_curve[i]
        frames[i][lv_pool] = baseline + lv_curve[i]
    return frames, labels, times_ms


def perf_ground_truth(params, kind):
    flows = params.stress_flows if kind == "perf_stress" else params.rest_flows
    mpr = None
    if kind == "perf_stress":
        mpr = {k: params.stress_flows[k] / params.rest_flows[k]
               for k in range(1, 17)}
    return GroundTruth(
        sector_flows=dict(flows), mpr=mpr, ptt_s=params.rv_lv_delay_s,
        heart_rate_bpm=params.heart_rate_bpm, bsa_m2=params.bsa_m2)
