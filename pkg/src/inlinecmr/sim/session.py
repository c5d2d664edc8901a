"""Session generation: deterministic ICSP message lists plus ground truth."""

from __future__ import annotations

import base64

import numpy as np

from ..config import render_chain_config
from ..recon import fft2c
from ..wire import (FLAG_LAST_IN_SCAN, FLAG_LAST_IN_SLICE, PIXEL_F32, Close,
                    ConfigInline, ImageFrame, ImageHeader, KSpaceReadout,
                    ReadoutHeader, SessionHeader)
from . import phantom

KINDS = ("sax", "lax", "perf_rest", "perf_stress")

STUB_WORKER_CMD = "{python} -m inlinecmr.stub_worker"


DEFAULT_MODELS = {
    "sax": "level_segmenter",
    "lax": "oracle_landmarks",
    "perf_rest": "oracle_segmenter",
    "perf_stress": "oracle_segmenter",
}


def default_chain_text(kind, trigger="slice", worker_cmd=STUB_WORKER_CMD,
                       model=None):
    model = model or DEFAULT_MODELS.get(kind)
    if kind == "sax":
        gadgets = [
            ("kspace_buffer", {}),
            ("trigger", {"trigger_dimension": trigger}),
            ("prepare_ref", {}),
            ("fft_recon", {}),
            ("image_buffer", {"group_by": "slice"}),
            ("inference", {"model": model, "worker_cmd": worker_cmd}),
            ("sax_analysis", {}),
        ]
    elif kind == "lax":
        gadgets = [
            ("image_buffer", {"group_by": "series"}),
            ("inference", {"model": model, "worker_cmd": worker_cmd}),
            ("lax_analysis", {}),
        ]
    elif kind in ("perf_rest", "perf_stress"):
        gadgets = [
            ("image_buffer", {"group_by": "series"}),
            ("inference", {"model": model, "worker_cmd": worker_cmd}),
            ("perf_analysis", {"rotation": "ccw"}),
        ]
    else:
        raise ValueError(f"unknown session kind {kind!r}")
    return render_chain_config("icsp", "icsp", gadgets)


def session_header_fields(params, kind, patient_key):
    fields = {
        "patient_key": patient_key,
        "scan_kind": kind,
        "heart_rate_bpm": repr(params.heart_rate_bpm),
        "bsa_m2": repr(params.bsa_m2),
        "sex": params.sex,
        "pixel_spacing_row_mm": repr(params.pixel_spacing_mm),
        "pixel_spacing_col_mm": repr(params.pixel_spacing_mm),
        "slice_thickness_mm": repr(params.slice_thickness_mm),
        "slice_spacing_mm": repr(params.slice_spacing_mm),
    }
    if kind.startswith("perf"):
        fields["respiratory_condition"] = "free breathing"
    elif kind == "sax":
        fields["respiratory_condition"] = "breath-hold per slice"
    return fields


def _mask_meta(labels):
    return base64.b64encode(np.ascontiguousarray(labels, dtype=np.uint8)
                            .tobytes()).decode("ascii")


def generate_session(kind, params=None, seed=None, trigger="slice",
                     patient_key="sim-patient", worker_cmd=STUB_WORKER_CMD,
                     model=None):
    """Ordered ICSP message list + GroundTruth for one synthetic scan.

    Fully deterministic for a fixed (kind, params, seed): generating the
    same session twice yields byte-identical messages.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown session kind {kind!r}")
    params = params or phantom.PhantomParams()
    if seed is not None:
        params = phantom.replace(params, seed=seed)
    params.validate()

    messages = [ConfigInline(default_chain_text(kind, trigger, worker_cmd,
                                                model)),
                SessionHeader(session_header_fields(params, kind, patient_key))]
    if kind == "sax":
        body, truth = _sax_messages(params)
    elif kind == "lax":
        body, truth = _lax_messages(params)
    else:
        body, truth = _perf_messages(params, kind)
    messages.extend(body)
    messages.append(Close())
    return messages, truth


def _sax_messages(params):
    rng = np.random.RandomState(params.seed)
    sens = phantom.coil_sensitivities(params, params.matrix, rng)
    rr_ms = 60000.0 / params.heart_rate_bpm
    positions = phantom.slice_positions_mm(params)
    half = (params.matrix - 1) / 2.0
    messages = []
    scan_counter = 0
    for s, z_mm in enumerate(positions):
        for p in range(params.n_phases):
            image, _ = phantom.sax_slice_image(params, z_mm, p)
            kspace = fft2c(sens * image[None, :, :].astype(np.complex64))
            trigger_ns = int(p * rr_ms / params.n_phases * 1e6)
            last_phase = p == params.n_phases - 1
            for kline in range(params.matrix):
                scan_counter += 1
                flags = 0
                if kline == params.matrix - 1 and last_phase:
                    flags |= FLAG_LAST_IN_SLICE
                    if s == params.n_slices - 1:
                        flags |= FLAG_LAST_IN_SCAN
                header = ReadoutHeader(
                    flags=flags, scan_counter=scan_counter,
                    num_samples=params.matrix, num_coils=params.n_coils,
                    kline_idx=kline, slice_idx=s, phase_idx=p,
                    sample_time_ns=trigger_ns,
                    position_mm=(-half * params.pixel_spacing_mm,
                                 -half * params.pixel_spacing_mm, z_mm),
                    read_dir=(0.0, 1.0, 0.0),     # columns
                    phase_dir=(1.0, 0.0, 0.0),    # rows (phase encode)
                    slice_dir=(0.0, 0.0, 1.0))
                messages.append(KSpaceReadout(
                    header, np.ascontiguousarray(kspace[:, kline, :])))
    return messages, phantom.sax_ground_truth(params)


def _image_header(params, matrix, series, slice_idx, p, trigger_ms,
                  spacing=1.0, z_mm=0.0):
    half = (matrix - 1) / 2.0
    return ImageHeader(
        series_idx=series, slice_idx=slice_idx, phase_idx=p,
        rows=matrix, cols=matrix, data_type=PIXEL_F32,
        pixel_spacing_mm=(spacing, spacing),
        slice_thickness_mm=params.slice_thickness_mm,
        slice_spacing_mm=max(params.slice_spacing_mm,
                             params.slice_thickness_mm),
        trigger_time_ms=trigger_ms,
        position_mm=(-half * spacing, -half * spacing, z_mm),
        row_dir=(1.0, 0.0, 0.0), col_dir=(0.0, 1.0, 0.0))


def _lax_header(params, view, series, phase, trigger_ms):
    """Long-axis view planes: both contain the LV long axis (z); CH4 spans
    y-z, CH2 spans x-z. Image rows run along +z so the apex (high row)
    sits apically; the mitral row maps to a z just below the short-axis
    stack, keeping valve-plane slice inclusion trivially all-inclusive for
    the synthetic anatomy."""
    m = params.lax_matrix
    half = (m - 1) / 2.0
    stack_half = (params.n_slices - 1) / 2.0 * params.slice_spacing_mm
    z_valve = -(stack_half + params.lax_mapse_mm + 3.0)
    z0 = z_valve - params.lax_matrix * 0.18
    if view == "CH4":
        row_dir, col_dir = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)
        position = (0.0, -half, z0)
    else:
        row_dir, col_dir = (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)
        position = (-half, 0.0, z0)
    return ImageHeader(
        series_idx=series, slice_idx=0, phase_idx=phase,
        rows=m, cols=m, data_type=PIXEL_F32,
        pixel_spacing_mm=(1.0, 1.0),
        slice_thickness_mm=params.slice_thickness_mm,
        slice_spacing_mm=max(params.slice_spacing_mm,
                             params.slice_thickness_mm),
        trigger_time_ms=trigger_ms, position_mm=position,
        row_dir=row_dir, col_dir=col_dir)


def _lax_messages(params):
    rr_ms = 60000.0 / params.heart_rate_bpm
    messages = []
    for series, view in enumerate(("CH4", "CH2")):
        for p in range(params.n_phases):
            marks = phantom.lax_landmarks(params, p)
            names = ["mv1", "mv2", "apex"]
            if view == "CH4":
                names.append("tv_lat")
            encoded = ";".join(
                f"{name}:{marks[name][0]!r},{marks[name][1]!r}"
                for name in names)
            header = _lax_header(params, view, series, p,
                                 trigger_ms=p * rr_ms / params.n_phases)
            meta = [("role", "cine"), ("view", view),
                    ("gt_landmarks", encoded)]
            messages.append(ImageFrame(header, meta,
                                       phantom.lax_image(params, p, view)))
    return messages, phantom.lax_ground_truth(params)


def _perf_messages(params, kind):
    flows = (params.stress_flows if kind == "perf_stress"
             else params.rest_flows)
    messages = []
    aif_frames, aif_labels, times_ms = phantom.aif_frame_series(params)
    for i in range(aif_frames.shape[0]):
        header = _image_header(params, params.aif_matrix, 0, 0, i,
                               trigger_ms=float(times_ms[i]))
        meta = [("role", "aif"), ("perf_role", "aif"),
                ("gt_mask", _mask_meta(aif_labels))]
        messages.append(ImageFrame(header, meta, aif_frames[i]))
    for s, slice_class in enumerate(phantom.PERF_SLICE_CLASSES):
        flow, labels = phantom.perf_flow_image(params, slice_class, flows)
        header = _image_header(params, params.perf_matrix, 1, s, 0,
                               trigger_ms=0.0, z_mm=10.0 * s)
        meta = [("role", "flow"), ("perf_role", "flow"),
                ("slice_class", slice_class),
                ("gt_mask", _mask_meta(labels))]
        messages.append(ImageFrame(header, meta, flow))
    return messages, phantom.perf_ground_truth(params, kind)
