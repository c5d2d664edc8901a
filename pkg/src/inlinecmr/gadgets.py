"""Concrete gadgets and the default registry.

The image-analysis chain mirrors the streaming layout
kspace_buffer -> trigger -> prepare_ref -> fft_recon -> image_buffer ->
inference -> <application analysis>, where the analysis gadget is one of
sax_analysis, lax_analysis or perf_analysis. Image-domain chains skip the
k-space stages and start at image_buffer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import lax as lax_mod
from . import perf as perf_mod
from . import sax as sax_mod
from .artifacts import LABEL_LV_BLOOD, LABEL_RV_BLOOD
from .bridge import (WorkerClient, WorkerError, artifacts_from_tensors,
                     group_to_tensors)
from .chain import AssemblyError, Gadget, GadgetRegistry
from .recon import ReconGeometry, recon_bucket
from .stages import (GroupState, ImageGroup, KSpaceBucket, TriggerState,
                     image_group_ingest, prepare_ref, trigger_ingest)
from .wire import ImageFrame, KSpaceReadout

log = logging.getLogger(__name__)


@dataclass
class InferredGroup:
    """An image group annotated with worker outputs."""

    group: ImageGroup
    masks: list = None
    landmarks: list = None


class KSpaceBufferGadget(Gadget):
    """Admission stage for readouts; grouping itself lives in trigger."""

    name = "kspace_buffer"

    def process(self, item):
        yield item


class TriggerGadget(Gadget):
    name = "trigger"

    def configure(self, properties, context):
        self.state = TriggerState(properties.get("trigger_dimension", "none"))

    def process(self, item):
        if isinstance(item, KSpaceReadout):
            yield from trigger_ingest(item, self.state)
        else:
            yield item

    def flush(self):
        from .stages import END_OF_STREAM
        return trigger_ingest(END_OF_STREAM, self.state)


class PrepareRefGadget(Gadget):
    name = "prepare_ref"

    def process(self, item):
        if isinstance(item, KSpaceBucket):
            imaging, calibration = prepare_ref(item)
            if len(calibration):
                log.info("dropping %d calibration readouts of group %s "
                         "(no parallel-imaging stage configured)",
                         len(calibration), item.key)
            if len(imaging):
                yield imaging
        else:
            yield item


class FftReconGadget(Gadget):
    name = "fft_recon"

    def configure(self, properties, context):
        self.geometry = ReconGeometry.from_session(context.session_header)

    def process(self, item):
        if isinstance(item, KSpaceBucket):
            yield from recon_bucket(item, self.geometry)
        else:
            yield item


class ImageBufferGadget(Gadget):
    name = "image_buffer"

    def configure(self, properties, context):
        self.state = GroupState(properties.get("group_by", "slice"))

    def process(self, item):
        if isinstance(item, ImageFrame):
            yield from image_group_ingest(item, self.state)
        else:
            yield item

    def flush(self):
        from .stages import END_OF_STREAM
        return image_group_ingest(END_OF_STREAM, self.state)


class InferenceGadget(Gadget):
    """Runs the configured model on every image group.

    The model loads exactly once, while the chain is being configured;
    inference requests are serialized per worker in issue order.
    """

    name = "inference"

    def __init__(self):
        self.worker = None

    def configure(self, properties, context):
        model = properties.get("model")
        if not model:
            raise AssemblyError("inference gadget needs a 'model' property")
        device = properties.get("device", "cpu")
        self.timeout_s = float(properties.get("infer_timeout_ms", 60000)) / 1000.0
        self.threshold = float(properties.get("threshold", 0.5))
        params = {key[6:]: value for key, value in properties.items()
                  if key.startswith("model.")}
        try:
            self.worker = WorkerClient(
                worker_cmd=properties.get("worker_cmd"),
                worker_endpoint=properties.get("worker_endpoint"))
            self.worker.load(model, device, params)
        except WorkerError as err:
            if self.worker is not None:
                self.worker.shutdown()
                self.worker = None
            raise AssemblyError(str(err)) from err

    def process(self, item):
        if not isinstance(item, ImageGroup):
            yield item
            return
        tensors = group_to_tensors(item)
        outputs = self.worker.infer(tensors, timeout_s=self.timeout_s)
        masks, landmarks = artifacts_from_tensors(outputs, item, self.threshold)
        yield InferredGroup(item, masks, landmarks)

    def teardown(self):
        if self.worker is not None:
            self.worker.shutdown()
            self.worker = None


def _parse_normal_ranges(path, sex):
    """Optional server-side normal-range table: INI-ish sections keyed by
    sex with name=range lines; [default] is the fallback."""
    ranges = {}
    section = "default"
    chosen = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1].strip().lower()
                    continue
                key, _, value = line.partition("=")
                ranges.setdefault(section, {})[key.strip()] = value.strip()
    except OSError as err:
        log.warning("normal-range table %s unreadable: %s", path, err)
        return {}
    chosen.update(ranges.get("default", {}))
    if sex:
        chosen.update(ranges.get(sex.lower(), {}))
    return chosen


class SaxAnalysisGadget(Gadget):
    """Accumulates per-slice mask groups, then reports function biomarkers,
    wall thickness and review mosaics at end of stream.

    Reconstructed frames stream through immediately; only the analysis
    itself waits for the full stack. Valve-plane slice inclusion uses the
    long-axis artifact from the session store when one exists.
    """

    name = "sax_analysis"

    def configure(self, properties, context):
        self.context = context
        self.masks_by_slice = {}
        self.frames_by_slice = {}
        self.emit_masks = properties.get("emit_masks", "true") == "true"
        sex = context.session_value("sex")
        ranges_path = properties.get("normal_ranges_file")
        self.normal_ranges = (_parse_normal_ranges(ranges_path, sex)
                              if ranges_path else {})

    def process(self, item):
        if not isinstance(item, InferredGroup):
            yield item
            return
        slice_idx = item.group.key
        self.frames_by_slice[slice_idx] = list(item.group.frames)
        self.masks_by_slice[slice_idx] = list(item.masks or [])
        for frame in item.group.frames:
            yield frame
        if self.emit_masks and item.masks:
            for mask in item.masks:
                yield mask.to_frame()

    def flush(self):
        if not self.masks_by_slice:
            return
        slices = sorted(self.masks_by_slice)
        n_phases = min(len(self.masks_by_slice[s]) for s in slices)
        mask_stacks = [[self.masks_by_slice[s][p] for s in slices]
                       for p in range(n_phases)]

        lax_phases = None
        patient = self.context.session_value("patient_key")
        if patient and self.context.store is not None:
            payload = self.context.store.get(patient, lax_mod.SESSION_ARTIFACT_LAX)
            if payload is not None:
                lax_phases = lax_mod.parse_landmarks_artifact(payload)
        heart_rate = self.context.session_header.get_float("heart_rate_bpm")
        bsa = self.context.session_header.get_float("bsa_m2")

        report = sax_mod.sax_biomarkers(
            mask_stacks, lax_phases, heart_rate, bsa, self.normal_ranges)
        for i, s in enumerate(slices):
            if not report.included_ed[i]:
                continue
            try:
                report.wall_thickness_mm.append(
                    sax_mod.max_wall_thickness(mask_stacks[report.ed_phase][i]))
            except sax_mod.SaxError:
                report.wall_thickness_mm.append(None)

        ed, es = report.ed_phase, report.es_phase
        for phase, tag in ((ed, "ed"), (es, "es")):
            frames = [self.frames_by_slice[s][phase] for s in slices
                      if phase < len(self.frames_by_slice[s])]
            masks = [self.masks_by_slice[s][phase] for s in slices
                     if phase < len(self.masks_by_slice[s])]
            labels = []
            for i, s in enumerate(slices):
                blood = (report.slice_blood_ed_ml if tag == "ed"
                         else report.slice_blood_es_ml)[i]
                myo_g = report.slice_myo_ed_ml[i] * sax_mod.MYO_DENSITY_G_PER_ML
                labels.append(f"S{s} {blood:.1f}ML {myo_g:.1f}G")
            report.rasters[f"{tag}_mosaic"] = sax_mod.render_mosaic(
                frames, masks, labels)

        info = {}
        for key in ("heart_rate_bpm", "bsa_m2", "patient_key", "scan_kind", "sex"):
            value = self.context.session_value(key)
            if value is not None:
                info[key] = value
        yield report.to_document(info)


class LaxAnalysisGadget(Gadget):
    """Collects per-view landmark sets, reports long-axis biomarkers and
    stores the mitral/apex geometry for the short-axis valve plane."""

    name = "lax_analysis"

    def configure(self, properties, context):
        self.context = context
        self.by_view = {}

    def process(self, item):
        if not isinstance(item, InferredGroup):
            yield item
            return
        if item.landmarks:
            sets = item.landmarks
            view = sets[0].view or f"series{item.group.key}"
            headers = [f.header for f in item.group.frames]
            self.by_view[view] = (sets, headers)
        for frame in item.group.frames:
            yield frame

    def flush(self):
        if not self.by_view:
            return
        report = lax_mod.LaxReport()
        for view, (sets, headers) in self.by_view.items():
            report.views[view] = lax_mod.lax_biomarkers(sets, headers)
        patient = self.context.session_value("patient_key")
        if patient and self.context.store is not None:
            self.context.store.put(
                patient, lax_mod.SESSION_ARTIFACT_LAX,
                lax_mod.landmarks_artifact(self.by_view))
        doc = report.to_document()
        for key in ("heart_rate_bpm", "patient_key", "scan_kind"):
            value = self.context.session_value(key)
            if value is not None:
                doc.info[key] = value
        yield doc


class PerfAnalysisGadget(Gadget):
    """Perfusion analysis over one scan (rest or stress).

    Flow-map groups carry meta perf_role=flow plus slice_class; the AIF
    time series carries perf_role=aif. Rest scans store their sector means
    so a later stress scan of the same patient can report perfusion
    reserve.
    """

    name = "perf_analysis"

    def configure(self, properties, context):
        self.context = context
        self.rotation = properties.get("rotation", "ccw")
        self.ptt_method = properties.get("ptt_method", "centroid")
        self.flow = []       # (frame, mask, slice_class)
        self.aif = []        # (frame, mask)

    def process(self, item):
        if not isinstance(item, InferredGroup):
            yield item
            return
        frames = item.group.frames
        masks = item.masks or [None] * len(frames)
        role = frames[0].meta_value("perf_role", "flow") if frames else "flow"
        for frame, mask in zip(frames, masks):
            if role == "aif":
                self.aif.append((frame, mask))
            else:
                self.flow.append(
                    (frame, mask, frame.meta_value("slice_class", "mid")))
            yield frame

    def flush(self):
        if not self.flow:
            return
        scan_kind = self.context.session_value("scan_kind", "perf")
        sector_means = {}
        layer_means = {}
        for frame, mask, slice_class in self.flow:
            if mask is None:
                raise perf_mod.PerfError("flow frame arrived without a mask")
            flow_px = np.asarray(frame.pixels)
            myo = np.asarray(mask.labels) == 2
            if myo.any() and float(flow_px[myo].min()) < 0:
                raise perf_mod.PerfError(
                    "negative flow values inside the myocardium")
            _, insertion = perf_mod.find_rv_insertion(mask)
            sectors = perf_mod.split_sectors(mask, insertion, slice_class,
                                             self.rotation)
            layers = perf_mod.split_endo_epi(mask)
            means, lmeans = perf_mod.sector_stats(
                np.asarray(frame.pixels), sectors, layers)
            for sector, value in means.items():
                if value is not None:
                    sector_means[sector] = value
            for key, value in lmeans.items():
                if value is not None:
                    layer_means[key] = value

        aif_curves = None
        if len(self.aif) >= 8:
            frames = [f for f, _ in self.aif]
            rv = [np.asarray(m.labels) == LABEL_RV_BLOOD for _, m in self.aif]
            lv = [np.asarray(m.labels) == LABEL_LV_BLOOD for _, m in self.aif]
            times = [f.header.trigger_time_ms for f in frames]
            aif_curves = perf_mod.aif_and_ptt(frames, rv, lv, times,
                                              self.ptt_method)

        mpr = None
        flags = []
        patient = self.context.session_value("patient_key")
        if patient and self.context.store is not None:
            if scan_kind == "perf_rest":
                self.context.store.put(
                    patient, perf_mod.SESSION_ARTIFACT_REST_SECTORS,
                    perf_mod.serialize_sector_means(sector_means))
            elif scan_kind == "perf_stress":
                payload = self.context.store.get(
                    patient, perf_mod.SESSION_ARTIFACT_REST_SECTORS)
                if payload is not None:
                    rest = perf_mod.parse_sector_means(payload)
                    mpr = perf_mod.perfusion_reserve(sector_means, rest)
                else:
                    flags.append("no rest scan found, perfusion reserve omitted")

        info = {}
        for key in ("heart_rate_bpm", "patient_key", "scan_kind",
                    "respiratory_condition"):
            value = self.context.session_value(key)
            if value is not None:
                info[key] = value
        report = perf_mod.PerfReport(
            scan_kind=scan_kind, sector_means=sector_means,
            layer_means=layer_means, mpr=mpr, aif=aif_curves,
            info=info, flags=flags)
        yield report.to_document()


def build_default_registry():
    registry = GadgetRegistry()
    for cls in (KSpaceBufferGadget, TriggerGadget, PrepareRefGadget,
                FftReconGadget, ImageBufferGadget, InferenceGadget,
                SaxAnalysisGadget, LaxAnalysisGadget, PerfAnalysisGadget):
        registry.register(cls.name, cls)
    return registry
