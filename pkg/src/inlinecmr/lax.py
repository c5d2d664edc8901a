"""Long-axis cine biomarkers from per-phase landmark sets.

The LV length at each phase is the distance from the mitral-annulus
midpoint to the apex in patient space. End-diastole / end-systole are the
phases of largest / smallest length (ties break to the lowest index).
Longitudinal shortening is the ED-to-ES fractional length decrease;
annular excursions (MAPSE, TAPSE) are the ED-to-ES displacement of the
annulus point projected on the ED long axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .artifacts import ArtifactError
from .geometry import to_patient_coords
from .report import ReportDocument

SESSION_ARTIFACT_LAX = "lax_landmarks"


class LaxError(Exception):
    pass


def _mitral_midpoint_mm(landmark_set, header):
    mv1 = to_patient_coords(landmark_set.require("mv1"), header)
    mv2 = to_patient_coords(landmark_set.require("mv2"), header)
    return (mv1 + mv2) / 2.0


def lv_length(landmark_set, header=None):
    """LV long-axis length in mm: ||midpoint(mv1, mv2) - apex||."""
    header = header or landmark_set.header
    try:
        midpoint = _mitral_midpoint_mm(landmark_set, header)
        apex = to_patient_coords(landmark_set.require("apex"), header)
    except ArtifactError as err:
        raise LaxError(str(err)) from err
    return float(np.linalg.norm(midpoint - apex))


@dataclass
class ViewReport:
    view: str
    lengths: list                  # [(trigger_time_ms, mm)] ordered by time
    gls_percent: float
    mapse_mm: float
    tapse_mm: float = None         # CH4 only, absent without tv_lat
    ed_phase: int = 0
    es_phase: int = 0


@dataclass
class LaxReport:
    views: dict = field(default_factory=dict)

    def to_document(self):
        doc = ReportDocument(kind="lax")
        for view in sorted(self.views):
            vr = self.views[view]
            table = doc.new_table(f"lax_{view.lower()}",
                                  ["biomarker", "value"])
            table.add_row("GL-Shortening (%)", vr.gls_percent)
            table.add_row("MAPSE (mm)", vr.mapse_mm)
            if vr.tapse_mm is not None:
                table.add_row("TAPSE (mm)", vr.tapse_mm)
            table.add_row("ED phase", vr.ed_phase)
            table.add_row("ES phase", vr.es_phase)
            doc.curves[f"lv_length_{view.lower()}"] = list(vr.lengths)
            led = vr.lengths[vr.ed_phase][1]
            doc.curves[f"gl_shortening_{view.lower()}"] = [
                (t, 100.0 * (led - l) / led) for t, l in vr.lengths]
        return doc


def lax_biomarkers(landmark_sets, headers=None):
    """Biomarkers for one view from its per-phase landmark sets.

    Sets are ordered by trigger time before the length curve is built, so
    ed_phase / es_phase index into that curve.
    """
    if len(landmark_sets) < 2:
        raise LaxError("need at least 2 phases")
    views = {ls.view for ls in landmark_sets}
    if len(views) != 1:
        raise LaxError(f"landmark sets mix views {sorted(views)}")
    view = views.pop()
    if headers is None:
        headers = [ls.header for ls in landmark_sets]
    order = sorted(range(len(landmark_sets)),
                   key=lambda i: landmark_sets[i].trigger_time_ms)
    sets = [landmark_sets[i] for i in order]
    hdrs = [headers[i] for i in order]

    lengths = [lv_length(ls, h) for ls, h in zip(sets, hdrs)]
    if all(l == 0.0 for l in lengths):
        raise LaxError("all LV lengths are zero")
    ed = int(np.argmax(lengths))
    es = int(np.argmin(lengths))
    led, les = lengths[ed], lengths[es]
    gls = 100.0 * (led - les) / led

    def excursion(point_of):
        p_ed = point_of(sets[ed], hdrs[ed])
        p_es = point_of(sets[es], hdrs[es])
        apex_ed = to_patient_coords(sets[ed].require("apex"), hdrs[ed])
        axis = apex_ed - p_ed
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            return 0.0
        return float(np.dot(p_ed - p_es, axis / norm))

    mapse = excursion(_mitral_midpoint_mm)
    tapse = None
    if view == "CH4" and all("tv_lat" in ls.points for ls in sets):
        tapse = excursion(
            lambda ls, h: to_patient_coords(ls.require("tv_lat"), h))

    return ViewReport(
        view=view,
        lengths=[(ls.trigger_time_ms, l) for ls, l in zip(sets, lengths)],
        gls_percent=gls, mapse_mm=mapse, tapse_mm=tapse,
        ed_phase=ed, es_phase=es)


# ---------------------------------------------------------------------------
# Cross-scan artifact for the short-axis valve plane
# ---------------------------------------------------------------------------

def landmarks_artifact(per_view_sets):
    """Serialize per-phase mitral/apex patient-space geometry for reuse.

    per_view_sets: view -> (landmark_sets, headers). The short-axis chain
    fits its valve plane from the mitral points stored here.
    """
    phases = {}
    for view, (sets, headers) in per_view_sets.items():
        for ls, header in zip(sets, headers):
            entry = phases.setdefault(ls.phase_idx, {
                "phase_idx": ls.phase_idx,
                "trigger_time_ms": ls.trigger_time_ms,
                "mitral_mm": [], "apex_mm": []})
            for name in ("mv1", "mv2"):
                entry["mitral_mm"].append(
                    [float(x) for x in to_patient_coords(ls.require(name), header)])
            entry["apex_mm"].append(
                [float(x) for x in to_patient_coords(ls.require("apex"), header)])
    body = {"phases": [phases[k] for k in sorted(phases)]}
    return json.dumps(body, sort_keys=True).encode("utf-8")


def parse_landmarks_artifact(payload):
    body = json.loads(payload.decode("utf-8"))
    return {entry["phase_idx"]: entry for entry in body["phases"]}
