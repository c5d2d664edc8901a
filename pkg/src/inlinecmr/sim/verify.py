"""Verification of a recorded run against phantom ground truth, plus
rendering of report curves, bullseyes and mosaics to PNG."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from ..render import bullseye, plot_curves, write_png
from ..report import ReportDocument
from ..wire import Report

DEFAULT_TOLERANCES = {
    "volume_rel": 0.03,          # EDV / ESV vs analytic ellipsoid
    "ef_abs_pp": 1.0,            # EF, percentage points
    "mass_rel": 0.05,
    "gls_abs": 1e-6,
    "mapse_abs_mm": 1e-6,
    "tapse_abs_mm": 1e-6,
    "sector_flow_abs": 0.05,     # boundary pixels move with measured insertion
    "mpr_rel": 0.05,
    "ptt_abs_s": 1e-3,
}


@dataclass
class Check:
    name: str
    value: float
    expected: float
    tolerance: float
    mode: str = "abs"            # abs | rel
    passed: bool = False

    def evaluate(self):
        if self.value is None:
            self.passed = False
            return self
        err = abs(self.value - self.expected)
        bound = (self.tolerance if self.mode == "abs"
                 else self.tolerance * abs(self.expected))
        self.passed = err <= bound
        return self


@dataclass
class Verdict:
    kind: str
    checks: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and all(c.passed for c in self.checks)

    def add(self, check):
        self.checks.append(check.evaluate())

    def fail(self, text):
        self.failures.append(text)

    def to_json(self):
        return json.dumps({
            "kind": self.kind,
            "passed": self.passed,
            "failures": self.failures,
            "checks": [{
                "name": c.name, "value": c.value, "expected": c.expected,
                "tolerance": c.tolerance, "mode": c.mode, "passed": c.passed,
            } for c in self.checks],
        }, indent=2, sort_keys=True)

    def summary_text(self):
        lines = [f"verdict: {'PASS' if self.passed else 'FAIL'} ({self.kind})"]
        for c in self.checks:
            lines.append(
                f"  [{'ok' if c.passed else 'FAIL'}] {c.name}: "
                f"{c.value} vs {c.expected} (tol {c.tolerance} {c.mode})")
        for f in self.failures:
            lines.append(f"  [FAIL] {f}")
        return "\n".join(lines) + "\n"


def report_documents(received):
    return [ReportDocument.parse(m.text) for m in received
            if isinstance(m, Report)]


def _float(cell):
    try:
        return float(cell)
    except (TypeError, ValueError):
        return None


def verify_run(received, truth, kind, tolerances=None):
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    verdict = Verdict(kind=kind)
    docs = report_documents(received)
    if not docs:
        verdict.fail("no REPORT document received")
        return verdict
    doc = docs[-1]

    if kind == "sax":
        table = doc.tables.get("sax_function")
        if table is None:
            verdict.fail("report table sax_function missing")
            return verdict
        edv = _float(table.lookup("biomarker", "EDV (ml)", "value"))
        esv = _float(table.lookup("biomarker", "ESV (ml)", "value"))
        ef = _float(table.lookup("biomarker", "EF (%)", "value"))
        sv = _float(table.lookup("biomarker", "SV (ml)", "value"))
        verdict.add(Check("EDV", edv, truth.edv_ml, tol["volume_rel"], "rel"))
        verdict.add(Check("ESV", esv, truth.esv_ml, tol["volume_rel"], "rel"))
        verdict.add(Check("EF", ef, truth.ef_percent, tol["ef_abs_pp"], "abs"))
        slices = doc.tables.get("sax_slices")
        if slices is None:
            verdict.fail("report table sax_slices missing")
        else:
            for column, total in (("blood_ed_ml", edv), ("blood_es_ml", esv)):
                parts = [_float(x) for x in slices.column(column)]
                if any(p is None for p in parts):
                    verdict.fail(f"unparseable slice column {column}")
                    continue
                verdict.add(Check(f"sum({column}) == total",
                                  sum(parts), total, 0.0, "abs"))
        if sv is not None and edv is not None and esv is not None:
            verdict.add(Check("SV == EDV - ESV", sv, edv - esv, 0.0, "abs"))

    elif kind == "lax":
        table = doc.tables.get("lax_ch4")
        if table is None:
            verdict.fail("report table lax_ch4 missing")
            return verdict
        gls = _float(table.lookup("biomarker", "GL-Shortening (%)", "value"))
        mapse = _float(table.lookup("biomarker", "MAPSE (mm)", "value"))
        verdict.add(Check("GLS", gls, truth.gls_percent, tol["gls_abs"], "abs"))
        verdict.add(Check("MAPSE", mapse, truth.mapse_mm,
                          tol["mapse_abs_mm"], "abs"))
        try:
            tapse = _float(table.lookup("biomarker", "TAPSE (mm)", "value"))
            verdict.add(Check("TAPSE", tapse, truth.tapse_mm,
                              tol["tapse_abs_mm"], "abs"))
        except Exception:
            verdict.fail("TAPSE row missing from lax_ch4")

    elif kind in ("perf_rest", "perf_stress"):
        table = doc.tables.get("perf_sectors")
        if table is None:
            verdict.fail("report table perf_sectors missing")
            return verdict
        for sector in range(1, 17):
            mean = _float(table.lookup("sector", str(sector), "mean"))
            verdict.add(Check(f"sector {sector} flow", mean,
                              truth.sector_flows[sector],
                              tol["sector_flow_abs"], "abs"))
        ptt = _float(doc.info.get("ptt_s"))
        verdict.add(Check("PTT", ptt, truth.ptt_s, tol["ptt_abs_s"], "abs"))
        if kind == "perf_stress" and truth.mpr:
            mpr_table = doc.tables.get("perf_mpr")
            if mpr_table is None:
                verdict.fail("report table perf_mpr missing")
            else:
                for sector in range(1, 17):
                    ratio = _float(mpr_table.lookup("sector", str(sector), "ratio"))
                    verdict.add(Check(f"sector {sector} MPR", ratio,
                                      truth.mpr[sector], tol["mpr_rel"], "rel"))
    else:
        verdict.fail(f"unknown kind {kind!r}")
    return verdict


def render_outputs(received, out_dir):
    """Write PNGs for every curve, sector table and raster in the reports."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for doc_idx, doc in enumerate(report_documents(received)):
        prefix = f"report{doc_idx}"
        for name, points in doc.curves.items():
            raster = plot_curves({name: points}, title=name)
            path = os.path.join(out_dir, f"{prefix}_{name}.png")
            write_png(path, raster)
            written.append(path)
        table = doc.tables.get("perf_sectors")
        if table is not None:
            values = {int(r[0]): _float(r[1]) for r in table.rows}
            path = os.path.join(out_dir, f"{prefix}_bullseye_flow.png")
            write_png(path, bullseye(values, title="FLOW ML/MIN/G"))
            written.append(path)
        mpr_table = doc.tables.get("perf_mpr")
        if mpr_table is not None:
            values = {int(r[0]): _float(r[1]) for r in mpr_table.rows}
            path = os.path.join(out_dir, f"{prefix}_bullseye_mpr.png")
            write_png(path, bullseye(values, title="PERFUSION RESERVE"))
            written.append(path)
        for name, raster in doc.rasters.items():
            path = os.path.join(out_dir, f"{prefix}_{name}.png")
            write_png(path, raster)
            written.append(path)
    return written
