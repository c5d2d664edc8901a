"""Secondary acceptance: conformance fixtures, bit-exact identity INFER,
and the end-to-end short-axis run through the serving stack, consumed
purely through its external interfaces (the worker protocol and the
inline-sim CLI)."""

import io
import json
import os
import subprocess
import sys

import numpy as np

from cmr_worker_sdk import protocol
from cmr_worker_sdk.models import build_catalog
from cmr_worker_sdk.server import serve_worker


def report(name, passed, detail=""):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}"
          + (f": {detail}" if detail else ""))
    assert passed, f"{name}: {detail}"


def test_conformance_fixture_suite(worker_fixture_paths):
    input_path, reply_path = worker_fixture_paths
    with open(input_path, "rb") as fh:
        request = fh.read()
    with open(reply_path, "rb") as fh:
        expected = fh.read()
    out = io.BytesIO()
    code = serve_worker(build_catalog(), io.BytesIO(request), out)
    report("worker SDK passes the shared conformance fixtures",
           code == 0 and out.getvalue() == expected,
           f"exit {code}, reply {'==' if out.getvalue() == expected else '!='} golden")


def test_identity_infer_bit_exact(rng):
    tensors = {
        "frames": rng.standard_normal((4, 9, 9)).astype(np.float32),
        "ids": np.arange(4, dtype=np.int32),
        "bytes": rng.randint(0, 255, 16).astype(np.uint8),
    }
    stream = b"".join([
        protocol.encode_frame(protocol.LOAD, protocol.encode_load("identity")),
        protocol.encode_frame(protocol.INFER,
                              protocol.encode_infer(5, tensors)),
        protocol.encode_frame(protocol.SHUTDOWN),
    ])
    out = io.BytesIO()
    assert serve_worker(build_catalog(), io.BytesIO(stream), out) == 0
    blob = out.getvalue()

    def read_exact_factory(buf):
        view = io.BytesIO(buf)
        return lambda n: view.read(n)

    read = read_exact_factory(blob)
    frame_id, _ = protocol.read_frame(read)
    assert frame_id == protocol.LOAD_ACK
    frame_id, payload = protocol.read_frame(read)
    assert frame_id == protocol.RESULT
    _, outputs, error = protocol.decode_result(payload)
    ok = error is None and all(
        np.array_equal(outputs[k].view(np.uint8), v.view(np.uint8))
        and outputs[k].dtype == v.dtype
        for k, v in tensors.items())
    report("identity-model INFER round-trip bit-exact", ok)


def _run_sim(out_dir, model, worker_cmd=None):
    # slice coverage (+-36 mm) stays inside the end-systolic blood extent
    # (+-40 mm): a relative intensity threshold needs a visible cavity in
    # every frame, which clinical slice prescriptions also aim for
    cmd = [sys.executable, "-m", "inlinecmr.sim.cli", "run",
           "--kind", "sax", "--endpoint", "local", "--seed", "77",
           "--out", out_dir,
           "--params", json.dumps({
               "n_slices": 9, "n_phases": 6, "matrix": 96, "n_coils": 2,
               "pixel_spacing_mm": 1.5, "slice_thickness_mm": 8.0,
               "slice_spacing_mm": 9.0})]
    if model:
        cmd += ["--model", model]
    if worker_cmd:
        cmd += ["--worker-cmd", worker_cmd]
    subprocess.run(cmd, check=True, capture_output=True, timeout=300)


def _ef_from_report(out_dir):
    """Minimal parse of the report document's sax_function table (the
    document format is part of the serving stack's external interface)."""
    with open(os.path.join(out_dir, "report_0.txt"), encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    in_table = False
    columns = []
    for line in lines:
        if line == "[table.sax_function]":
            in_table = True
            continue
        if in_table and line.startswith("columns="):
            columns = line[len("columns="):].split("|")
        elif in_table and line.startswith("row="):
            cells = line[len("row="):].split("|")
            if cells[columns.index("biomarker")] == "EF (%)":
                return float(cells[columns.index("value")])
        elif line.startswith("["):
            in_table = False
    raise AssertionError("EF row not found in report")


def test_sax_end_to_end_threshold_vs_oracle(tmp_path):
    oracle_dir = str(tmp_path / "oracle")
    threshold_dir = str(tmp_path / "threshold")
    _run_sim(oracle_dir, model=None)   # built-in level-quantizing worker
    _run_sim(threshold_dir, model="threshold_segmenter",
             worker_cmd="{python} -m cmr_worker_sdk.cli --models builtin")
    ef_oracle = _ef_from_report(oracle_dir)
    ef_threshold = _ef_from_report(threshold_dir)
    delta = abs(ef_threshold - ef_oracle)
    report("threshold_segmenter EF within 5 points of oracle EF",
           delta <= 5.0,
           f"EF {ef_threshold:.2f} vs oracle {ef_oracle:.2f} "
           f"(delta {delta:.2f}pp <= 5)")
