"""Built-in conformance stub worker.

A minimal model worker used for test isolation: it speaks the worker
tensor protocol over stdio and serves echo-style models only, so the
server's plumbing can be exercised without any inference runtime.

Models:
  identity          echo all input tensors unchanged
  level_segmenter   quantize frame intensities at fixed level cutpoints
                    into background / LV blood / myocardium / RV blood
                    (the simulator paints phantoms at exactly these levels)
  oracle_segmenter  echo the "gt_masks" tensor as "mask"
  oracle_landmarks  echo "gt_landmarks" + "landmark_names"

Run: python -m inlinecmr.stub_worker
"""

from __future__ import annotations

import sys

import numpy as np

from .bridge import (WORKER_INFER, WORKER_LOAD, WORKER_LOAD_ACK, WORKER_RESULT,
                     WORKER_SHUTDOWN, decode_infer, decode_load,
                     encode_load_ack, encode_result, encode_worker_frame,
                     read_worker_frame)

# Fixed intensity cutpoints for level_segmenter; the phantom paints pure
# levels (blood 1.0, myocardium 0.6, RV 0.35, background 0) and the FFT
# round-trip reproduces them to ~1e-6, so these are unambiguous.
LEVELS = {
    "blood_min": 0.8,
    "myo_min": 0.45,
    "rv_min": 0.2,
}


def segment_levels(frames, levels=LEVELS):
    data = np.asarray(frames, dtype=np.float64)
    labels = np.zeros(data.shape, dtype=np.uint8)
    labels[data > levels["rv_min"]] = 3
    labels[data > levels["myo_min"]] = 2
    labels[data > levels["blood_min"]] = 1
    return labels


def _infer(model_id, params, tensors):
    if model_id == "identity":
        return dict(tensors)
    if model_id == "level_segmenter":
        levels = dict(LEVELS)
        for key in levels:
            if key in params:
                levels[key] = float(params[key])
        return {"mask": segment_levels(tensors["frames"], levels)}
    if model_id == "oracle_segmenter":
        if "gt_masks" not in tensors:
            raise ValueError("oracle_segmenter needs a gt_masks input tensor")
        return {"mask": np.asarray(tensors["gt_masks"], dtype=np.uint8)}
    if model_id == "oracle_landmarks":
        if "gt_landmarks" not in tensors:
            raise ValueError("oracle_landmarks needs a gt_landmarks tensor")
        return {"landmarks": tensors["gt_landmarks"],
                "landmark_names": tensors["landmark_names"]}
    raise ValueError(f"unknown model {model_id!r}")


KNOWN_MODELS = ("identity", "level_segmenter", "oracle_segmenter",
                "oracle_landmarks")


def serve(stdin, stdout):
    """Single-threaded request loop; exits 0 on SHUTDOWN, 2 on a framing
    error before any model was loaded."""
    loaded = None
    params = {}

    def read_exact(n):
        out = bytearray()
        while len(out) < n:
            chunk = stdin.read(n - len(out))
            if not chunk:
                raise EOFError("input stream closed")
            out.extend(chunk)
        return bytes(out)

    def send(frame_id, payload):
        stdout.write(encode_worker_frame(frame_id, payload))
        stdout.flush()

    while True:
        try:
            frame_id, payload = read_worker_frame(read_exact)
        except EOFError:
            return 0 if loaded is not None else 2
        if frame_id == WORKER_LOAD:
            model_id, device, load_params = decode_load(payload)
            if loaded is not None:
                send(WORKER_LOAD_ACK, encode_load_ack(
                    False, "a model is already loaded in this worker"))
                continue
            if device not in (None, "cpu"):
                send(WORKER_LOAD_ACK,
                     encode_load_ack(False, f"device unsupported: {device}"))
                continue
            if model_id not in KNOWN_MODELS:
                send(WORKER_LOAD_ACK,
                     encode_load_ack(False, f"unknown model {model_id!r}"))
                continue
            loaded = model_id
            params = load_params
            send(WORKER_LOAD_ACK, encode_load_ack(True, f"loaded {model_id}"))
        elif frame_id == WORKER_INFER:
            request_id, tensors = decode_infer(payload)
            if loaded is None:
                send(WORKER_RESULT,
                     encode_result(request_id, error="no model loaded"))
                continue
            try:
                outputs = _infer(loaded, params, tensors)
                send(WORKER_RESULT, encode_result(request_id, outputs))
            except Exception as err:
                send(WORKER_RESULT, encode_result(request_id, error=str(err)))
        elif frame_id == WORKER_SHUTDOWN:
            return 0
        else:
            if loaded is None:
                return 2
            # mid-session garbage: report and keep serving
            sys.stderr.write(f"stub worker: unknown frame id {frame_id}\n")


def main():
    return serve(sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    raise SystemExit(main())
