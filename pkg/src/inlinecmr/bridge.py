"""Model-worker bridge: the analysis chain's model side.

Models run in an external worker process (child over stdio by default, TCP
for persistent workers). The worker speaks a framed tensor protocol with
the same length/id framing as the client wire:

    LOAD (1)      key=value lines: model_id, device, param.<name>
    LOAD_ACK (2)  u8 ok + UTF-8 text
    INFER (3)     u32 request_id + u16 tensor_count + tensors
    RESULT (4)    u32 request_id + u8 ok + (tensors | UTF-8 error)
    SHUTDOWN (5)  empty

    tensor: u16 name_len + name + u8 dtype + u8 ndim + u32 dims[ndim]
            + row-major little-endian data
    dtype:  1 = f32, 2 = f64, 3 = u8, 4 = i32

A model is loaded exactly once per chain, during gadget configuration;
INFER calls on one worker are serialized in issue order and matched to
RESULT frames by request id.
"""

from __future__ import annotations

import base64
import logging
import select
import shlex
import socket
import struct
import subprocess
import sys
import threading
import time

import numpy as np

from .artifacts import LandmarkSet, SegmentationMask
from .recon import label_from_probability
from .wire import PIXEL_F32, PIXEL_U16, ImageHeader

log = logging.getLogger(__name__)

WORKER_LOAD = 1
WORKER_LOAD_ACK = 2
WORKER_INFER = 3
WORKER_RESULT = 4
WORKER_SHUTDOWN = 5

DTYPE_F32 = 1
DTYPE_F64 = 2
DTYPE_U8 = 3
DTYPE_I32 = 4

_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_F64: np.dtype("<f8"),
    DTYPE_U8: np.dtype("u1"),
    DTYPE_I32: np.dtype("<i4"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

DEFAULT_LOAD_TIMEOUT_S = 30.0
DEFAULT_INFER_TIMEOUT_S = 60.0
SHUTDOWN_GRACE_S = 5.0


class WorkerError(Exception):
    pass


class TensorError(WorkerError):
    pass


def encode_tensor(name, array):
    array = np.asarray(array)
    dtype = np.dtype(array.dtype).newbyteorder("<")
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise TensorError(f"unsupported tensor dtype {array.dtype}")
    name_bytes = name.encode("utf-8")
    head = struct.pack("<H", len(name_bytes)) + name_bytes
    head += struct.pack("<BB", code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.astype(dtype, copy=False).tobytes()  # C order


def decode_tensor(buf, offset=0):
    (name_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    name = bytes(buf[offset:offset + name_len]).decode("utf-8")
    offset += name_len
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise TensorError(f"unknown tensor dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    offset += nbytes
    return name, data.reshape(dims).copy(), offset


def encode_tensors(tensors):
    parts = [struct.pack("<H", len(tensors))]
    for name, array in tensors.items():
        parts.append(encode_tensor(name, array))
    return b"".join(parts)


def decode_tensors(buf, offset=0):
    (count,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    tensors = {}
    for _ in range(count):
        name, array, offset = decode_tensor(buf, offset)
        tensors[name] = array
    return tensors, offset


def encode_worker_frame(frame_id, payload):
    return struct.pack("<IH", 2 + len(payload), frame_id) + payload


def read_worker_frame(read_exact):
    head = read_exact(6)
    length, frame_id = struct.unpack("<IH", head)
    payload = read_exact(length - 2) if length > 2 else b""
    return frame_id, payload


def encode_load(model_id, device, params):
    lines = [f"model_id={model_id}", f"device={device}"]
    for key, value in sorted(params.items()):
        lines.append(f"param.{key}={value}")
    return "\n".join(lines).encode("utf-8")


def decode_load(payload):
    model_id = device = None
    params = {}
    for line in payload.decode("utf-8").split("\n"):
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "model_id":
            model_id = value
        elif key == "device":
            device = value
        elif key.startswith("param."):
            params[key[len("param."):]] = value
    return model_id, device, params


def encode_infer(request_id, tensors):
    return struct.pack("<I", request_id) + encode_tensors(tensors)


def decode_infer(payload):
    (request_id,) = struct.unpack_from("<I", payload)
    tensors, _ = decode_tensors(payload, 4)
    return request_id, tensors


def encode_result(request_id, tensors=None, error=None):
    if error is not None:
        return struct.pack("<IB", request_id, 0) + error.encode("utf-8")
    return struct.pack("<IB", request_id, 1) + encode_tensors(tensors)


def decode_result(payload):
    request_id, ok = struct.unpack_from("<IB", payload)
    if not ok:
        return request_id, None, bytes(payload[5:]).decode("utf-8")
    tensors, _ = decode_tensors(payload, 5)
    return request_id, tensors, None


def encode_load_ack(ok, text=""):
    return struct.pack("<B", 1 if ok else 0) + text.encode("utf-8")


def decode_load_ack(payload):
    ok = payload[0] == 1
    return ok, bytes(payload[1:]).decode("utf-8")


# ---------------------------------------------------------------------------
# Worker transports and client
# ---------------------------------------------------------------------------

# All spawned worker processes, for leak checks in tests.
_spawned_workers = []
_spawned_lock = threading.Lock()


def live_worker_count():
    with _spawned_lock:
        return sum(1 for proc in _spawned_workers if proc.poll() is None)


class _StdioTransport:
    def __init__(self, command):
        self.proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        with _spawned_lock:
            _spawned_workers.append(self.proc)

    def write(self, data):
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def read_exact(self, n, deadline):
        out = bytearray()
        fd = self.proc.stdout.fileno()
        while len(out) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise WorkerError("timed out waiting for worker reply")
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
            if not ready:
                if self.proc.poll() is not None:
                    raise WorkerError(
                        f"worker exited with code {self.proc.returncode}")
                continue
            chunk = self.proc.stdout.read1(n - len(out))
            if not chunk:
                raise WorkerError("worker closed its output stream")
            out.extend(chunk)
        return bytes(out)

    def close(self, grace_s=SHUTDOWN_GRACE_S):
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=grace_s)
        except subprocess.TimeoutExpired:
            log.warning("worker did not exit within %.1fs, killing", grace_s)
            self.proc.kill()
            self.proc.wait()

    @property
    def alive(self):
        return self.proc.poll() is None


class _SocketTransport:
    def __init__(self, endpoint):
        host, _, port = endpoint.rpartition(":")
        self.sock = socket.create_connection((host or "127.0.0.1", int(port)))

    def write(self, data):
        self.sock.sendall(data)

    def read_exact(self, n, deadline):
        out = bytearray()
        while len(out) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise WorkerError("timed out waiting for worker reply")
            self.sock.settimeout(min(remaining, 0.5))
            try:
                chunk = self.sock.recv(n - len(out))
            except socket.timeout:
                continue
            if not chunk:
                raise WorkerError("worker closed the connection")
            out.extend(chunk)
        return bytes(out)

    def close(self, grace_s=SHUTDOWN_GRACE_S):
        try:
            self.sock.close()
        except OSError:
            pass

    @property
    def alive(self):
        return True


class WorkerClient:
    """Owns one worker for the lifetime of one chain."""

    def __init__(self, worker_cmd=None, worker_endpoint=None):
        if worker_endpoint:
            self.transport = _SocketTransport(worker_endpoint)
        elif worker_cmd:
            command = [sys.executable if tok == "{python}" else tok
                       for tok in shlex.split(worker_cmd)]
            self.transport = _StdioTransport(command)
        else:
            raise WorkerError("need worker_cmd or worker_endpoint")
        self._lock = threading.Lock()
        self._next_request = 1
        self.loaded_model = None
        self.sent_log = []     # frame ids sent, for load-once assertions

    def _send(self, frame_id, payload):
        self.sent_log.append(frame_id)
        self.transport.write(encode_worker_frame(frame_id, payload))

    def load(self, model_id, device="cpu", params=None,
             timeout_s=DEFAULT_LOAD_TIMEOUT_S):
        with self._lock:
            if self.loaded_model is not None:
                raise WorkerError(
                    f"model {self.loaded_model!r} already loaded in this worker")
            self._send(WORKER_LOAD, encode_load(model_id, device, params or {}))
            deadline = time.monotonic() + timeout_s
            frame_id, payload = read_worker_frame(
                lambda n: self.transport.read_exact(n, deadline))
            if frame_id != WORKER_LOAD_ACK:
                raise WorkerError(f"expected LOAD_ACK, got frame id {frame_id}")
            ok, text = decode_load_ack(payload)
            if not ok:
                raise WorkerError(f"worker refused load: {text}")
            self.loaded_model = model_id
            return text

    def infer(self, tensors, timeout_s=DEFAULT_INFER_TIMEOUT_S):
        with self._lock:
            if self.loaded_model is None:
                raise WorkerError("no model loaded")
            request_id = self._next_request
            self._next_request += 1
            self._send(WORKER_INFER, encode_infer(request_id, tensors))
            deadline = time.monotonic() + timeout_s
            frame_id, payload = read_worker_frame(
                lambda n: self.transport.read_exact(n, deadline))
            if frame_id != WORKER_RESULT:
                raise WorkerError(f"expected RESULT, got frame id {frame_id}")
            reply_id, out, error = decode_result(payload)
            if reply_id != request_id:
                raise WorkerError(
                    f"RESULT id {reply_id} does not match request {request_id}")
            if error is not None:
                raise WorkerError(f"worker inference failed: {error}")
            return out

    def shutdown(self, grace_s=SHUTDOWN_GRACE_S):
        with self._lock:
            try:
                if self.transport.alive:
                    self._send(WORKER_SHUTDOWN, b"")
            except (OSError, ValueError, WorkerError):
                pass
            self.transport.close(grace_s)


# ---------------------------------------------------------------------------
# Image group <-> tensor conversion
# ---------------------------------------------------------------------------

META_GT_MASK = "gt_mask"             # base64 of u8 labels, row-major
META_GT_LANDMARKS = "gt_landmarks"   # name:row,col pairs joined with ';'
META_VIEW = "view"

KNOWN_OUTPUT_TENSORS = {"mask", "prob", "landmarks", "landmark_names"}


def group_to_tensors(group):
    """Convert an ImageGroup to the worker's named input tensors.

    Always produces "frames" f32 [N, rows, cols] (group order) and
    "trigger_times" f32 [N]. Ground-truth channels embedded in frame meta
    by a simulator ride along as "gt_masks" / "gt_landmarks" +
    "landmark_names" so oracle workers can echo them.
    """
    frames = group.frames
    if not frames:
        raise TensorError("empty image group")
    shapes = {(f.header.rows, f.header.cols) for f in frames}
    if len(shapes) != 1:
        raise TensorError(f"frames in group have mixed shapes {sorted(shapes)}")
    for frame in frames:
        if frame.header.data_type != PIXEL_F32:
            raise TensorError("inference input frames must be f32 magnitude")
    tensors = {
        "frames": np.stack([np.asarray(f.pixels, dtype=np.float32)
                            for f in frames]),
        "trigger_times": np.asarray(
            [f.header.trigger_time_ms for f in frames], dtype=np.float32),
    }
    gt_masks = [f.meta_value(META_GT_MASK) for f in frames]
    if all(m is not None for m in gt_masks):
        rows, cols = frames[0].header.rows, frames[0].header.cols
        decoded = [np.frombuffer(base64.b64decode(m), dtype=np.uint8)
                   .reshape(rows, cols) for m in gt_masks]
        tensors["gt_masks"] = np.stack(decoded)
    gt_marks = [f.meta_value(META_GT_LANDMARKS) for f in frames]
    if all(m is not None for m in gt_marks):
        names = None
        coords = []
        for encoded in gt_marks:
            pairs = [item.partition(":") for item in encoded.split(";") if item]
            frame_names = [name for name, _, _ in pairs]
            if names is None:
                names = frame_names
            elif names != frame_names:
                raise TensorError("landmark names differ across frames")
            coords.append([[float(x) for x in coord.split(",")]
                           for _, _, coord in pairs])
        tensors["gt_landmarks"] = np.asarray(coords, dtype=np.float32)
        tensors["landmark_names"] = np.frombuffer(
            ",".join(names).encode("utf-8"), dtype=np.uint8).copy()
    return tensors


def artifacts_from_tensors(tensors, group, threshold=0.5):
    """Convert worker output tensors into masks and landmark sets.

    Recognized outputs: "mask" u8 [N, rows, cols]; "prob" f32
    [N, classes, rows, cols] (converted via per-pixel argmax); "landmarks"
    f32 [N, K, 2] with "landmark_names" u8 (comma-joined UTF-8). Anything
    else is an error.
    """
    unknown = set(tensors) - KNOWN_OUTPUT_TENSORS
    if unknown:
        raise TensorError(f"unknown output tensor names {sorted(unknown)}")
    frames = group.frames
    masks = None
    landmarks = None

    label_stack = None
    if "mask" in tensors:
        label_stack = np.asarray(tensors["mask"])
    elif "prob" in tensors:
        prob = np.asarray(tensors["prob"], dtype=np.float64)
        if prob.ndim != 4:
            raise TensorError("prob tensor must be [N, classes, rows, cols]")
        label_stack = np.stack(
            [label_from_probability(list(p), threshold) for p in prob])
    if label_stack is not None:
        if label_stack.shape[0] != len(frames):
            raise TensorError(
                f"mask tensor has {label_stack.shape[0]} frames, group has "
                f"{len(frames)}")
        masks = []
        for frame, labels in zip(frames, label_stack):
            header = ImageHeader.unpack(frame.header.pack())
            header.data_type = PIXEL_U16
            masks.append(SegmentationMask(labels.astype(np.uint16), header))

    if "landmarks" in tensors:
        if "landmark_names" not in tensors:
            raise TensorError("landmarks tensor requires landmark_names")
        points = np.asarray(tensors["landmarks"], dtype=np.float64)
        if points.ndim != 3 or points.shape[2] != 2:
            raise TensorError("landmarks tensor must be [N, K, 2]")
        if points.shape[0] != len(frames):
            raise TensorError("landmarks tensor frame count mismatch")
        names = bytes(np.asarray(tensors["landmark_names"], dtype=np.uint8)
                      ).decode("utf-8").split(",")
        if len(names) != points.shape[1]:
            raise TensorError("landmark_names count does not match tensor")
        landmarks = []
        for frame, frame_points in zip(frames, points):
            landmarks.append(LandmarkSet(
                view=frame.meta_value(META_VIEW, ""),
                phase_idx=frame.header.phase_idx,
                trigger_time_ms=frame.header.trigger_time_ms,
                points={name: (float(p[0]), float(p[1]))
                        for name, p in zip(names, frame_points)},
                header=frame.header))
    return masks, landmarks
