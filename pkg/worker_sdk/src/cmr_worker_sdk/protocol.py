"""Model-worker wire protocol.

Frames share the server's length/id layout::

    length: u32 LE (message id + payload byte count)
    frame_id: u16 LE
    payload

    LOAD (1)      UTF-8 key=value lines: model_id, device, param.<name>
    LOAD_ACK (2)  u8 ok + UTF-8 text
    INFER (3)     u32 request_id + u16 tensor_count + tensors
    RESULT (4)    u32 request_id + u8 ok + (tensors | UTF-8 error text)
    SHUTDOWN (5)  empty

    tensor: u16 name_len + name + u8 dtype + u8 ndim + u32 dims[ndim]
            + row-major little-endian data
    dtype codes: 1 = f32, 2 = f64, 3 = u8, 4 = i32
"""

from __future__ import annotations

import struct

import numpy as np

LOAD = 1
LOAD_ACK = 2
INFER = 3
RESULT = 4
SHUTDOWN = 5

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class ProtocolError(Exception):
    pass


def encode_frame(frame_id, payload=b""):
    return struct.pack("<IH", 2 + len(payload), frame_id) + payload


def read_frame(read_exact):
    head = read_exact(6)
    length, frame_id = struct.unpack("<IH", head)
    if length < 2:
        raise ProtocolError(f"frame length {length} too small")
    payload = read_exact(length - 2) if length > 2 else b""
    return frame_id, payload


def encode_tensor(name, array):
    array = np.asarray(array)
    dtype = np.dtype(array.dtype).newbyteorder("<")
    code = _CODES.get(dtype)
    if code is None:
        raise ProtocolError(f"unsupported tensor dtype {array.dtype}")
    name_bytes = name.encode("utf-8")
    return (struct.pack("<H", len(name_bytes)) + name_bytes
            + struct.pack("<BB", code, array.ndim)
            + struct.pack(f"<{array.ndim}I", *array.shape)
            + array.astype(dtype, copy=False).tobytes())


def decode_tensor(buf, offset=0):
    (name_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    name = bytes(buf[offset:offset + name_len]).decode("utf-8")
    offset += name_len
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise ProtocolError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    offset += count * dtype.itemsize
    return name, data.reshape(dims).copy(), offset


def encode_tensors(tensors):
    parts = [struct.pack("<H", len(tensors))]
    for name, array in tensors.items():
        parts.append(encode_tensor(name, array))
    return b"".join(parts)


def decode_tensors(buf, offset=0):
    (count,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    out = {}
    for _ in range(count):
        name, array, offset = decode_tensor(buf, offset)
        out[name] = array
    return out, offset


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


def encode_load(model_id, device="cpu", params=None):
    lines = [f"model_id={model_id}", f"device={device}"]
    for key, value in sorted((params or {}).items()):
        lines.append(f"param.{key}={value}")
    return "\n".join(lines).encode("utf-8")


def encode_load_ack(ok, text=""):
    return struct.pack("<B", 1 if ok else 0) + text.encode("utf-8")


def decode_load_ack(payload):
    return payload[0] == 1, bytes(payload[1:]).decode("utf-8")


def decode_infer(payload):
    (request_id,) = struct.unpack_from("<I", payload)
    tensors, _ = decode_tensors(payload, 4)
    return request_id, tensors


def encode_infer(request_id, tensors):
    return struct.pack("<I", request_id) + encode_tensors(tensors)


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
