"""Inline CMR Streaming Protocol (ICSP) codec.

Every message travels in one frame::

    length: u32 LE   byte count of message_id + payload
    message_id: u16 LE
    payload: length - 2 bytes

All multi-byte fields are little-endian, headers are packed without
alignment padding, and encode() is a pure function of the message value,
so the same message always produces identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MSG_CONFIG_NAME = 1
MSG_CONFIG_INLINE = 2
MSG_SESSION_HEADER = 3
MSG_CLOSE = 4
MSG_TEXT = 5
MSG_ACQUISITION = 10
MSG_IMAGE = 11
MSG_WAVEFORM = 12
MSG_REPORT = 13

KNOWN_MESSAGE_IDS = frozenset({
    MSG_CONFIG_NAME, MSG_CONFIG_INLINE, MSG_SESSION_HEADER, MSG_CLOSE,
    MSG_TEXT, MSG_ACQUISITION, MSG_IMAGE, MSG_WAVEFORM, MSG_REPORT,
})

# ReadoutHeader.flags bits
FLAG_CALIBRATION = 1 << 0
FLAG_LAST_IN_SLICE = 1 << 1
FLAG_LAST_IN_SCAN = 1 << 2

# ImageHeader.data_type codes
PIXEL_F32 = 1
PIXEL_COMPLEX64 = 2
PIXEL_U16 = 3

_PIXEL_DTYPES = {
    PIXEL_F32: np.dtype("<f4"),
    PIXEL_COMPLEX64: np.dtype("<c8"),
    PIXEL_U16: np.dtype("<u2"),
}

# Waveform kinds
WF_ECG = 1
WF_RESP = 2

DEFAULT_PORT = 9122

_READOUT_HDR = struct.Struct("<HQIHHHHHHHHI3f3f3f3f")
_IMAGE_HDR = struct.Struct("<HQHHHHHH2ffff3f3f3f")
_WAVEFORM_HDR = struct.Struct("<HIf")

READOUT_HEADER_SIZE = _READOUT_HDR.size   # 82
IMAGE_HEADER_SIZE = _IMAGE_HDR.size       # 78


class WireError(Exception):
    """Base for all codec failures."""


class EncodeError(WireError):
    """Message violates a type invariant and cannot be serialized."""


class DecodeError(WireError):
    """Frame payload violates a type invariant."""


class ProtocolError(DecodeError):
    """Frame carries an unknown message id."""


class SessionAborted(WireError):
    """Byte stream broke mid-frame or carried a bad frame."""

    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


def _check_unit(name, vec, tol=1e-3):
    norm = float(np.linalg.norm(np.asarray(vec, dtype=np.float64)))
    if abs(norm - 1.0) > tol:
        raise EncodeError(f"{name} is not unit-norm (|v| = {norm:.6f})")


def _require(cond, exc, message):
    if not cond:
        raise exc(message)


@dataclass
class ReadoutHeader:
    """Fixed-size header of one k-space readout."""

    version: int = 1
    flags: int = 0
    scan_counter: int = 0
    num_samples: int = 0
    num_coils: int = 0
    kline_idx: int = 0
    slice_idx: int = 0
    phase_idx: int = 0
    repetition_idx: int = 0
    set_idx: int = 0
    average_idx: int = 0
    sample_time_ns: int = 0
    position_mm: tuple = (0.0, 0.0, 0.0)
    read_dir: tuple = (1.0, 0.0, 0.0)
    phase_dir: tuple = (0.0, 1.0, 0.0)
    slice_dir: tuple = (0.0, 0.0, 1.0)

    def validate(self, exc=EncodeError):
        _require(self.num_samples > 0, exc, "num_samples must be > 0")
        _require(self.num_coils > 0, exc, "num_coils must be > 0")
        for name in ("read_dir", "phase_dir", "slice_dir"):
            vec = getattr(self, name)
            norm = float(np.linalg.norm(np.asarray(vec, dtype=np.float64)))
            _require(abs(norm - 1.0) <= 1e-3, exc,
                     f"{name} is not unit-norm (|v| = {norm:.6f})")

    def pack(self):
        return _READOUT_HDR.pack(
            self.version, self.flags, self.scan_counter,
            self.num_samples, self.num_coils,
            self.kline_idx, self.slice_idx, self.phase_idx,
            self.repetition_idx, self.set_idx, self.average_idx,
            self.sample_time_ns,
            *self.position_mm, *self.read_dir, *self.phase_dir, *self.slice_dir)

    @classmethod
    def unpack(cls, buf):
        v = _READOUT_HDR.unpack_from(buf)
        return cls(
            version=v[0], flags=v[1], scan_counter=v[2],
            num_samples=v[3], num_coils=v[4],
            kline_idx=v[5], slice_idx=v[6], phase_idx=v[7],
            repetition_idx=v[8], set_idx=v[9], average_idx=v[10],
            sample_time_ns=v[11],
            position_mm=v[12:15], read_dir=v[15:18],
            phase_dir=v[18:21], slice_dir=v[21:24])

    def __eq__(self, other):
        if not isinstance(other, ReadoutHeader):
            return NotImplemented
        return self.pack() == other.pack()


@dataclass
class ImageHeader:
    """Fixed-size header of one 2D image frame."""

    version: int = 1
    flags: int = 0
    series_idx: int = 0
    slice_idx: int = 0
    phase_idx: int = 0
    rows: int = 0
    cols: int = 0
    data_type: int = PIXEL_F32
    pixel_spacing_mm: tuple = (1.0, 1.0)
    slice_thickness_mm: float = 1.0
    slice_spacing_mm: float = 1.0
    trigger_time_ms: float = 0.0
    position_mm: tuple = (0.0, 0.0, 0.0)
    row_dir: tuple = (1.0, 0.0, 0.0)
    col_dir: tuple = (0.0, 1.0, 0.0)

    def validate(self, exc=EncodeError):
        _require(self.rows * self.cols > 0, exc, "rows*cols must be > 0")
        _require(self.pixel_spacing_mm[0] > 0 and self.pixel_spacing_mm[1] > 0,
                 exc, "pixel_spacing_mm must be > 0")
        _require(self.slice_thickness_mm > 0, exc, "slice_thickness_mm must be > 0")
        _require(self.slice_spacing_mm >= self.slice_thickness_mm, exc,
                 "slice_spacing_mm must be >= slice_thickness_mm")
        _require(self.data_type in _PIXEL_DTYPES, exc,
                 f"unknown data_type {self.data_type}")

    def pack(self):
        return _IMAGE_HDR.pack(
            self.version, self.flags, self.series_idx, self.slice_idx,
            self.phase_idx, self.rows, self.cols, self.data_type,
            *self.pixel_spacing_mm,
            self.slice_thickness_mm, self.slice_spacing_mm, self.trigger_time_ms,
            *self.position_mm, *self.row_dir, *self.col_dir)

    @classmethod
    def unpack(cls, buf):
        v = _IMAGE_HDR.unpack_from(buf)
        return cls(
            version=v[0], flags=v[1], series_idx=v[2], slice_idx=v[3],
            phase_idx=v[4], rows=v[5], cols=v[6], data_type=v[7],
            pixel_spacing_mm=v[8:10],
            slice_thickness_mm=v[10], slice_spacing_mm=v[11],
            trigger_time_ms=v[12],
            position_mm=v[13:16], row_dir=v[16:19], col_dir=v[19:22])

    def pixel_dtype(self):
        return _PIXEL_DTYPES[self.data_type]

    def __eq__(self, other):
        if not isinstance(other, ImageHeader):
            return NotImplemented
        return self.pack() == other.pack()


def encode_meta(meta):
    """Serialize meta pairs to UTF-8 ``key=value`` lines (order preserved)."""
    lines = []
    for key, value in meta:
        if "=" in key or "\n" in key:
            raise EncodeError(f"meta key {key!r} contains '=' or newline")
        if "\n" in value:
            raise EncodeError(f"meta value for {key!r} contains newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def decode_meta(blob):
    pairs = []
    for line in blob.decode("utf-8").split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DecodeError(f"meta line {line!r} has no '='")
        pairs.append((key, value))
    return pairs


def meta_get(meta, key, default=None):
    for k, v in meta:
        if k == key:
            return v
    return default


def meta_get_all(meta, key):
    return [v for k, v in meta if k == key]


class _Message:
    """Shared equality: two messages are equal iff they encode identically."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return encode_message(self) == encode_message(other)

    def __hash__(self):
        return hash(encode_message(self))


@dataclass(eq=False)
class ConfigName(_Message):
    name: str
    message_id = MSG_CONFIG_NAME


@dataclass(eq=False)
class ConfigInline(_Message):
    text: str
    message_id = MSG_CONFIG_INLINE


@dataclass(eq=False)
class SessionHeader(_Message):
    """Session metadata as ordered key=value pairs.

    Common keys: heart_rate_bpm, bsa_m2, patient_key, scan_kind, plus
    geometry defaults consumed by the reconstruction stage.
    """

    fields: dict = field(default_factory=dict)
    message_id = MSG_SESSION_HEADER

    def get(self, key, default=None):
        return self.fields.get(key, default)

    def get_float(self, key, default=None):
        value = self.fields.get(key)
        return default if value is None else float(value)


@dataclass(eq=False)
class Close(_Message):
    message_id = MSG_CLOSE


@dataclass(eq=False)
class Text(_Message):
    text: str
    message_id = MSG_TEXT


@dataclass(eq=False)
class KSpaceReadout(_Message):
    """One acquired k-space line: header + [coils, samples] complex64."""

    header: ReadoutHeader
    samples: np.ndarray
    message_id = MSG_ACQUISITION


@dataclass(eq=False)
class ImageFrame(_Message):
    """2D image with geometry header and free-form meta attribute lines."""

    header: ImageHeader
    meta: list = field(default_factory=list)
    pixels: np.ndarray = None
    message_id = MSG_IMAGE

    def meta_value(self, key, default=None):
        return meta_get(self.meta, key, default)


@dataclass(eq=False)
class Waveform(_Message):
    wf_type: int
    sample_period_ms: float
    samples: np.ndarray
    message_id = MSG_WAVEFORM


@dataclass(eq=False)
class Report(_Message):
    """Structured report document, already serialized to text."""

    text: str
    message_id = MSG_REPORT


def _encode_payload(message):
    if isinstance(message, ConfigName):
        return message.name.encode("utf-8")
    if isinstance(message, ConfigInline):
        return message.text.encode("utf-8")
    if isinstance(message, SessionHeader):
        return encode_meta(list(message.fields.items()))
    if isinstance(message, Close):
        return b""
    if isinstance(message, Text):
        return message.text.encode("utf-8")
    if isinstance(message, Report):
        return message.text.encode("utf-8")
    if isinstance(message, KSpaceReadout):
        hdr = message.header
        hdr.validate(EncodeError)
        samples = np.ascontiguousarray(message.samples, dtype=np.complex64)
        if samples.shape != (hdr.num_coils, hdr.num_samples):
            raise EncodeError(
                f"samples shape {samples.shape} does not match header "
                f"({hdr.num_coils} coils x {hdr.num_samples} samples)")
        return hdr.pack() + samples.tobytes()
    if isinstance(message, ImageFrame):
        hdr = message.header
        hdr.validate(EncodeError)
        meta_blob = encode_meta(message.meta)
        pixels = np.ascontiguousarray(message.pixels, dtype=hdr.pixel_dtype())
        if pixels.shape != (hdr.rows, hdr.cols):
            raise EncodeError(
                f"pixels shape {pixels.shape} does not match header "
                f"({hdr.rows} x {hdr.cols})")
        return (hdr.pack() + struct.pack("<I", len(meta_blob)) + meta_blob
                + pixels.tobytes())
    if isinstance(message, Waveform):
        if message.sample_period_ms <= 0:
            raise EncodeError("sample_period_ms must be > 0")
        samples = np.ascontiguousarray(message.samples, dtype="<f4").ravel()
        return (_WAVEFORM_HDR.pack(message.wf_type, samples.size,
                                   message.sample_period_ms)
                + samples.tobytes())
    raise EncodeError(f"cannot encode object of type {type(message).__name__}")


def encode_message(message):
    """Serialize one message into a single well-formed frame."""
    payload = _encode_payload(message)
    return struct.pack("<IH", 2 + len(payload), message.message_id) + payload


def _decode_payload(message_id, payload):
    if message_id == MSG_CONFIG_NAME:
        return ConfigName(payload.decode("utf-8"))
    if message_id == MSG_CONFIG_INLINE:
        return ConfigInline(payload.decode("utf-8"))
    if message_id == MSG_SESSION_HEADER:
        return SessionHeader(dict(decode_meta(payload)))
    if message_id == MSG_CLOSE:
        if payload:
            raise DecodeError("CLOSE payload must be empty")
        return Close()
    if message_id == MSG_TEXT:
        return Text(payload.decode("utf-8"))
    if message_id == MSG_REPORT:
        return Report(payload.decode("utf-8"))
    if message_id == MSG_ACQUISITION:
        if len(payload) < READOUT_HEADER_SIZE:
            raise DecodeError("readout payload shorter than header")
        hdr = ReadoutHeader.unpack(payload)
        hdr.validate(DecodeError)
        expected = READOUT_HEADER_SIZE + 8 * hdr.num_coils * hdr.num_samples
        if len(payload) != expected:
            raise DecodeError(
                f"readout payload is {len(payload)} bytes, expected {expected}")
        samples = np.frombuffer(payload, dtype="<c8", offset=READOUT_HEADER_SIZE)
        samples = samples.reshape(hdr.num_coils, hdr.num_samples).copy()
        return KSpaceReadout(hdr, samples)
    if message_id == MSG_IMAGE:
        if len(payload) < IMAGE_HEADER_SIZE + 4:
            raise DecodeError("image payload shorter than header")
        hdr = ImageHeader.unpack(payload)
        hdr.validate(DecodeError)
        (meta_len,) = struct.unpack_from("<I", payload, IMAGE_HEADER_SIZE)
        meta_start = IMAGE_HEADER_SIZE + 4
        pix_start = meta_start + meta_len
        dtype = hdr.pixel_dtype()
        expected = pix_start + hdr.rows * hdr.cols * dtype.itemsize
        if len(payload) != expected:
            raise DecodeError(
                f"image payload is {len(payload)} bytes, expected {expected}")
        meta = decode_meta(payload[meta_start:pix_start])
        pixels = np.frombuffer(payload, dtype=dtype, offset=pix_start)
        pixels = pixels.reshape(hdr.rows, hdr.cols).copy()
        return ImageFrame(hdr, meta, pixels)
    if message_id == MSG_WAVEFORM:
        if len(payload) < _WAVEFORM_HDR.size:
            raise DecodeError("waveform payload shorter than header")
        wf_type, n, period = _WAVEFORM_HDR.unpack_from(payload)
        if period <= 0:
            raise DecodeError("sample_period_ms must be > 0")
        expected = _WAVEFORM_HDR.size + 4 * n
        if len(payload) != expected:
            raise DecodeError(
                f"waveform payload is {len(payload)} bytes, expected {expected}")
        samples = np.frombuffer(payload, dtype="<f4", offset=_WAVEFORM_HDR.size).copy()
        return Waveform(wf_type, period, samples)
    raise ProtocolError(f"unknown message id {message_id}")


def decode_message(data, offset=0):
    """Decode one frame starting at ``offset``.

    Returns (message, bytes_consumed), or None if more bytes are needed.
    Raises ProtocolError / DecodeError for malformed frames.
    """
    avail = len(data) - offset
    if avail < 6:
        return None
    (length, message_id) = struct.unpack_from("<IH", data, offset)
    if length < 2:
        raise DecodeError(f"frame length {length} is shorter than message id")
    total = 4 + length
    if avail < total:
        return None
    payload = bytes(data[offset + 6: offset + total])
    return _decode_payload(message_id, payload), total


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte chunks, collect messages.

    Re-framing is insensitive to how the stream was chunked; N concatenated
    frames always decode to exactly N messages.
    """

    def __init__(self):
        self._buf = bytearray()
        self.byte_offset = 0  # offset of _buf[0] in the overall stream

    def feed(self, chunk):
        self._buf.extend(chunk)
        out = []
        pos = 0
        try:
            while True:
                result = decode_message(self._buf, pos)
                if result is None:
                    break
                message, consumed = result
                pos += consumed
                out.append(message)
        except WireError as err:
            raise SessionAborted(str(err), self.byte_offset + pos) from err
        finally:
            if pos:   # one compaction per feed keeps large backlogs linear
                del self._buf[:pos]
                self.byte_offset += pos
        return out

    @property
    def pending_bytes(self):
        return len(self._buf)


@dataclass
class SessionSummary:
    """Per-id message counts for one streamed session."""

    counts: dict = field(default_factory=dict)
    terminated: bool = False   # True iff a CLOSE was seen
    byte_count: int = 0


def _read_some(transport):
    if hasattr(transport, "recv"):
        return transport.recv(65536)
    return transport.read(65536)


def stream_session(transport, sink):
    """Pump one session from an ordered byte stream into ``sink``.

    Messages are delivered in wire order. Stops at CLOSE (counted and
    delivered) or at end of transport. A truncated frame or malformed
    message raises SessionAborted with the byte offset.
    """
    decoder = FrameDecoder()
    summary = SessionSummary()
    while True:
        chunk = _read_some(transport)
        if not chunk:
            if decoder.pending_bytes:
                raise SessionAborted("transport ended mid-frame",
                                     decoder.byte_offset)
            return summary
        for message in decoder.feed(chunk):
            summary.counts[message.message_id] = (
                summary.counts.get(message.message_id, 0) + 1)
            summary.byte_count = decoder.byte_offset
            sink(message)
            if isinstance(message, Close):
                summary.terminated = True
                return summary
