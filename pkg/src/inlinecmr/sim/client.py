"""Full-duplex streaming client: sends a generated session with realistic
pacing while concurrently recording everything the server returns, with
monotonic-clock timestamps on both sides."""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from ..wire import (Close, ImageFrame, KSpaceReadout, Report, Text,
                    encode_message, stream_session)

log = logging.getLogger(__name__)

READY_TEXT = "chain ready"


@dataclass
class TimingLog:
    send_ts: list = field(default_factory=list)          # every message
    acquisition_send_ts: list = field(default_factory=list)
    receive_ts: list = field(default_factory=list)       # every reply
    first_image_ts: float = None
    first_result_ts: float = None
    last_result_ts: float = None

    @property
    def last_acquisition_ts(self):
        return self.acquisition_send_ts[-1] if self.acquisition_send_ts else None

    @property
    def first_result_latency_s(self):
        if self.first_result_ts is None or self.last_acquisition_ts is None:
            return None
        return self.first_result_ts - self.last_acquisition_ts

    @property
    def post_acquisition_s(self):
        if self.last_result_ts is None or self.last_acquisition_ts is None:
            return None
        return self.last_result_ts - self.last_acquisition_ts


@dataclass
class RunResult:
    received: list
    timing: TimingLog
    summary: object
    raw_received: bytes


def _pacing_offsets(messages, slice_ms, gap_ms):
    """Per-message target send offsets (seconds): readouts of one slice are
    spread uniformly across its acquisition window, with a gap before the
    next slice; non-acquisition messages go out immediately."""
    slice_counts = {}
    for message in messages:
        if isinstance(message, KSpaceReadout):
            idx = message.header.slice_idx
            slice_counts[idx] = slice_counts.get(idx, 0) + 1
    slice_order = sorted(slice_counts)
    slice_start = {}
    t = 0.0
    for idx in slice_order:
        slice_start[idx] = t
        t += (slice_ms + gap_ms) / 1000.0
    offsets = []
    seen = {}
    for message in messages:
        if isinstance(message, KSpaceReadout):
            idx = message.header.slice_idx
            n = seen.get(idx, 0) + 1
            seen[idx] = n
            offsets.append(slice_start[idx]
                           + n / slice_counts[idx] * slice_ms / 1000.0)
        else:
            offsets.append(None)
    return offsets


def run_client(endpoint, messages, pacing=False, slice_ms=300.0, gap_ms=150.0,
               connect_timeout_s=10.0):
    """Stream ``messages`` to the server at ``endpoint`` ("host:port").

    Send and receive run concurrently; the call returns once the server's
    CLOSE arrives (or its stream ends). Raises ConnectionError for
    connection failures and lets protocol errors propagate.
    """
    host, _, port = endpoint.rpartition(":")
    try:
        sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                        timeout=connect_timeout_s)
    except OSError as err:
        raise ConnectionError(f"cannot reach server at {endpoint}: {err}") from err
    sock.settimeout(None)
    # keep paced sends timely and absorb server-side assembly pauses
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 8 << 20)

    timing = TimingLog()
    received = []
    raw = bytearray()
    ready = threading.Event()
    offsets = _pacing_offsets(messages, slice_ms, gap_ms) if pacing else None

    def sender():
        # paced acquisition starts once the server reports its chain live
        # (a scanner starts imaging only after prep completes); the clock
        # for the send schedule begins at the first paced message
        t0 = None
        try:
            for i, message in enumerate(messages):
                if offsets is not None and offsets[i] is not None:
                    if t0 is None:
                        if not ready.wait(timeout=60.0):
                            log.warning("server never reported chain ready, "
                                        "pacing from now")
                        t0 = time.monotonic()
                    ahead = offsets[i] - (time.monotonic() - t0)
                    if ahead > 0.002:
                        time.sleep(ahead)
                payload = encode_message(message)
                sock.sendall(payload)
                now = time.monotonic()
                timing.send_ts.append(now)
                if isinstance(message, KSpaceReadout):
                    timing.acquisition_send_ts.append(now)
        except OSError as err:
            log.warning("send side closed early: %s", err)

    def sink(message):
        now = time.monotonic()
        timing.receive_ts.append(now)
        received.append(message)
        raw.extend(encode_message(message))
        if isinstance(message, Text) and message.text == READY_TEXT:
            ready.set()
        if isinstance(message, ImageFrame) and timing.first_image_ts is None:
            timing.first_image_ts = now
        if isinstance(message, (ImageFrame, Report)):
            if timing.first_result_ts is None:
                timing.first_result_ts = now
            timing.last_result_ts = now

    send_thread = threading.Thread(target=sender, name="sim-sender", daemon=True)
    send_thread.start()
    try:
        summary = stream_session(sock, sink)
    finally:
        ready.set()   # unblock a sender still gating on readiness
        send_thread.join(timeout=60)
        try:
            sock.close()
        except OSError:
            pass
    if not any(isinstance(m, Close) for m in received):
        log.warning("server stream ended without CLOSE")
    return RunResult(received=received, timing=timing, summary=summary,
                     raw_received=bytes(raw))
