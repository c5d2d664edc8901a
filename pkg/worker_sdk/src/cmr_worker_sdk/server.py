"""Worker request loop: LOAD once, INFER repeatedly, SHUTDOWN to exit.

Single-threaded by design; the serving side already serializes requests
per worker. The loop keeps a message log so load-once behavior is
observable from the outside.
"""

from __future__ import annotations

import sys
import traceback

from . import protocol


class WorkerSession:
    def __init__(self, catalog, stdin, stdout):
        self.catalog = catalog
        self.stdin = stdin
        self.stdout = stdout
        self.loaded_id = None
        self.state = None
        self.infer_fn = None
        self.message_log = []   # frame ids received, in order

    def _read_exact(self, n):
        out = bytearray()
        while len(out) < n:
            chunk = self.stdin.read(n - len(out))
            if not chunk:
                raise EOFError
            out.extend(chunk)
        return bytes(out)

    def _send(self, frame_id, payload):
        self.stdout.write(protocol.encode_frame(frame_id, payload))
        self.stdout.flush()

    def _handle_load(self, payload):
        model_id, device, params = protocol.decode_load(payload)
        if self.loaded_id is not None:
            self._send(protocol.LOAD_ACK, protocol.encode_load_ack(
                False, "a model is already loaded in this worker"))
            return
        entry = self.catalog.get(model_id)
        if entry is None:
            self._send(protocol.LOAD_ACK, protocol.encode_load_ack(
                False, f"unknown model {model_id!r}"))
            return
        if device not in entry.devices and device is not None:
            self._send(protocol.LOAD_ACK, protocol.encode_load_ack(
                False, f"device unsupported: {device}"))
            return
        try:
            self.state = entry.load_fn(params, device or "cpu")
        except Exception as err:
            self._send(protocol.LOAD_ACK,
                       protocol.encode_load_ack(False, f"load failed: {err}"))
            return
        self.loaded_id = model_id
        self.infer_fn = entry.infer_fn
        self._send(protocol.LOAD_ACK,
                   protocol.encode_load_ack(True, f"loaded {model_id}"))

    def _handle_infer(self, payload):
        request_id, tensors = protocol.decode_infer(payload)
        if self.loaded_id is None:
            self._send(protocol.RESULT, protocol.encode_result(
                request_id, error="no model loaded"))
            return
        try:
            outputs = self.infer_fn(self.state, tensors)
            self._send(protocol.RESULT,
                       protocol.encode_result(request_id, outputs))
        except Exception:
            self._send(protocol.RESULT, protocol.encode_result(
                request_id, error=traceback.format_exc()))

    def run(self):
        """Serve until SHUTDOWN (exit 0). A broken stream or malformed
        frame before any model loaded exits 2."""
        while True:
            try:
                frame_id, payload = protocol.read_frame(self._read_exact)
            except (EOFError, protocol.ProtocolError):
                return 0 if self.loaded_id is not None else 2
            self.message_log.append(frame_id)
            if frame_id == protocol.LOAD:
                self._handle_load(payload)
            elif frame_id == protocol.INFER:
                self._handle_infer(payload)
            elif frame_id == protocol.SHUTDOWN:
                return 0
            else:
                if self.loaded_id is None:
                    return 2
                sys.stderr.write(f"worker: ignoring frame id {frame_id}\n")


def serve_worker(catalog, stdin=None, stdout=None):
    session = WorkerSession(catalog,
                            stdin or sys.stdin.buffer,
                            stdout or sys.stdout.buffer)
    return session.run()
