"""TCP server: accepts client connections, assembles the configured chain
per connection, streams data through it while acquisition is ongoing, and
writes results back before closing.

Connection lifecycle: the client sends CONFIG_NAME or CONFIG_INLINE, then
SESSION_HEADER, then data messages, then CLOSE. On CLOSE the flush
propagates stage by stage; once the writer drains, the server answers
with CLOSE and releases every per-connection resource (queues, worker
processes). Concurrent connections share only the immutable gadget
registry and the synchronized session store.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import threading
import time

from .chain import (AssemblyError, ChainContext, ConnectionSummary,
                    assemble_chain, _ABORT)
from .config import ConfigError, parse_chain_config
from .gadgets import build_default_registry
from .report import ReportDocument
from .stages import EndOfStream, StreamError
from .store import SessionStore
from .wire import (DEFAULT_PORT, Close, ConfigInline, ConfigName, FrameDecoder,
                   ImageFrame, KSpaceReadout, Report, SessionAborted,
                   SessionHeader, Text, Waveform, encode_message)

log = logging.getLogger(__name__)


class ProtocolViolation(Exception):
    pass


def _writer_loop(chain, sock, summary):
    """Drain the chain's output pipe onto the socket."""
    out = chain.output_pipe
    while True:
        try:
            item = out.get(timeout=0.05)
        except TimeoutError:
            if chain.aborted.is_set():
                item = _ABORT
            else:
                continue
        if item is _ABORT:
            reason = chain.failure or "chain aborted"
            _send(sock, Text(f"error: {reason}"), summary)
            _send(sock, Close(), summary)
            return
        if isinstance(item, EndOfStream):
            _send(sock, Close(), summary)
            return
        message = _to_message(item)
        if message is None:
            log.warning("writer dropping unserializable %s", type(item).__name__)
            continue
        _send(sock, message, summary)


def _to_message(item):
    if isinstance(item, (ImageFrame, Waveform, Text, Report)):
        return item
    if isinstance(item, ReportDocument):
        return Report(item.serialize())
    if isinstance(item, str):
        return Text(item)
    return None


def _send(sock, message, summary):
    try:
        sock.sendall(encode_message(message))
        summary.messages_out[message.message_id] = (
            summary.messages_out.get(message.message_id, 0) + 1)
    except OSError as err:
        log.warning("writeback failed: %s", err)


def serve_connection(sock, registry, store, chains_dir=None,
                     queue_capacity=None):
    """Run one client connection to completion; returns its summary."""
    summary = ConnectionSummary()
    summary.reader_log = []   # (monotonic ts, chunk bytes) per recv
    decoder = FrameDecoder()
    chain = None
    writer = None
    chain_config = None
    session_header = None

    def fail_early(text):
        log.warning("connection rejected: %s", text)
        _send(sock, Text(f"error: {text}"), summary)
        _send(sock, Close(), summary)
        summary.error = text

    try:
        while True:
            try:
                data = sock.recv(65536)
            except OSError as err:
                raise SessionAborted(str(err), decoder.byte_offset) from None
            if not data:
                if chain is not None:
                    chain.abort_feed()
                    summary.error = summary.error or "client hung up mid-session"
                break
            summary.reader_log.append((time.monotonic(), len(data)))
            if summary.first_byte_ts is None:
                summary.first_byte_ts = time.monotonic()
            closed = False
            for message in decoder.feed(data):
                summary.messages_in[message.message_id] = (
                    summary.messages_in.get(message.message_id, 0) + 1)

                if isinstance(message, (ConfigName, ConfigInline)):
                    if chain_config is not None:
                        fail_early("duplicate chain configuration")
                        return summary
                    try:
                        text = (message.text if isinstance(message, ConfigInline)
                                else _load_chain_text(chains_dir, message.name))
                        chain_config = parse_chain_config(text)
                    except (ConfigError, OSError) as err:
                        fail_early(f"bad chain config: {err}")
                        return summary
                    summary.chain_name = (message.name if isinstance(message, ConfigName)
                                          else "inline-config")
                    continue

                if isinstance(message, SessionHeader):
                    if chain_config is None:
                        fail_early("SESSION_HEADER before chain configuration")
                        return summary
                    if session_header is not None:
                        fail_early("duplicate SESSION_HEADER")
                        return summary
                    session_header = message
                    context = ChainContext(session_header=session_header,
                                           store=store,
                                           chain_name=summary.chain_name)
                    try:
                        kwargs = {}
                        if queue_capacity is not None:
                            kwargs["queue_capacity"] = queue_capacity
                        chain = assemble_chain(chain_config, registry, context,
                                               name=summary.chain_name, **kwargs)
                    except AssemblyError as err:
                        fail_early(f"chain assembly failed: {err}")
                        return summary
                    summary.stages = chain.stats
                    chain.start()
                    writer = threading.Thread(
                        target=_writer_loop, args=(chain, sock, summary),
                        name="icsp-writer", daemon=True)
                    writer.start()
                    # readiness note: model loading can take a while, and
                    # paced clients gate their acquisition clock on it
                    _send(sock, Text("chain ready"), summary)
                    continue

                if isinstance(message, Close):
                    if chain is not None:
                        chain.finish()
                    else:
                        _send(sock, Close(), summary)
                    closed = True
                    break

                if isinstance(message, Text):
                    log.info("client text: %s", message.text)
                    continue

                if chain is None:
                    fail_early(f"data message (id {message.message_id}) "
                               "before chain configuration")
                    return summary
                if isinstance(message, KSpaceReadout):
                    summary.last_acquisition_ts = time.monotonic()
                if not chain.feed(message):
                    chain.abort_feed()
                    closed = True
                    break
            if closed:
                break
    except SessionAborted as err:
        summary.error = str(err)
        log.warning("session aborted: %s", err)
        if chain is not None:
            chain.abort_feed()
        else:
            fail_early(str(err))
    finally:
        if chain is not None:
            if writer is not None:
                writer.join(timeout=120)
            chain.join(timeout=120)
            chain.teardown()
            if chain.failure and not summary.error:
                summary.error = chain.failure
        summary.close_ts = time.monotonic()
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    return summary


def _load_chain_text(chains_dir, name):
    if chains_dir is None:
        raise OSError("server has no chain directory configured")
    safe = os.path.basename(name)
    path = os.path.join(chains_dir, safe + ".chain")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


class InlineServer:
    """Accepts ICSP connections and runs one chain per connection."""

    def __init__(self, port=None, registry=None, store=None, chains_dir=None,
                 host="127.0.0.1", queue_capacity=None, keep_summaries=64):
        if port is None:
            port = int(os.environ.get("ICSP_PORT", DEFAULT_PORT))
        self.registry = registry or build_default_registry()
        self.store = store or SessionStore()
        self.chains_dir = chains_dir
        self.queue_capacity = queue_capacity
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self._listener.settimeout(0.2)   # lets stop() interrupt accept()
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread = None
        self._active = set()
        self._active_lock = threading.Lock()
        self.summaries = []
        self._keep = keep_summaries

    def start(self):
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="icsp-accept", daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.settimeout(None)
            # A large receive buffer keeps the TCP window open while the
            # chain is being assembled (model load happens before the
            # reader returns to recv); a closed window risks multi-second
            # zero-window probe backoff and would break the
            # acquisition/compute overlap.
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 8 << 20)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            log.info("connection from %s:%d", *peer)
            thread = threading.Thread(
                target=self._run_connection, args=(sock,),
                name=f"icsp-conn-{peer[1]}", daemon=True)
            with self._active_lock:
                self._active.add(thread)
            thread.start()

    def _run_connection(self, sock):
        try:
            summary = serve_connection(
                sock, self.registry, self.store, self.chains_dir,
                self.queue_capacity)
            self.summaries.append(summary)
            del self.summaries[:-self._keep]
            log.info("connection done: in=%s out=%s error=%s",
                     summary.messages_in, summary.messages_out, summary.error)
        except Exception:
            log.exception("connection crashed")
        finally:
            with self._active_lock:
                self._active.discard(threading.current_thread())

    def stop(self, timeout=30):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout)
        with self._active_lock:
            active = list(self._active)
        for thread in active:
            thread.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="inline-server",
        description="Streaming cardiac-MR inference server")
    parser.add_argument("--port", type=int, default=None,
                        help=f"listen port (default: $ICSP_PORT or {DEFAULT_PORT})")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--chains-dir", default=None,
                        help="directory with <name>.chain documents")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--store-ttl-s", type=float, default=2 * 3600.0)
    parser.add_argument("--store-capacity", type=int, default=256)
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    store = SessionStore(ttl_s=args.store_ttl_s, capacity=args.store_capacity)
    server = InlineServer(port=args.port, chains_dir=args.chains_dir,
                          store=store, host=args.host)
    log.info("listening on %s:%d", args.host, server.port)
    server.start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        log.info("shutting down")
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
