"""Chain assembly and threaded streaming execution.

A chain is an ordered list of gadgets connected by bounded FIFO pipes
(default capacity 64), one worker thread per stage, so a full pipe blocks
the producer and gives backpressure instead of unbounded memory. Items
stream through as they arrive; END_OF_STREAM propagates stage by stage
and triggers each gadget's flush in chain order. A stage failure aborts
the whole chain: no partial flush, resources released.

The pipes are deque-based single-producer/single-consumer channels with
short sleep-polling instead of condition variables: lock handoffs between
adjacent stages under bursty load are prone to convoys that can starve a
stage for seconds, which would silently destroy the acquisition/compute
overlap this server exists to provide.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass, field

from .config import ChainConfig
from .stages import END_OF_STREAM, EndOfStream

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 64
_IDLE_SLEEP_S = 0.001


class AssemblyError(Exception):
    """Chain could not be built; no data was processed."""


class Gadget:
    """Behavioral contract for one processing stage.

    configure() runs exactly once, in chain order, before any datum flows.
    process() maps one item to zero or more downstream items and preserves
    the ordering of whatever it emits. flush() runs at end of stream; after
    it returns the gadget emits nothing further. teardown() always runs at
    the end of the connection (also on abort) and releases resources.
    """

    name = "gadget"

    def configure(self, properties, context):
        pass

    def process(self, item):
        yield item

    def flush(self):
        return ()

    def teardown(self):
        pass


@dataclass
class ChainContext:
    """What a gadget may see besides its own properties."""

    session_header: object = None
    store: object = None
    chain_name: str = ""

    def session_value(self, key, default=None):
        if self.session_header is None:
            return default
        return self.session_header.get(key, default)


class GadgetRegistry:
    """Name -> gadget factory. Lookup of an unregistered name fails at
    assembly time, never at first datum."""

    def __init__(self):
        self._factories = {}

    def register(self, name, factory):
        self._factories[name] = factory
        return factory

    def create(self, name):
        factory = self._factories.get(name)
        if factory is None:
            raise AssemblyError(f"no gadget registered under name {name!r}")
        return factory()

    def names(self):
        return sorted(self._factories)


@dataclass
class StageStats:
    name: str
    in_count: int = 0
    out_count: int = 0
    first_emit_ts: float = None
    last_emit_ts: float = None
    last_alive_ts: float = None   # heartbeat: stage loop is being scheduled
    max_stall_s: float = 0.0


@dataclass
class ConnectionSummary:
    chain_name: str = ""
    stages: list = field(default_factory=list)
    first_byte_ts: float = None
    last_acquisition_ts: float = None
    close_ts: float = None
    messages_in: dict = field(default_factory=dict)
    messages_out: dict = field(default_factory=dict)
    error: str = None

    def stage(self, name):
        for stats in self.stages:
            if stats.name == name:
                return stats
        raise KeyError(name)


class _Abort:
    """Sentinel that propagates a failure downstream without flushing."""

    def __repr__(self):
        return "ABORT"


_ABORT = _Abort()
_EMPTY = object()


class BoundedPipe:
    """Single-producer single-consumer FIFO on a deque.

    append/popleft are GIL-atomic, so no locks are needed: the producer
    can overshoot its capacity check only by what the consumer removed in
    between, keeping the pipe bounded.
    """

    def __init__(self, capacity=DEFAULT_QUEUE_CAPACITY):
        self._items = collections.deque()
        self.capacity = capacity

    def try_put(self, item):
        if len(self._items) >= self.capacity:
            return False
        self._items.append(item)
        return True

    def try_get(self):
        try:
            return self._items.popleft()
        except IndexError:
            return _EMPTY

    def get(self, timeout=None):
        """Blocking pop for consumers outside the stage loop (tests, the
        connection writer)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            item = self.try_get()
            if item is not _EMPTY:
                return item
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError("pipe stayed empty")
            time.sleep(_IDLE_SLEEP_S)

    def __len__(self):
        return len(self._items)


class Chain:
    """An assembled gadget chain ready to stream one connection."""

    def __init__(self, name, gadgets, queue_capacity=DEFAULT_QUEUE_CAPACITY):
        self.name = name
        self.gadgets = gadgets
        self.pipes = [BoundedPipe(queue_capacity)
                      for _ in range(len(gadgets) + 1)]
        self.stats = [StageStats(g.name) for g in gadgets]
        self.aborted = threading.Event()
        self.failure = None
        self._threads = []

    @property
    def input_pipe(self):
        return self.pipes[0]

    @property
    def output_pipe(self):
        return self.pipes[-1]

    def start(self):
        for idx, gadget in enumerate(self.gadgets):
            thread = threading.Thread(
                target=self._run_stage, args=(idx, gadget),
                name=f"chain-{self.name}-{idx}-{gadget.name}", daemon=True)
            thread.start()
            self._threads.append(thread)

    def feed(self, item):
        """Blocking put honoring abort; returns False if the chain died."""
        return self._put(self.pipes[0], item)

    def finish(self):
        """Signal end of input; flushes cascade stage by stage."""
        self._put(self.pipes[0], END_OF_STREAM)

    def abort_feed(self, reason=None):
        """Abort from the input side (no flush happens)."""
        if reason and self.failure is None:
            self.failure = reason
        self.aborted.set()
        self._put(self.pipes[0], _ABORT)

    def join(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        for thread in self._threads:
            remaining = (None if deadline is None
                         else max(0.0, deadline - time.monotonic()))
            thread.join(remaining)

    def teardown(self):
        for gadget in self.gadgets:
            try:
                gadget.teardown()
            except Exception:
                log.exception("teardown of gadget %s failed", gadget.name)

    def _fail(self, idx, err):
        log.exception("stage %d (%s) failed", idx, self.gadgets[idx].name)
        if self.failure is None:
            self.failure = f"stage {self.gadgets[idx].name}: {err}"
        self.aborted.set()

    def _put(self, pipe, item):
        """Bounded put that gives up once the chain is aborted."""
        while not pipe.try_put(item):
            if self.aborted.is_set() and item is not _ABORT:
                return False
            time.sleep(_IDLE_SLEEP_S)
        return True

    def _emit(self, idx, item):
        if self._put(self.pipes[idx + 1], item):
            stats = self.stats[idx]
            stats.out_count += 1
            now = time.monotonic()
            if stats.first_emit_ts is None:
                stats.first_emit_ts = now
            stats.last_emit_ts = now

    def _run_stage(self, idx, gadget):
        inp = self.pipes[idx]
        stats = self.stats[idx]
        downstream = self.pipes[idx + 1]
        try:
            while True:
                now = time.monotonic()
                if stats.last_alive_ts is not None:
                    stats.max_stall_s = max(stats.max_stall_s,
                                            now - stats.last_alive_ts)
                stats.last_alive_ts = now
                item = inp.try_get()
                if item is _EMPTY:
                    if self.aborted.is_set():
                        self._put(downstream, _ABORT)
                        return
                    time.sleep(_IDLE_SLEEP_S)
                    continue
                if item is _ABORT:
                    self._put(downstream, _ABORT)
                    return
                if isinstance(item, EndOfStream):
                    if self.aborted.is_set():
                        self._put(downstream, _ABORT)
                        return
                    for out in gadget.flush():
                        self._emit(idx, out)
                    self._put(downstream, END_OF_STREAM)
                    return
                if self.aborted.is_set():
                    continue  # discard: the chain is dying
                stats.in_count += 1
                for out in gadget.process(item):
                    self._emit(idx, out)
        except Exception as err:
            self._fail(idx, err)
            self._put(downstream, _ABORT)


def assemble_chain(chain_config: ChainConfig, registry: GadgetRegistry,
                   context: ChainContext, name="",
                   queue_capacity=DEFAULT_QUEUE_CAPACITY):
    """Instantiate and configure every gadget, in chain order.

    Each gadget's configure runs exactly once before any datum flows;
    gadgets that load models do the load here. Any failure raises
    AssemblyError and no data is ever processed.
    """
    gadgets = []
    for gadget_config in chain_config.gadgets:
        gadgets.append(registry.create(gadget_config.name))
    for gadget, gadget_config in zip(gadgets, chain_config.gadgets):
        try:
            gadget.configure(dict(gadget_config.properties), context)
        except AssemblyError:
            _teardown_partial(gadgets)
            raise
        except Exception as err:
            _teardown_partial(gadgets)
            raise AssemblyError(
                f"configure of gadget {gadget_config.name!r} failed: {err}") from err
    return Chain(name or "inline", gadgets, queue_capacity)


def _teardown_partial(gadgets):
    for gadget in gadgets:
        try:
            gadget.teardown()
        except Exception:
            log.exception("teardown of gadget %s failed", gadget.name)
