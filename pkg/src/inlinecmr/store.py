"""Cross-scan session store.

Holds serialized artifacts (e.g. long-axis landmark geometry, rest-scan
sector flows) between connections of one exam, keyed by
(session_key, artifact_kind). Entries expire after a TTL and the store
evicts oldest-first at capacity; eviction never fails the pipeline.
"""

from __future__ import annotations

import logging
import threading
import time

log = logging.getLogger(__name__)

DEFAULT_TTL_S = 2 * 3600.0
DEFAULT_CAPACITY = 256


class SessionStore:
    def __init__(self, ttl_s=DEFAULT_TTL_S, capacity=DEFAULT_CAPACITY, clock=time.monotonic):
        self._ttl = float(ttl_s)
        self._capacity = int(capacity)
        self._clock = clock
        self._lock = threading.Lock()
        self._entries = {}   # (session_key, kind) -> (payload bytes, timestamp)

    def put(self, session_key, artifact_kind, payload):
        if not session_key or not artifact_kind:
            raise ValueError("session_key and artifact_kind must be non-empty")
        if payload is None:
            raise ValueError("put requires a payload")
        payload = bytes(payload)
        with self._lock:
            now = self._clock()
            self._expire(now)
            key = (session_key, artifact_kind)
            if key not in self._entries and len(self._entries) >= self._capacity:
                oldest = min(self._entries, key=lambda k: self._entries[k][1])
                log.warning("session store full, evicting %s", oldest)
                del self._entries[oldest]
            self._entries[key] = (payload, now)

    def get(self, session_key, artifact_kind):
        """Payload bytes, or None when absent or expired."""
        with self._lock:
            self._expire(self._clock())
            entry = self._entries.get((session_key, artifact_kind))
            return None if entry is None else entry[0]

    def _expire(self, now):
        dead = [k for k, (_, ts) in self._entries.items() if now - ts > self._ttl]
        for k in dead:
            del self._entries[k]

    def __len__(self):
        with self._lock:
            return len(self._entries)
