"""Streaming classification engine.

Every message flows store -> change-point detection -> (on a trigger)
features -> model -> post-processing -> event. Per-entity ordering is strict
because a single worker drains the inbound queue; the bounded queue gives the
reader thread backpressure. Failures in any stage become dead-letter records
instead of killing the stream.
"""

from __future__ import annotations

import collections
import json
import socket
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from queue import Queue
from typing import Callable, Iterable, Iterator, TextIO

import numpy as np

from .changepoint import ChangePointReason, CpdConfig, detect_changepoint
from .checkpoint import Checkpoint
from .features import build_features
from .ingest import AisMessage, IngestError, normalize_message, parse_record
from .model import forward, softmax
from .postprocess import ClassificationEvent, PostProcessConfig, apply_postprocess
from .taxonomy import EntityClass
from .trackstore import TrackStore

DEFAULT_ENTITY_MIN_CONTEXT = 500
DEFAULT_ENTITY_REFRESH = 500
DEFAULT_METRICS_WINDOW_S = 60.0
DEFAULT_QUEUE_DEPTH = 1024
MAX_DEAD_LETTERS = 1000


@dataclass(frozen=True, slots=True)
class DeadLetter:
    stage: str
    error: str
    entity_id: str | None = None
    payload: str = ""


@dataclass(frozen=True, slots=True)
class MetricsSnapshot:
    messages_ingested: int
    duplicates: int
    changepoints_fired: int
    events_total: int
    dead_letters: int
    per_class_counts: dict[str, int]
    per_class_rates: dict[str, float]
    rate_window_s: float

    def to_dict(self) -> dict:
        return {
            "messages_ingested": self.messages_ingested,
            "duplicates": self.duplicates,
            "changepoints_fired": self.changepoints_fired,
            "events_total": self.events_total,
            "dead_letters": self.dead_letters,
            "per_class_counts": self.per_class_counts,
            "per_class_rates": self.per_class_rates,
            "rate_window_s": self.rate_window_s,
        }


class _Metrics:
    """Thread-safe counters plus a sliding-window event log for rates."""

    def __init__(self, class_names: tuple[str, ...],
                 window_s: float = DEFAULT_METRICS_WINDOW_S,
                 clock: Callable[[], float] = time.monotonic):
        self._lock = threading.Lock()
        self._clock = clock
        self._window_s = window_s
        self.messages_ingested = 0
        self.duplicates = 0
        self.changepoints = 0
        self.dead_letters = 0
        self.per_class = {name: 0 for name in class_names}
        self._recent: collections.deque[tuple[float, str]] = collections.deque()

    def record_message(self, duplicate: bool) -> None:
        with self._lock:
            self.messages_ingested += 1
            if duplicate:
                self.duplicates += 1

    def record_changepoint(self) -> None:
        with self._lock:
            self.changepoints += 1

    def record_event(self, label: str) -> None:
        with self._lock:
            self.per_class[label] = self.per_class.get(label, 0) + 1
            self._recent.append((self._clock(), label))

    def record_dead_letter(self) -> None:
        with self._lock:
            self.dead_letters += 1

    def snapshot(self) -> MetricsSnapshot:
        with self._lock:
            now = self._clock()
            cutoff = now - self._window_s
            while self._recent and self._recent[0][0] < cutoff:
                self._recent.popleft()
            rates: dict[str, float] = {name: 0.0 for name in self.per_class}
            for _, label in self._recent:
                rates[label] = rates.get(label, 0.0) + 1.0
            for name in rates:
                rates[name] /= self._window_s
            return MetricsSnapshot(
                messages_ingested=self.messages_ingested,
                duplicates=self.duplicates,
                changepoints_fired=self.changepoints,
                events_total=sum(self.per_class.values()),
                dead_letters=self.dead_letters,
                per_class_counts=dict(self.per_class),
                per_class_rates=rates,
                rate_window_s=self._window_s,
            )


class Engine:
    """Per-message pipeline around loaded activity (and optional entity)
    checkpoints.

    Entity classification is lazy: Unknown until an entity has at least
    entity_min_context stored messages, then the entity model's verdict,
    cached and refreshed only after the history grows by
    entity_refresh_increment further messages.
    """

    def __init__(
        self,
        activity: Checkpoint,
        entity: Checkpoint | None = None,
        cpd: CpdConfig | None = None,
        post: PostProcessConfig | None = None,
        entity_min_context: int = DEFAULT_ENTITY_MIN_CONTEXT,
        entity_refresh_increment: int = DEFAULT_ENTITY_REFRESH,
        store: TrackStore | None = None,
        metrics_window_s: float = DEFAULT_METRICS_WINDOW_S,
        clock: Callable[[], float] = time.monotonic,
    ):
        if entity_min_context < 1:
            raise ValueError("entity_min_context must be at least 1")
        if entity_refresh_increment < 1:
            raise ValueError("entity_refresh_increment must be at least 1")
        self.activity = activity
        self.entity = entity
        self.cpd = cpd or CpdConfig()
        self.post = post or PostProcessConfig()
        self.entity_min_context = entity_min_context
        self.entity_refresh_increment = entity_refresh_increment
        self.store = store or TrackStore()
        self.metrics = _Metrics(activity.class_names, metrics_window_s, clock)
        self.dead_letters: collections.deque[DeadLetter] = collections.deque(
            maxlen=MAX_DEAD_LETTERS)
        self._entity_cache: dict[str, tuple[EntityClass, int]] = {}

    def on_message(self, msg: AisMessage) -> ClassificationEvent | None:
        """Store one message; return an event iff a changepoint fires."""
        stored = self.store.append(msg)
        self.metrics.record_message(duplicate=not stored)
        if not stored:
            return None
        try:
            window = self.store.assemble_window(msg.entity_id)
            decision = detect_changepoint(window, self.cpd)
            if not decision.is_changepoint:
                return None
            self.metrics.record_changepoint()
            return self._classify(window, decision.reason)
        except Exception as exc:  # keep the stream alive
            self._dead_letter("pipeline", exc, msg.entity_id, repr(msg))
            return None

    def _classify(self, window, reason: ChangePointReason) -> ClassificationEvent:
        entity_class = self.classify_entity(window.entity_id)
        feats = build_features(window, self.activity.feature_config)
        logits = forward(self.activity.model_config, self.activity.weights,
                         feats.rows)
        probs = softmax(logits)
        event = apply_postprocess(
            probs, self.activity.class_names, window.messages[-1],
            entity_class, self.post, trigger_reason=reason.value)
        self.metrics.record_event(event.label)
        return event

    def classify_entity(self, entity_id: str) -> EntityClass:
        """Cached vessel-vs-buoy verdict; Unknown without enough history or
        without an entity model."""
        n = self.store.history_len(entity_id)
        if self.entity is None or n < self.entity_min_context:
            return EntityClass.UNKNOWN
        cached = self._entity_cache.get(entity_id)
        if cached is not None and n - cached[1] < self.entity_refresh_increment:
            return cached[0]
        window = self.store.assemble_window(entity_id)
        feats = build_features(window, self.entity.feature_config)
        logits = forward(self.entity.model_config, self.entity.weights,
                         feats.rows)
        label = self.entity.class_names[int(np.argmax(logits))]
        verdict = EntityClass.from_label(label)
        self._entity_cache[entity_id] = (verdict, n)
        return verdict

    def metrics_snapshot(self) -> MetricsSnapshot:
        return self.metrics.snapshot()

    def _dead_letter(self, stage: str, exc: Exception,
                     entity_id: str | None, payload: str) -> None:
        self.dead_letters.append(DeadLetter(
            stage=stage, error=f"{type(exc).__name__}: {exc}",
            entity_id=entity_id, payload=payload[:200]))
        self.metrics.record_dead_letter()


# -- stream serving ------------------------------------------------------------

@dataclass(slots=True)
class ServeStats:
    lines_read: int = 0
    events_emitted: int = 0
    dead_letters: int = 0


def serve_stream(
    engine: Engine,
    lines: Iterable[str],
    out: TextIO,
    fmt: str = "csv",
    queue_depth: int = DEFAULT_QUEUE_DEPTH,
    on_event: Callable[[ClassificationEvent], None] | None = None,
) -> ServeStats:
    """Drain a line stream through the engine, writing one JSON event per
    fired changepoint to out.

    A reader thread parses and feeds a bounded queue (blocking when the
    worker falls behind); this function is the single worker, so per-entity
    ordering is preserved.
    """
    stats = ServeStats()
    q: Queue = Queue(maxsize=queue_depth)
    done = object()

    def reader():
        for raw in lines:
            raw = raw.strip()
            if not raw:
                continue
            stats.lines_read += 1
            try:
                msg = normalize_message(parse_record(raw, fmt=fmt))
            except IngestError as exc:
                engine._dead_letter("parse", exc, None, raw)
                continue
            q.put(msg)
        q.put(done)

    t = threading.Thread(target=reader, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        event = engine.on_message(item)
        if event is not None:
            stats.events_emitted += 1
            out.write(event.to_json() + "\n")
            out.flush()
            if on_event is not None:
                on_event(event)
    t.join()
    stats.dead_letters = len(engine.dead_letters)
    return stats


class _MetricsHandler(BaseHTTPRequestHandler):
    engine: Engine  # set by start_metrics_server

    def do_GET(self):  # noqa: N802 (stdlib naming)
        body = json.dumps(self.engine.metrics_snapshot().to_dict()).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):  # quiet
        pass


def start_metrics_server(engine: Engine, port: int = 0,
                         host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Serve metrics JSON at / on a daemon thread; port 0 picks a free port.

    The caller owns shutdown(); the bound port is server.server_address[1].
    """
    handler = type("_BoundMetricsHandler", (_MetricsHandler,),
                   {"engine": engine})
    server = ThreadingHTTPServer((host, port), handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def tcp_lines(host: str, port: int) -> Iterator[str]:
    """Accept a single TCP client and yield its newline-delimited records."""
    with socket.create_server((host, port)) as srv:
        conn, _ = srv.accept()
        with conn, conn.makefile("r", encoding="utf-8", newline="\n") as fh:
            yield from fh
