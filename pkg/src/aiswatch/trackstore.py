"""Per-entity message history and bounded inference windows.

Retention and window assembly share one horizon: at most 2048 messages per
window, spanning at most 30 days. Out-of-order arrivals are inserted by
timestamp (satellite AIS delivers late messages); exact duplicates are
dropped.
"""

from __future__ import annotations

import json
import re
import threading
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from pathlib import Path

from .ingest import AisMessage, format_record, parse_record

WINDOW_MAX_MESSAGES = 2048
WINDOW_MAX_SPAN_S = 30 * 86400  # 2,592,000 s


class UnknownEntity(KeyError):
    """Raised when a window is requested for an entity with no history."""


class EmptyWindow(ValueError):
    """Raised by consumers handed a window with no messages."""


@dataclass(frozen=True, slots=True)
class TrackWindow:
    """Time-ordered bounded slice of one entity's messages.

    ``assembled_at`` is the newest message timestamp at assembly time, so
    identical stores assemble identical windows.
    """

    entity_id: str
    messages: tuple[AisMessage, ...]
    assembled_at: int

    def __len__(self) -> int:
        return len(self.messages)

    @property
    def span_s(self) -> int:
        return self.messages[-1].timestamp - self.messages[0].timestamp


class _Track:
    __slots__ = ("messages", "timestamps", "lock")

    def __init__(self) -> None:
        self.messages: list[AisMessage] = []
        self.timestamps: list[int] = []
        self.lock = threading.Lock()


class TrackStore:
    """Bounded per-entity history store.

    All operations on one entity serialize on that entity's lock; different
    entities may be touched concurrently. Optionally journals every accepted
    message to an append-only JSONL file per entity for restart.
    """

    def __init__(
        self,
        max_messages: int = WINDOW_MAX_MESSAGES,
        max_span_s: int = WINDOW_MAX_SPAN_S,
        journal_dir: str | Path | None = None,
    ):
        self.max_messages = max_messages
        self.max_span_s = max_span_s
        self._tracks: dict[str, _Track] = {}
        self._dict_lock = threading.Lock()
        self._journal_dir = Path(journal_dir) if journal_dir is not None else None
        if self._journal_dir is not None:
            self._journal_dir.mkdir(parents=True, exist_ok=True)

    def _track(self, entity_id: str) -> _Track:
        with self._dict_lock:
            track = self._tracks.get(entity_id)
            if track is None:
                track = self._tracks[entity_id] = _Track()
            return track

    def append(self, msg: AisMessage, journal: bool = True) -> bool:
        """Insert a message in timestamp order.

        Returns True if stored, False if dropped as an exact duplicate
        (same timestamp, lat, lon, sog, cog). History strictly older than
        the retention horizon relative to the newest message is evicted.
        """
        track = self._track(msg.entity_id)
        with track.lock:
            ts = track.timestamps
            idx = bisect_right(ts, msg.timestamp)
            # Duplicates share a timestamp, so only the equal-timestamp run
            # left of the insertion point needs checking.
            j = idx - 1
            while j >= 0 and ts[j] == msg.timestamp:
                prev = track.messages[j]
                if (prev.lat == msg.lat and prev.lon == msg.lon
                        and prev.sog == msg.sog and prev.cog == msg.cog):
                    return False
                j -= 1
            track.messages.insert(idx, msg)
            ts.insert(idx, msg.timestamp)
            cutoff = ts[-1] - self.max_span_s
            if ts[0] < cutoff:
                drop = bisect_left(ts, cutoff)
                del track.messages[:drop]
                del ts[:drop]
        if journal and self._journal_dir is not None:
            self._journal_append(msg)
        return True

    def assemble_window(self, entity_id: str) -> TrackWindow:
        """Return the newest messages satisfying both window bounds.

        Trims oldest first until count <= max_messages and span <= max_span_s.
        """
        track = self._tracks.get(entity_id)
        if track is None:
            raise UnknownEntity(entity_id)
        with track.lock:
            if not track.messages:
                raise UnknownEntity(entity_id)
            start = max(0, len(track.messages) - self.max_messages)
            newest = track.timestamps[-1]
            cutoff = newest - self.max_span_s
            if track.timestamps[start] < cutoff:
                start = bisect_left(track.timestamps, cutoff, lo=start)
            return TrackWindow(
                entity_id=entity_id,
                messages=tuple(track.messages[start:]),
                assembled_at=newest,
            )

    def history_len(self, entity_id: str) -> int:
        track = self._tracks.get(entity_id)
        if track is None:
            return 0
        with track.lock:
            return len(track.messages)

    def entities(self) -> list[str]:
        with self._dict_lock:
            return list(self._tracks)

    # -- journal ----------------------------------------------------------

    def _journal_path(self, entity_id: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", entity_id)
        return self._journal_dir / f"{safe}.jsonl"

    def _journal_append(self, msg: AisMessage) -> None:
        with self._journal_path(msg.entity_id).open("a", encoding="utf-8") as fh:
            fh.write(format_record(msg, fmt="jsonl") + "\n")

    @classmethod
    def from_journal(
        cls,
        journal_dir: str | Path,
        max_messages: int = WINDOW_MAX_MESSAGES,
        max_span_s: int = WINDOW_MAX_SPAN_S,
    ) -> "TrackStore":
        """Rebuild a store by replaying per-entity JSONL journals."""
        store = cls(max_messages=max_messages, max_span_s=max_span_s,
                    journal_dir=journal_dir)
        for path in sorted(Path(journal_dir).glob("*.jsonl")):
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        store.append(parse_record(line, fmt="jsonl"), journal=False)
        return store
