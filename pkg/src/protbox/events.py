"""Engine event stream: monotone sequence numbers, durable jsonl log,
multiple subscribers with independent cursors."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

KEY_REQUEST_INBOUND = "KeyRequestInbound"
KEY_INSTALLED = "KeyInstalled"
CONFLICT = "Conflict"
QUARANTINE = "Quarantine"
DELETION_BACKED_UP = "DeletionBackedUp"
NEEDS_BACKUP_DECISION = "NeedsBackupDecision"
PAIR_SUSPENDED = "PairSuspended"


@dataclass
class Event:
    seq: int
    kind: str
    payload: dict
    timestamp: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "timestamp": self.timestamp,
        }


class EventLog:
    """Append-only, thread-safe; optionally persisted to a jsonl file."""

    def __init__(self, persist_path: Path | None = None):
        self._events: list[Event] = []
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._persist_path = Path(persist_path) if persist_path else None
        if self._persist_path and self._persist_path.exists():
            for line in self._persist_path.read_text("utf-8").splitlines():
                if not line.strip():
                    continue
                raw = json.loads(line)
                self._events.append(
                    Event(raw["seq"], raw["kind"], raw["payload"], raw["timestamp"])
                )

    def emit(self, kind: str, payload: dict) -> Event:
        with self._cond:
            seq = self._events[-1].seq + 1 if self._events else 1
            event = Event(seq=seq, kind=kind, payload=payload)
            self._events.append(event)
            if self._persist_path:
                self._persist_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._persist_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event.to_dict()) + "\n")
            self._cond.notify_all()
        return event

    def since(self, seq: int) -> list[Event]:
        with self._lock:
            return [e for e in self._events if e.seq > seq]

    def wait_for(self, seq: int, timeout: float | None = None) -> list[Event]:
        """Block until events newer than seq exist (or timeout); returns them."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                newer = [e for e in self._events if e.seq > seq]
                if newer:
                    return newer
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return []
                self._cond.wait(remaining)

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._events[-1].seq if self._events else 0
