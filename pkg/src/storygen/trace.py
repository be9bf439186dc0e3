from __future__ import annotations

import threading
from typing import Any


class RunTrace:
    """Append-only, ordered event log of a run.

    Each event is a JSON-ready dict with a ``seq`` number and a ``kind``;
    the rest of the keys depend on the kind (``stage``, ``gate``, ``call``,
    ``kg_mutation``, ``words`` ...).
    """

    def __init__(self, events: list[dict[str, Any]] | None = None) -> None:
        self._events: list[dict[str, Any]] = [dict(e) for e in events or ()]
        self._lock = threading.Lock()

    def add(self, kind: str, **data: Any) -> dict[str, Any]:
        with self._lock:
            event = {"seq": len(self._events), "kind": kind, **data}
            self._events.append(event)
        return event

    @property
    def events(self) -> list[dict[str, Any]]:
        with self._lock:
            return [dict(e) for e in self._events]

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["kind"] == kind]

    def stages(self) -> list[str]:
        return [e["stage"] for e in self.of_kind("stage")]

    def __len__(self) -> int:
        return len(self._events)

    def to_list(self) -> list[dict[str, Any]]:
        return self.events

    @classmethod
    def from_list(cls, events: list[dict[str, Any]]) -> RunTrace:
        for i, e in enumerate(events):
            if e.get("seq") != i or "kind" not in e:
                raise ValueError(f"trace event {i} is malformed")
        return cls(events)
