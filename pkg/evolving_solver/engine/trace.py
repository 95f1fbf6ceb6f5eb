"""Ordered event trace of one solve."""

from typing import Any

from ..models.reports import EventKind, TraceEvent


class Trace:
    def __init__(self) -> None:
        self.events: list[TraceEvent] = []

    def emit(self, kind: EventKind, phase: int, node: int | None = None, **data: Any) -> None:
        self.events.append(TraceEvent(seq=len(self.events), kind=kind, phase=phase, node=node, data=data))


def first_divergence(stored: list[TraceEvent], replayed: list[TraceEvent]) -> dict[str, Any] | None:
    """First index where two traces differ, with both events (None when equal)"""
    for i, (a, b) in enumerate(zip(stored, replayed, strict=False)):
        if a.canonical_json() != b.canonical_json():
            return {"index": i, "stored": a.model_dump(mode="json"), "replayed": b.model_dump(mode="json")}
    if len(stored) != len(replayed):
        i = min(len(stored), len(replayed))
        return {
            "index": i,
            "stored": stored[i].model_dump(mode="json") if i < len(stored) else None,
            "replayed": replayed[i].model_dump(mode="json") if i < len(replayed) else None,
        }
    return None
