"""Append-only event trace of a pipeline run.

Events are plain dicts ``{"seq", "time", "kind", ...}`` kept in memory and,
when a sink path is given, appended to a JSONL file as they happen.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Optional

logger = logging.getLogger(__name__)

Clock = Callable[[], str]


def wall_clock() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


class LogicalClock:
    """Sequence-derived timestamps, so mock runs are byte-reproducible."""

    def __init__(self, start: int = 0):
        self.tick = start

    def __call__(self) -> str:
        self.tick += 1
        return f"t{self.tick:06d}"

    def advance_past(self, *stamps: object) -> None:
        """Continue after the latest logical stamp already written."""
        for stamp in stamps:
            if isinstance(stamp, str) and stamp.startswith("t") and stamp[1:].isdigit():
                self.tick = max(self.tick, int(stamp[1:]))


def load_events(path: str) -> list[dict]:
    entries: list[dict] = []
    if not os.path.exists(path):
        return entries
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    return entries


class RunTrace:
    """
    Collects the observable steps of a run: pool pushes and pops, gate
    decisions, expansions, stop checks, review visits and warnings.
    """

    def __init__(self, sink: Optional[str] = None, clock: Clock = wall_clock):
        self.sink = sink
        self.clock = clock
        self.events: list[dict] = load_events(sink) if sink else []
        if isinstance(clock, LogicalClock):
            clock.advance_past(*(e.get("time") for e in self.events))
        if sink:
            os.makedirs(os.path.dirname(os.path.abspath(sink)), exist_ok=True)

    def log(self, kind: str, **data: Any) -> dict:
        event = {"seq": len(self.events), "time": self.clock(), "kind": kind, **data}
        self.events.append(event)
        if self.sink:
            with open(self.sink, "a", encoding="utf-8") as f:
                f.write(json.dumps(event, sort_keys=True) + "\n")
        return event

    def log_update(self, accepted: bool, sim: float, tau: float, outline_hash: str) -> dict:
        kind = "update_accepted" if accepted else "update_rejected"
        return self.log(kind, sim=sim, tau=tau, outline_hash=outline_hash)

    def log_warning(self, message: str, **data: Any) -> dict:
        logger.warning("[RunTrace] %s", message)
        return self.log("warning", message=message, **data)

    def of_kind(self, *kinds: str) -> list[dict]:
        return [e for e in self.events if e["kind"] in kinds]

    def stop_reason(self) -> Optional[str]:
        stopped = self.of_kind("stopped")
        return stopped[-1]["reason"] if stopped else None

    def __len__(self) -> int:
        return len(self.events)


def summarize(events: Iterable[dict]) -> dict[str, Any]:
    """Counts per event kind plus the headline numbers of the outline loop."""
    events = list(events)
    counts = Counter(e["kind"] for e in events)
    sims = [e["sim"] for e in events if e["kind"] in ("update_accepted", "update_rejected")]
    stopped = [e for e in events if e["kind"] == "stopped"]
    return {
        "events": len(events),
        "counts": dict(sorted(counts.items())),
        "stop_reason": stopped[-1]["reason"] if stopped else None,
        "consulted": stopped[-1].get("consulted") if stopped else None,
        "acceptance_rate": counts["update_accepted"] / len(sims) if sims else None,
        "last_similarity": sims[-1] if sims else None,
    }
