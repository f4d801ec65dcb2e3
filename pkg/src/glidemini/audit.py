"""Audit records shared by every service, and the per-glidein waste metric."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

VERBS = frozenset(
    {
        "submitted",
        "queued",
        "assigned",
        "validated",
        "registered",
        "claimed",
        "started",
        "completed",
        "failed",
        "retiring",
        "done",
        "rejected_auth",
    }
)


class UnknownVerb(ValueError):
    pass


class NotTerminal(ValueError):
    """Raised by :func:`waste` for a glidein that has not finished."""


@dataclass(frozen=True)
class AuditRecord:
    """One state transition (or auth rejection) seen by one service.

    ``detail`` always carries ``kind`` ("job" or "glidein") and, for
    transitions, the new ``state`` so a replay can rebuild final states
    without knowing the verb semantics.
    """

    time: float
    service: str
    subject: str
    action: str
    detail: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.action not in VERBS:
            raise UnknownVerb(self.action)

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "service": self.service,
            "subject": self.subject,
            "action": self.action,
            "detail": dict(self.detail),
        }


class AuditLog:
    """Append-only list of records owned by one service."""

    def __init__(self, service: str, listeners: Iterable[Callable[[AuditRecord], None]] = ()) -> None:
        self.service = service
        self.records: list[AuditRecord] = []
        self.listeners = list(listeners)

    def emit(self, record: AuditRecord) -> AuditRecord:
        if record.action not in VERBS:
            raise UnknownVerb(record.action)
        if self.records and record.time < self.records[-1].time:
            raise ValueError("audit records must be appended in event order")
        self.records.append(record)
        for cb in self.listeners:
            cb(record)
        return record

    def record(self, time: float, subject: str, action: str, **detail: Any) -> AuditRecord:
        return self.emit(AuditRecord(time, self.service, str(subject), action, detail))

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def emit(service_log: AuditLog, record: AuditRecord) -> AuditRecord:
    return service_log.emit(record)


def replay_states(records: Iterable[AuditRecord]) -> dict[tuple[str, str], str]:
    """Final state per (kind, subject) reconstructed from audit records alone."""
    states: dict[tuple[str, str], str] = {}
    for r in records:
        st = r.detail.get("state")
        if st is not None:
            states[(r.detail.get("kind", ""), r.subject)] = st
    return states


def union_length(intervals: Iterable[tuple[float, float]]) -> float:
    """Total length covered by a set of closed intervals."""
    total = 0.0
    cur_start: Optional[float] = None
    cur_end = 0.0
    for start, end in sorted(intervals):
        if cur_start is None or start > cur_end:
            if cur_start is not None:
                total += cur_end - cur_start
            cur_start, cur_end = start, end
        else:
            cur_end = max(cur_end, end)
    if cur_start is not None:
        total += cur_end - cur_start
    return round(total, 6)


@dataclass
class GlideinTimeline:
    glidein_id: str
    submitted: Optional[float] = None
    registered: Optional[float] = None
    terminal: Optional[float] = None
    terminal_state: Optional[str] = None
    busy: list[tuple[float, float]] = field(default_factory=list)

    @property
    def busy_s(self) -> float:
        return union_length(self.busy)

    @property
    def slot_s(self) -> float:
        return round(sum(e - s for s, e in self.busy), 6)


def glidein_timelines(records: Iterable[AuditRecord]) -> dict[str, GlideinTimeline]:
    """Collect registration, termination and busy intervals per glidein.

    Busy intervals come from job completion records, whose detail carries the
    execution record written by the glidein itself.
    """
    out: dict[str, GlideinTimeline] = {}

    def tl(gid: str) -> GlideinTimeline:
        if gid not in out:
            out[gid] = GlideinTimeline(gid)
        return out[gid]

    for r in records:
        kind = r.detail.get("kind")
        if kind == "glidein":
            t = tl(r.subject)
            if r.action == "submitted" and t.submitted is None:
                t.submitted = r.time
            elif r.action == "registered" and t.registered is None:
                t.registered = r.time
            elif r.action in ("done", "failed") and r.detail.get("state") in ("Done", "Failed"):
                t.terminal = r.time
                t.terminal_state = r.detail["state"]
        elif kind == "job" and r.action in ("completed", "failed"):
            rec = r.detail.get("execution_record")
            if rec:
                tl(rec["glidein_id"]).busy.append((float(rec["start_time"]), float(rec["end_time"])))
    return out


def waste(records: Iterable[AuditRecord], glidein_id: str) -> float:
    """Idle seconds of a finished glidein: registered lifetime minus busy time.

    Glideins that failed before registering report 0. Busy time is the union
    of slot occupancy intervals, so parallel slots are not double counted.
    """
    t = glidein_timelines(records).get(glidein_id)
    if t is None or t.terminal is None:
        raise NotTerminal(glidein_id)
    if t.registered is None:
        return 0.0
    return round((t.terminal - t.registered) - t.busy_s, 6)
