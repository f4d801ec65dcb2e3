"""Append-only, hashable event log of a run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Union

from ..audit import VERBS, AuditRecord
from ..core import canonical

# non-audit kinds written by service loops
INFO_KINDS = frozenset({"cycle", "status", "request"})


class MalformedLog(ValueError):
    pass


@dataclass(frozen=True)
class EventEntry:
    time: float
    sequence_no: int
    service: str
    event_kind: str
    payload: bytes  # canonical serialization

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "seq": self.sequence_no,
            "service": self.service,
            "kind": self.event_kind,
            "payload": json.loads(self.payload),
        }

    def line(self) -> bytes:
        return canonical(self.to_dict())

    def data(self) -> Any:
        return json.loads(self.payload)

    @property
    def is_audit(self) -> bool:
        return self.event_kind in VERBS

    def audit_record(self) -> AuditRecord:
        d = self.data()
        if not isinstance(d, Mapping) or "subject" not in d:
            raise MalformedLog(f"audit entry {self.sequence_no} has no subject")
        return AuditRecord(self.time, self.service, str(d["subject"]), self.event_kind, d.get("detail", {}))

    @classmethod
    def from_line(cls, line: Union[str, bytes]) -> EventEntry:
        try:
            d = json.loads(line)
            return cls(float(d["time"]), int(d["seq"]), str(d["service"]), str(d["kind"]), canonical(d["payload"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLog(f"bad event line {line!r}: {exc}") from None


class EventLog:
    """(time, sequence_no) strictly increasing; hash identifies a run."""

    def __init__(self, entries: Iterable[EventEntry] = ()) -> None:
        self.entries: list[EventEntry] = []
        for e in entries:
            self._append(e)

    def _append(self, e: EventEntry) -> EventEntry:
        if self.entries:
            last = self.entries[-1]
            if (e.time, e.sequence_no) <= (last.time, last.sequence_no) or e.time < last.time:
                raise MalformedLog(f"entry {e.sequence_no} at {e.time} out of order")
        self.entries.append(e)
        return e

    def append(self, time: float, service: str, kind: str, payload: Any) -> EventEntry:
        seq = self.entries[-1].sequence_no + 1 if self.entries else 0
        return self._append(EventEntry(time, seq, service, kind, canonical(payload)))

    def append_audit(self, record: AuditRecord) -> EventEntry:
        return self.append(record.time, record.service, record.action, {"subject": record.subject, "detail": dict(record.detail)})

    def audit_records(self) -> list[AuditRecord]:
        return [e.audit_record() for e in self.entries if e.is_audit]

    def hash(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.line())
            h.update(b"\n")
        return h.hexdigest()

    def __iter__(self) -> Iterator[EventEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def kinds(self) -> set[str]:
        return {e.event_kind for e in self.entries}

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            for e in self.entries:
                fh.write(e.line() + b"\n")

    @classmethod
    def read(cls, path: Union[str, Path]) -> EventLog:
        with open(path, "rb") as fh:
            return cls(EventEntry.from_line(line) for line in fh if line.strip())

    @classmethod
    def merge(cls, logs: Iterable[Iterable[EventEntry]]) -> EventLog:
        """Merge per-service logs by (time, service, local seq) and renumber."""
        allents = sorted((e for lg in logs for e in lg), key=lambda e: (e.time, e.service, e.sequence_no))
        return cls(EventEntry(e.time, i, e.service, e.event_kind, e.payload) for i, e in enumerate(allents))
