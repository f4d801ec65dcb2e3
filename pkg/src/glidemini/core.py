"""Shared domain types, resource arithmetic and lifecycle state machines.

Everything here is a value type or a pure function. Services copy what they
need and never share instances across event loops.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional, Union


class ResourceUnderflow(ValueError):
    """Raised when carving more resources than are available."""


class IllegalTransition(ValueError):
    """Raised when an event does not apply to the current state."""

    def __init__(self, state: Any, event: Any) -> None:
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: {_name(state)} + {_name(event)}")


def _name(value: Any) -> str:
    return value.value if isinstance(value, enum.Enum) else str(value)


def tadd(t: float, delta: float) -> float:
    """Add a duration to a sim timestamp, rounded to the microsecond.

    Keeps timestamps such as ``8.01 + 10`` printing as ``18.01`` so event
    logs stay readable and comparisons stay exact.
    """
    return round(t + delta, 6)


# -- canonical form ---------------------------------------------------------


def to_plain(value: Any) -> Any:
    """Convert dataclasses, enums and containers into JSON-ready values."""
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Mapping):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(to_plain(v) for v in value)
    if isinstance(value, bytes):
        return value.hex()
    return value


def canonical(value: Any) -> bytes:
    """Canonical serialization: sorted keys, no insignificant whitespace, UTF-8."""
    return json.dumps(
        to_plain(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


# -- resources --------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ResourceSpec:
    """Integer cores, memory (MiB), disk (MiB) and GPUs."""

    cores: int = 0
    memory_mb: int = 0
    disk_mb: int = 0
    gpus: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{f.name} must be an integer, got {v!r}")
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.cores, self.memory_mb, self.disk_mb, self.gpus)

    def __add__(self, other: ResourceSpec) -> ResourceSpec:
        return ResourceSpec(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __sub__(self, other: ResourceSpec) -> ResourceSpec:
        return carve(self, other)

    def to_dict(self) -> dict[str, int]:
        return {"cores": self.cores, "memory_mb": self.memory_mb, "disk_mb": self.disk_mb, "gpus": self.gpus}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ResourceSpec:
        unknown = set(data) - {"cores", "memory_mb", "disk_mb", "gpus"}
        if unknown:
            raise ValueError(f"unknown resource fields: {sorted(unknown)}")
        return cls(**{k: data[k] for k in data})


ZERO = ResourceSpec()


def fits(requirements: ResourceSpec, available: ResourceSpec) -> bool:
    """True iff every field of ``requirements`` is <= the same field of ``available``."""
    return all(r <= a for r, a in zip(requirements.as_tuple(), available.as_tuple()))


def carve(available: ResourceSpec, requirements: ResourceSpec) -> ResourceSpec:
    """Return ``available - requirements``; raises ResourceUnderflow if it does not fit."""
    if not fits(requirements, available):
        raise ResourceUnderflow(f"cannot carve {requirements} from {available}")
    return ResourceSpec(*(a - r for a, r in zip(available.as_tuple(), requirements.as_tuple())))


def release(remaining: ResourceSpec, carved: ResourceSpec) -> ResourceSpec:
    """Inverse of :func:`carve`."""
    return remaining + carved


# -- states and events ------------------------------------------------------


class JobState(str, enum.Enum):
    IDLE = "Idle"
    MATCHED = "Matched"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    REMOVED = "Removed"


class JobEvent(str, enum.Enum):
    MATCH = "match"
    UNMATCH = "unmatch"  # claim refused or execution point vanished
    START = "start"
    COMPLETE = "complete"
    FAIL = "fail"
    REMOVE = "remove"


class GlideinState(str, enum.Enum):
    SUBMITTED = "Submitted"
    QUEUED = "Queued"
    STARTING = "Starting"
    REGISTERED = "Registered"
    RUNNING = "Running"
    RETIRING = "Retiring"
    DONE = "Done"
    FAILED = "Failed"


class GlideinEvent(str, enum.Enum):
    QUEUED = "queued"
    NODE_ASSIGNED = "node_assigned"
    REGISTERED = "registered"
    RUNNING = "running"
    JOBS_DRAINED = "job_finished_and_none_idle_pending"
    RETIRE = "retire"
    RETIRED = "retired"
    FAILED = "failed"


# Names used in CE/pool notifications that map onto the events above.
GLIDEIN_EVENT_ALIASES = {
    "started": GlideinEvent.NODE_ASSIGNED,
    "idle": GlideinEvent.JOBS_DRAINED,
    "retiring": GlideinEvent.RETIRE,
    "done": GlideinEvent.RETIRED,
}

JOB_TERMINAL = frozenset({JobState.COMPLETED, JobState.FAILED, JobState.REMOVED})
GLIDEIN_TERMINAL = frozenset({GlideinState.DONE, GlideinState.FAILED})
# States that count toward pressure at an entry.
PRESSURE_STATES = frozenset(
    {
        GlideinState.SUBMITTED,
        GlideinState.QUEUED,
        GlideinState.STARTING,
        GlideinState.REGISTERED,
        GlideinState.RUNNING,
    }
)
DETECTED_STATES = frozenset({GlideinState.REGISTERED, GlideinState.RUNNING, GlideinState.RETIRING, GlideinState.DONE})

JOB_TRANSITIONS: dict[tuple[JobState, JobEvent], JobState] = {
    (JobState.IDLE, JobEvent.MATCH): JobState.MATCHED,
    (JobState.IDLE, JobEvent.REMOVE): JobState.REMOVED,
    (JobState.MATCHED, JobEvent.UNMATCH): JobState.IDLE,
    (JobState.MATCHED, JobEvent.START): JobState.RUNNING,
    (JobState.RUNNING, JobEvent.COMPLETE): JobState.COMPLETED,
    (JobState.RUNNING, JobEvent.FAIL): JobState.FAILED,
}

_G = GlideinState
_E = GlideinEvent
GLIDEIN_TRANSITIONS: dict[tuple[GlideinState, GlideinEvent], GlideinState] = {
    (_G.SUBMITTED, _E.QUEUED): _G.QUEUED,
    (_G.QUEUED, _E.NODE_ASSIGNED): _G.STARTING,
    (_G.STARTING, _E.REGISTERED): _G.REGISTERED,
    (_G.REGISTERED, _E.RUNNING): _G.RUNNING,
    (_G.RUNNING, _E.JOBS_DRAINED): _G.REGISTERED,
    (_G.REGISTERED, _E.RETIRE): _G.RETIRING,
    (_G.RUNNING, _E.RETIRE): _G.RETIRING,
    (_G.RETIRING, _E.RETIRED): _G.DONE,
}
for _s in (_G.SUBMITTED, _G.QUEUED, _G.STARTING, _G.REGISTERED, _G.RUNNING, _G.RETIRING):
    GLIDEIN_TRANSITIONS[(_s, _E.FAILED)] = _G.FAILED
del _s

State = Union[JobState, GlideinState]


def parse_glidein_event(event: Union[str, GlideinEvent]) -> GlideinEvent:
    if isinstance(event, GlideinEvent):
        return event
    if event in GLIDEIN_EVENT_ALIASES:
        return GLIDEIN_EVENT_ALIASES[event]
    return GlideinEvent(event)


def transition(state: State, event: Union[str, JobEvent, GlideinEvent]) -> State:
    """Return the unique successor of ``state`` under ``event``.

    Works for both job and glidein states; the state's type picks the table.
    Raises IllegalTransition for any pair not in the table, including every
    event applied to a terminal state.
    """
    try:
        if isinstance(state, GlideinState):
            return GLIDEIN_TRANSITIONS[(state, parse_glidein_event(event))]
        if isinstance(state, JobState):
            return JOB_TRANSITIONS[(state, JobEvent(event))]
    except (KeyError, ValueError):
        raise IllegalTransition(state, event) from None
    raise TypeError(f"not a lifecycle state: {state!r}")


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class ExecutionRecord:
    glidein_id: str
    slot_id: int
    start_time: float
    end_time: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "glidein_id": self.glidein_id,
            "slot_id": self.slot_id,
            "start_time": self.start_time,
            "end_time": self.end_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionRecord:
        return cls(d["glidein_id"], int(d["slot_id"]), float(d["start_time"]), float(d["end_time"]))


@dataclass(frozen=True)
class Job:
    """A user computation. ``fail`` marks simulated jobs that end in Failed."""

    job_id: int
    owner: str
    submit_time: float
    requirements: ResourceSpec
    declared_runtime_s: float
    state: JobState = JobState.IDLE
    execution_record: Optional[ExecutionRecord] = None
    fail: bool = False

    def __post_init__(self) -> None:
        if not self.declared_runtime_s > 0:
            raise ValueError("declared_runtime_s must be positive")

    def apply(self, event: Union[str, JobEvent]) -> Job:
        return replace(self, state=transition(self.state, event))

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "owner": self.owner,
            "submit_time": self.submit_time,
            "requirements": self.requirements.to_dict(),
            "declared_runtime_s": self.declared_runtime_s,
            "state": self.state.value,
            "execution_record": None if self.execution_record is None else self.execution_record.to_dict(),
            "fail": self.fail,
        }


@dataclass(frozen=True)
class GlideinRecord:
    glidein_id: str
    entry_id: str
    client_id: str
    state: GlideinState = GlideinState.SUBMITTED
    submit_time: float = 0.0
    detected: Optional[ResourceSpec] = None
    jobs_served: int = 0

    def __post_init__(self) -> None:
        if (self.detected is not None) != (self.state in DETECTED_STATES):
            raise ValueError(f"detected must be present iff state in {sorted(s.value for s in DETECTED_STATES)}")

    def apply(self, event: Union[str, GlideinEvent], detected: Optional[ResourceSpec] = None) -> GlideinRecord:
        new_state = transition(self.state, event)
        if new_state in DETECTED_STATES:
            det = self.detected if self.detected is not None else detected
            if det is None:
                det = ZERO
        else:
            det = None
        return replace(self, state=new_state, detected=det)

    def to_dict(self) -> dict[str, Any]:
        return {
            "glidein_id": self.glidein_id,
            "entry_id": self.entry_id,
            "client_id": self.client_id,
            "state": self.state.value,
            "submit_time": self.submit_time,
            "detected": None if self.detected is None else self.detected.to_dict(),
            "jobs_served": self.jobs_served,
        }


@dataclass(frozen=True)
class EntryDescriptor:
    entry_id: str
    ce_address: str
    audience: str
    max_pressure: int
    max_submit_per_cycle: int
    trusted_clients: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.max_pressure < 1:
            raise ValueError("max_pressure must be >= 1")
        if self.max_submit_per_cycle < 1:
            raise ValueError("max_submit_per_cycle must be >= 1")

    def trusts(self, client_id: str) -> bool:
        return not self.trusted_clients or client_id in self.trusted_clients

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "ce_address": self.ce_address,
            "audience": self.audience,
            "max_pressure": self.max_pressure,
            "max_submit_per_cycle": self.max_submit_per_cycle,
            "trusted_clients": list(self.trusted_clients),
        }
