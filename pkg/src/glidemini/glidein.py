"""Pilot state machine: validate, detect, register, run jobs in slots, retire."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .audit import AuditLog
from .core import (
    ExecutionRecord,
    GlideinEvent,
    GlideinState,
    ResourceSpec,
    carve,
    fits,
    release,
    tadd,
    transition,
)

_VERBS = {
    (GlideinState.STARTING, GlideinState.REGISTERED): "registered",
    (GlideinState.REGISTERED, GlideinState.RUNNING): "started",
    (GlideinState.RUNNING, GlideinState.REGISTERED): "completed",
    (None, GlideinState.RETIRING): "retiring",
    (None, GlideinState.DONE): "done",
    (None, GlideinState.FAILED): "failed",
}

INSUFFICIENT_RESOURCES = "insufficient-resources"
RETIRING = "retiring"
NOT_READY = "not-ready"
MAX_REGISTRATION_FAILURES = 3


class ClaimRejected(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


class UnknownSlot(KeyError):
    pass


class PoolUnavailable(Exception):
    """Registration could not reach the pool."""


@dataclass(frozen=True)
class DynamicSlot:
    job_id: int
    carved: ResourceSpec
    start_time: float
    end_time: float
    fail: bool = False


@dataclass(frozen=True)
class SlotResult:
    job_id: int
    execution_record: ExecutionRecord
    failed: bool


@dataclass
class GlideinRuntime:
    glidein_id: str
    client_id: str
    detected: Optional[ResourceSpec] = None
    remaining: Optional[ResourceSpec] = None
    dynamic_slots: dict[int, DynamicSlot] = field(default_factory=dict)
    max_lifetime_s: float = 3600.0
    idle_timeout_s: float = 30.0
    poll_period_s: float = 2.0
    state: GlideinState = GlideinState.STARTING
    start_time: float = 0.0
    last_busy_time: float = 0.0
    last_poll: Optional[float] = None
    jobs_served: int = 0
    next_slot_id: int = 0
    registration_failures: int = 0
    registered_time: Optional[float] = None
    retire_reason: Optional[str] = None
    # (time, what, detail) entries: registration, each job, retirement
    history: list[tuple[float, str, dict]] = field(default_factory=list)
    audit: Optional[AuditLog] = field(default=None, repr=False)

    def _move(self, event: GlideinEvent, now: float, **detail) -> GlideinState:
        old = self.state
        self.state = transition(old, event)
        if self.audit is not None:
            verb = _VERBS.get((old, self.state)) or _VERBS[(None, self.state)]
            self.audit.record(now, self.glidein_id, verb, kind="glidein", state=self.state.value, **detail)
        return self.state

    def conserved(self) -> bool:
        if self.detected is None:
            return not self.dynamic_slots
        total = self.remaining
        for s in self.dynamic_slots.values():
            total = total + s.carved
        return total == self.detected

    def ad(self) -> dict:
        return {
            "glidein_id": self.glidein_id,
            "client_id": self.client_id,
            "detected": self.detected.to_dict() if self.detected else None,
            "remaining": self.remaining.to_dict() if self.remaining else None,
            "retiring": self.state is GlideinState.RETIRING,
        }


Register = Callable[[GlideinRuntime], None]


def _try_register(rt: GlideinRuntime, register: Optional[Register], now: float) -> bool:
    try:
        if register is not None:
            register(rt)
    except PoolUnavailable:
        rt.registration_failures += 1
        if rt.registration_failures >= MAX_REGISTRATION_FAILURES:
            rt._move(GlideinEvent.FAILED, now, reason="pool-unreachable")
            rt.history.append((now, "failed", {"reason": "pool-unreachable"}))
        return False
    rt._move(GlideinEvent.REGISTERED, now, detected=rt.detected.to_dict())
    rt.registration_failures = 0
    rt.registered_time = now
    rt.last_busy_time = now
    rt.history.append((now, "registered", {"detected": rt.detected.to_dict()}))
    return True


def startup(
    rt: GlideinRuntime, node_advertised: ResourceSpec, fail: bool, now: float, register: Optional[Register] = None
) -> GlideinRuntime:
    """Validate the node and join the pool with one partitionable slot.

    Detection copies the node's advertised spec. ``register`` publishes the
    ad and raises PoolUnavailable when the pool cannot be reached; the agent
    then stays Starting and retries on later polls.
    """
    if rt.state is not GlideinState.STARTING:
        raise ValueError(f"startup requires Starting, glidein is {rt.state.value}")
    rt.start_time = now
    rt.last_busy_time = now
    if fail:
        rt._move(GlideinEvent.FAILED, now, reason="validation")
        rt.history.append((now, "failed", {"reason": "validation"}))
        return rt
    if rt.audit is not None:
        rt.audit.record(now, rt.glidein_id, "validated", kind="glidein")
    rt.detected = node_advertised
    rt.remaining = node_advertised
    _try_register(rt, register, now)
    return rt


def claim(rt: GlideinRuntime, job_id: int, requirements: ResourceSpec, runtime_s: float, now: float, fail: bool = False) -> int:
    """Carve a dynamic slot for a job; returns the slot id."""
    if rt.state is GlideinState.RETIRING:
        raise ClaimRejected(RETIRING)
    if rt.state not in (GlideinState.REGISTERED, GlideinState.RUNNING):
        raise ClaimRejected(NOT_READY)
    if not fits(requirements, rt.remaining):
        raise ClaimRejected(INSUFFICIENT_RESOURCES)
    rt.remaining = carve(rt.remaining, requirements)
    slot_id = rt.next_slot_id
    rt.next_slot_id += 1
    rt.dynamic_slots[slot_id] = DynamicSlot(job_id, requirements, now, tadd(now, runtime_s), fail)
    if rt.state is GlideinState.REGISTERED:
        rt._move(GlideinEvent.RUNNING, now)
    rt.last_busy_time = now
    return slot_id


def complete(rt: GlideinRuntime, slot_id: int, now: float) -> SlotResult:
    """Finish a slot's job and return its resources to the partitionable slot."""
    slot = rt.dynamic_slots.pop(slot_id, None)
    if slot is None:
        raise UnknownSlot(slot_id)
    rt.remaining = release(rt.remaining, slot.carved)
    rt.jobs_served += 1
    rt.last_busy_time = now
    rec = ExecutionRecord(rt.glidein_id, slot_id, slot.start_time, now)
    rt.history.append((now, "job", {"job_id": slot.job_id, "start": slot.start_time, "end": now}))
    if not rt.dynamic_slots and rt.state is GlideinState.RUNNING:
        rt._move(GlideinEvent.JOBS_DRAINED, now, jobs_served=rt.jobs_served)
    return SlotResult(slot.job_id, rec, slot.fail)


def retire(rt: GlideinRuntime, now: float, reason: str) -> bool:
    """Stop accepting work; running slots are allowed to finish."""
    if rt.state not in (GlideinState.REGISTERED, GlideinState.RUNNING):
        return False
    rt._move(GlideinEvent.RETIRE, now, reason=reason)
    rt.retire_reason = reason
    rt.history.append((now, "retiring", {"reason": reason}))
    return True


def glidein_poll(rt: GlideinRuntime, now: float, register: Optional[Register] = None) -> list[str]:
    """Periodic housekeeping; returns the transitions taken, in order.

    Possible entries: "registered", "failed", "retiring", "done". A retiring
    glidein with no slots finishes in the same poll.
    """
    if rt.last_poll is not None and now < rt.last_poll + rt.poll_period_s - 1e-9:
        raise ValueError(f"poll at {now} too early; previous was {rt.last_poll}")
    rt.last_poll = now
    out: list[str] = []
    if rt.state is GlideinState.STARTING:
        if rt.detected is not None:
            if _try_register(rt, register, now):
                out.append("registered")
            elif rt.state is GlideinState.FAILED:
                out.append("failed")
        return out
    if rt.state in (GlideinState.REGISTERED, GlideinState.RUNNING):
        if not rt.dynamic_slots and now - rt.last_busy_time > rt.idle_timeout_s:
            retire(rt, now, "idle")
            out.append("retiring")
        elif now - rt.start_time > rt.max_lifetime_s:
            retire(rt, now, "lifetime")
            out.append("retiring")
    if rt.state is GlideinState.RETIRING and not rt.dynamic_slots:
        rt._move(GlideinEvent.RETIRED, now, reason=rt.retire_reason, jobs_served=rt.jobs_served)
        rt.history.append((now, "done", {"reason": rt.retire_reason}))
        out.append("done")
    return out
