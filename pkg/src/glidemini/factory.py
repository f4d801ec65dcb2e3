"""Factory: keeps glidein pressure at each entry within limits."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

from .core import (
    PRESSURE_STATES,
    EntryDescriptor,
    GlideinEvent,
    GlideinRecord,
    GlideinState,
    ResourceSpec,
)
from .credentials import AuthorityState, Token, TokenRejected
from .mailbox import DEFAULT_REQUEST_TTL_S, FactoryStatusMessage, Mailbox

log = logging.getLogger(__name__)

UNTRUSTED_CLIENT = "untrusted-client"


def compute_submission(req_pressure: int, current_pressure: int, max_pressure: int, max_submit_per_cycle: int) -> int:
    """Number of new glideins to submit this cycle."""
    return max(0, min(req_pressure - current_pressure, max_submit_per_cycle, max_pressure - current_pressure))


def retirement_order(g: GlideinRecord) -> tuple:
    # least work first, then newest, then largest id
    return (g.jobs_served, -g.submit_time, _neg_str(g.glidein_id))


def _neg_str(s: str) -> tuple[int, ...]:
    return tuple(-ord(c) for c in s) + (1,)


def compute_retirements(req_max_run: int, running_glideins: Iterable[GlideinRecord]) -> set[str]:
    """Pick the glideins to retire when more are up than the client allows.

    ``running_glideins`` are the client's Registered or Running pilots at one
    entry; every one of them counts against ``req_max_run``.
    """
    candidates = list(running_glideins)
    excess = len(candidates) - req_max_run
    if excess <= 0:
        return set()
    return {g.glidein_id for g in sorted(candidates, key=retirement_order)[:excess]}


@dataclass(frozen=True)
class Submission:
    entry_id: str
    client_id: str
    credential: Token
    glidein_id: str


@dataclass(frozen=True)
class AuthFailure:
    entry_id: str
    client_id: str
    reason: str


@dataclass
class ActionSet:
    submissions: list[Submission] = field(default_factory=list)
    retirements: set[str] = field(default_factory=set)
    statuses: list[FactoryStatusMessage] = field(default_factory=list)
    auth_failures: list[AuthFailure] = field(default_factory=list)


@dataclass
class FactoryState:
    entries: dict[str, EntryDescriptor]
    mailbox: Mailbox
    authority: AuthorityState
    glideins: dict[str, GlideinRecord] = field(default_factory=dict)
    cycle_period_s: float = 2.0
    request_ttl_s: float = DEFAULT_REQUEST_TTL_S
    next_glidein_seq: int = 0
    auth_failures: int = 0
    last_cycle: Optional[float] = None
    status_seq: int = 0

    def __post_init__(self) -> None:
        if not self.cycle_period_s > 0:
            raise ValueError("cycle_period_s must be positive")

    def records(self, entry_id: str, client_id: Optional[str] = None, states=None) -> list[GlideinRecord]:
        return [
            g
            for g in self.glideins.values()
            if g.entry_id == entry_id
            and (client_id is None or g.client_id == client_id)
            and (states is None or g.state in states)
        ]

    def pressure(self, entry_id: str, client_id: Optional[str] = None) -> int:
        return len(self.records(entry_id, client_id, PRESSURE_STATES))

    def counts(self, entry_id: str) -> dict[str, dict[str, int]]:
        out: dict[str, Counter] = {}
        for g in self.records(entry_id):
            out.setdefault(g.client_id, Counter())[g.state.value] += 1
        return {c: dict(sorted(v.items())) for c, v in sorted(out.items())}

    def new_glidein_id(self) -> str:
        gid = f"g{self.next_glidein_seq:06d}"
        self.next_glidein_seq += 1
        return gid


def factory_cycle(state: FactoryState, now: float) -> ActionSet:
    """Run one Factory cycle over every entry in lexicographic order."""
    if state.last_cycle is not None and now < state.last_cycle + state.cycle_period_s - 1e-9:
        raise ValueError(f"cycle at {now} too early; previous was {state.last_cycle}")
    state.last_cycle = now
    actions = ActionSet()

    for entry_id in sorted(state.entries):
        entry = state.entries[entry_id]
        budget = entry.max_submit_per_cycle
        entry_pressure = state.pressure(entry_id)

        for req in state.mailbox.fetch_requests(entry_id, now, state.request_ttl_s):
            reason = None
            if not entry.trusts(req.client_id):
                reason = UNTRUSTED_CLIENT
            else:
                try:
                    state.authority.verify(req.credential, entry.audience, "compute.create", now)
                except TokenRejected as exc:
                    reason = exc.reason
            if reason is not None:
                state.auth_failures += 1
                actions.auth_failures.append(AuthFailure(entry_id, req.client_id, reason))
                log.warning("skipping request from %s for %s: %s", req.client_id, entry_id, reason)
                continue

            cur = state.pressure(entry_id, req.client_id)
            others = entry_pressure - cur
            n = compute_submission(req.req_pressure, cur, entry.max_pressure - others, budget)
            for _ in range(n):
                gid = state.new_glidein_id()
                state.glideins[gid] = GlideinRecord(gid, entry_id, req.client_id, GlideinState.SUBMITTED, now)
                actions.submissions.append(Submission(entry_id, req.client_id, req.credential, gid))
            budget -= n
            entry_pressure += n

            up = state.records(entry_id, req.client_id, (GlideinState.REGISTERED, GlideinState.RUNNING))
            for gid in sorted(compute_retirements(req.req_max_run, up)):
                state.glideins[gid] = state.glideins[gid].apply(GlideinEvent.RETIRE)
                actions.retirements.add(gid)

        status = FactoryStatusMessage(entry_id, state.status_seq, state.counts(entry_id), now)
        state.mailbox.publish_status(status)
        actions.statuses.append(status)
    state.status_seq += 1
    return actions


def handle_glidein_event(
    state: FactoryState,
    glidein_id: str,
    event: Union[str, GlideinEvent],
    now: float,
    detected: Optional[ResourceSpec] = None,
    jobs_served: Optional[int] = None,
) -> GlideinRecord:
    """Apply a CE or pool notification to the Factory's view of a glidein."""
    rec = state.glideins[glidein_id]
    rec = rec.apply(event, detected)
    if jobs_served is not None:
        rec = replace(rec, jobs_served=jobs_served)
    state.glideins[glidein_id] = rec
    return rec
