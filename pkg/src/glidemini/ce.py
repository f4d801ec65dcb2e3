"""Token-authenticated Compute Entrypoint over a whole-node FIFO batch queue."""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .core import ResourceSpec
from .credentials import AuthorityState, Token, TokenRejected

DUPLICATE_GLIDEIN = "duplicate-glidein"


class SubmissionRejected(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


class UnknownGlidein(KeyError):
    pass


@dataclass
class NodeDescriptor:
    """A batch node. ``advertised`` may exceed ``actual`` (fake cores)."""

    node_id: str
    actual: ResourceSpec
    advertised: ResourceSpec
    occupant: Optional[str] = None

    @property
    def busy(self) -> bool:
        return self.occupant is not None


@dataclass(frozen=True)
class QueuedGlidein:
    glidein_id: str
    client_id: str
    enqueue_time: float


@dataclass
class CEState:
    audience: str
    nodes: list[NodeDescriptor]
    authority: AuthorityState
    queue: deque = field(default_factory=deque)
    cycle_period_s: float = 1.0
    startup_delay_s: float = 3.0
    validation_failure_prob: float = 0.0
    last_cycle: Optional[float] = None
    accepted: set[str] = field(default_factory=set)
    # nodes freed during a cycle become assignable from the next one
    _freed_at: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        if not 0.0 <= self.validation_failure_prob <= 1.0:
            raise ValueError("validation_failure_prob must be in [0, 1]")

    def node_of(self, glidein_id: str) -> Optional[NodeDescriptor]:
        for n in self.nodes:
            if n.occupant == glidein_id:
                return n
        return None

    def queued_ids(self) -> list[str]:
        return [q.glidein_id for q in self.queue]


def natural_key(node_id: str) -> tuple:
    """Sort key so that node-2 precedes node-10."""
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", node_id))


def submit_glidein(ce: CEState, glidein_id: str, client_id: str, token: Token, now: float) -> QueuedGlidein:
    """Authenticate and enqueue a glidein; raises SubmissionRejected."""
    try:
        ce.authority.verify(token, ce.audience, "compute.create", now)
    except TokenRejected as exc:
        raise SubmissionRejected(exc.reason) from None
    if glidein_id in ce.accepted:
        raise SubmissionRejected(DUPLICATE_GLIDEIN)
    ce.accepted.add(glidein_id)
    item = QueuedGlidein(glidein_id, client_id, now)
    ce.queue.append(item)
    return item


def ce_cycle(ce: CEState, now: float) -> list[tuple[str, str]]:
    """Assign queued glideins FIFO to free nodes, lowest node_id first."""
    if ce.last_cycle is not None and now < ce.last_cycle + ce.cycle_period_s - 1e-9:
        raise ValueError(f"cycle at {now} too early; previous was {ce.last_cycle}")
    ce.last_cycle = now
    free = sorted(
        (n for n in ce.nodes if not n.busy and ce._freed_at.get(n.node_id, float("-inf")) < now),
        key=lambda n: natural_key(n.node_id),
    )
    assignments = []
    for node in free:
        if not ce.queue:
            break
        item = ce.queue.popleft()
        node.occupant = item.glidein_id
        assignments.append((item.glidein_id, node.node_id))
    return assignments


def release_node(ce: CEState, glidein_id: str, now: float) -> str:
    node = ce.node_of(glidein_id)
    if node is None:
        raise UnknownGlidein(glidein_id)
    node.occupant = None
    ce._freed_at[node.node_id] = now
    return node.node_id


def remove_queued(ce: CEState, glidein_id: str) -> bool:
    """Drop a glidein that is still waiting in the queue."""
    for item in list(ce.queue):
        if item.glidein_id == glidein_id:
            ce.queue.remove(item)
            return True
    return False
