"""Frontend: turns idle jobs and glidein supply into provisioning requests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Union

from .core import PRESSURE_STATES, GlideinState, Job, JobState, ResourceSpec, fits
from .credentials import AuthorityState, Token, refresh_token
from .mailbox import FactoryStatusMessage, MailboxRejected, RequestMessage

log = logging.getLogger(__name__)


class MailboxUnavailable(Exception):
    """The mailbox could not be reached; the request is retried next cycle."""


@dataclass(frozen=True)
class KnownEntry:
    entry_id: str
    node_advertised: ResourceSpec
    mailbox: str  # address (service name or host:port) of the Factory hosting the entry


@dataclass
class FrontendConfig:
    client_id: str
    entries_known: list[KnownEntry]
    max_pressure_per_entry: int = 8
    total_max_glideins: int = 100
    total_curb_glideins: int = 50
    expansion_factor: Union[Fraction, float, int, str] = 1
    cycle_period_s: float = 2.0
    credential: Optional[Token] = None

    def __post_init__(self) -> None:
        self.expansion_factor = Fraction(str(self.expansion_factor))
        if self.expansion_factor <= 0:
            raise ValueError("expansion_factor must be positive")
        if self.total_curb_glideins > self.total_max_glideins:
            raise ValueError("total_curb_glideins must be <= total_max_glideins")


def count_matching(jobs: Iterable[Job], node_advertised: ResourceSpec) -> tuple[int, int]:
    idle = running = 0
    for j in jobs:
        if not fits(j.requirements, node_advertised):
            continue
        if j.state is JobState.IDLE:
            idle += 1
        elif j.state is JobState.RUNNING:
            running += 1
    return idle, running


def compute_request(matching_idle: int, busy_glideins: int, total_glideins: int, config: FrontendConfig) -> tuple[int, int]:
    """Return ``(req_pressure, req_max_run)`` for one entry.

    Ask for enough pilots to cover idle work plus the ones already busy, cap
    at the per-entry limit, stop at the global maximum and hold steady above
    the curb.
    """
    base = math.ceil(Fraction(matching_idle) * Fraction(config.expansion_factor)) + busy_glideins
    req_pressure = min(base, config.max_pressure_per_entry)
    if total_glideins >= config.total_max_glideins:
        req_pressure = 0
    elif total_glideins >= config.total_curb_glideins:
        req_pressure = min(req_pressure, busy_glideins)
    return req_pressure, req_pressure


@dataclass
class FrontendState:
    config: FrontendConfig
    authority: AuthorityState
    credentials: dict[str, Token]  # entry_id -> compute.create token for the entry's CE
    mailbox_tokens: dict[str, Token] = field(default_factory=dict)  # mailbox address -> mailbox.write token
    seq: dict[str, int] = field(default_factory=dict)
    statuses: dict[str, FactoryStatusMessage] = field(default_factory=dict)
    last_cycle: Optional[float] = None
    token_ttl_s: float = 3600.0
    refresh_margin_s: float = 600.0

    def update_status(self, statuses: Iterable[FactoryStatusMessage]) -> None:
        for st in statuses:
            cur = self.statuses.get(st.entry_id)
            if cur is None or st.seq >= cur.seq:
                self.statuses[st.entry_id] = st

    def glidein_counts(self, entry_id: str) -> tuple[int, int]:
        """(busy, total) for this client: Running at the entry, Submitted..Running everywhere."""
        client = self.config.client_id
        st = self.statuses.get(entry_id)
        busy = st.count(client, (GlideinState.RUNNING,)) if st else 0
        total = sum(s.count(client, PRESSURE_STATES) for s in self.statuses.values())
        return busy, total

    def refresh_credentials(self, now: float) -> list[str]:
        """Renew tokens that are close to expiry; returns what was refreshed."""
        renewed = []
        for table in (self.credentials, self.mailbox_tokens):
            for key, tok in sorted(table.items()):
                if tok.expires_at - now <= self.refresh_margin_s:
                    table[key] = refresh_token(self.authority, tok, self.token_ttl_s, now)
                    renewed.append(f"{tok.scope}:{key}")
        return renewed


Putter = Callable[[str, RequestMessage, Token], None]


@dataclass
class CycleReport:
    requests: list[RequestMessage] = field(default_factory=list)
    matching_idle: dict[str, int] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)


def frontend_cycle(state: FrontendState, now: float, jobs: Iterable[Job], put: Putter) -> CycleReport:
    """Compute and publish one request per known entry.

    ``put(mailbox_address, msg, write_token)`` delivers a request and raises
    MailboxUnavailable or MailboxRejected on failure; the per-entry seq only
    advances when the put succeeds.
    """
    if state.last_cycle is not None and now < state.last_cycle + state.config.cycle_period_s - 1e-9:
        raise ValueError(f"cycle at {now} too early; previous was {state.last_cycle}")
    state.last_cycle = now
    state.refresh_credentials(now)
    jobs = list(jobs)
    report = CycleReport()
    cfg = state.config
    for entry in sorted(cfg.entries_known, key=lambda e: e.entry_id):
        idle, _running = count_matching(jobs, entry.node_advertised)
        busy, total = state.glidein_counts(entry.entry_id)
        req_pressure, req_max_run = compute_request(idle, busy, total, cfg)
        report.matching_idle[entry.entry_id] = idle
        seq = state.seq.get(entry.entry_id, -1) + 1
        msg = RequestMessage(
            client_id=cfg.client_id,
            entry_id=entry.entry_id,
            seq=seq,
            req_pressure=req_pressure,
            req_max_run=req_max_run,
            credential=state.credentials[entry.entry_id],
            sent_at=now,
        ).signed(state.authority)
        try:
            put(entry.mailbox, msg, state.mailbox_tokens[entry.mailbox])
        except (MailboxUnavailable, MailboxRejected) as exc:
            report.failed[entry.entry_id] = getattr(exc, "reason", None) or str(exc) or type(exc).__name__
            log.warning("request for %s not delivered: %s", entry.entry_id, report.failed[entry.entry_id])
            continue
        state.seq[entry.entry_id] = seq
        report.requests.append(msg)
    return report
