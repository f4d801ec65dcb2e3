"""Single-threaded discrete-event simulation of a whole topology."""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from typing import Any, Callable, Iterable, Optional

from ..audit import AuditLog, replay_states
from ..core import GLIDEIN_TERMINAL, JOB_TERMINAL, canonical, tadd
from ..credentials import AuthorityState, init_authority
from ..pool import JobSpec
from .events import EventLog
from .metrics import MetricsReport, metrics_report
from .services import CEService, FactoryService, FrontendService, Service, ServiceUnavailable
from .topology import TopologyConfig, WorkloadSpec

log = logging.getLogger(__name__)

LATENCY_S = 0.01
USER = "user"

Observer = Callable[["Simulation"], None]


class _SimContext:
    def __init__(self, sim: Simulation, service: str) -> None:
        self.sim = sim
        self.service = service
        self.rng = sim.rng
        self.audit = AuditLog(service, listeners=[sim.log.append_audit])

    @property
    def now(self) -> float:
        return self.sim.now

    def send(self, dest: str, mtype: str, payload: dict) -> None:
        self.sim.send(self.service, dest, mtype, payload)

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any) -> None:
        self.sim.schedule(tadd(self.sim.now, delay), fn, *args)

    def event(self, kind: str, payload: Any) -> None:
        self.sim.log.append(self.sim.now, self.service, kind, payload)


class Simulation:
    """Every service in one event queue ordered by (time, insertion order).

    Messages cost a fixed latency; all randomness comes from one generator
    seeded once, so (topology, workload, seed) fix the event log.
    """

    def __init__(
        self,
        topology: TopologyConfig,
        workload: WorkloadSpec,
        seed: int,
        disable: Iterable[str] = (),
        authority: Optional[AuthorityState] = None,
    ) -> None:
        self.topology = topology
        self.workload = workload
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0.0
        self.log = EventLog()
        self._queue: list[tuple[float, int, Callable[..., Any], tuple]] = []
        self._counter = itertools.count()
        self.disabled = frozenset(disable)
        self.authority = authority or init_authority(None, seed)

        fe = topology.frontend
        ce_host = topology.hostname("ce")
        creds = {e.entry_id: self.authority.issue(fe.client_id, ce_host, "compute.create", fe.token_ttl_s, 0.0) for e in fe.entries}
        mb_token = self.authority.issue(fe.client_id, topology.hostname("factory"), "mailbox.write", fe.token_ttl_s, 0.0)
        self.ce = CEService(topology, self.authority)
        self.factory = FactoryService(topology, self.authority)
        self.frontend = FrontendService(topology, self.authority, creds, mb_token, enabled="frontend" not in self.disabled)
        self.services: dict[str, Service] = {"ce": self.ce, "factory": self.factory, "frontend": self.frontend}
        self.contexts = {name: _SimContext(self, name) for name in self.services}
        self.job_ids: list[int] = []
        self.rejected_jobs: list[str] = []
        self.events_processed = 0
        self._started = False

    # -- queue ------------------------------------------------------------------

    def schedule(self, at: float, fn: Callable[..., Any], *args: Any) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._queue, (at, next(self._counter), fn, args))

    def send(self, sender: str, dest: str, mtype: str, payload: dict) -> None:
        try:
            target = self.topology.service_for(dest)
        except KeyError:
            raise ServiceUnavailable(dest) from None
        if target not in self.services:
            raise ServiceUnavailable(dest)
        # serialize on send so no object is shared between services
        wire = json.loads(canonical(payload))
        self.schedule(tadd(self.now, LATENCY_S), self._deliver, sender, target, mtype, wire)

    def _deliver(self, sender: str, target: str, mtype: str, payload: dict) -> None:
        ctx = self.contexts[target]
        reply = self.services[target].handle(ctx, mtype, sender, payload)
        if reply is not None:
            rtype, rpayload = reply
            try:
                self.send(target, sender, rtype, rpayload)
            except ServiceUnavailable:
                pass

    def _submit_job(self, item: Any) -> None:
        fe = self.frontend
        token = self.authority.issue(USER, self.topology.hostname("frontend"), "job.submit", 3600.0, self.now)
        ack = fe.handle(self.contexts["frontend"], "JOB_SUBMIT", USER, {"job": JobSpec(item.requirements, item.declared_runtime_s, item.fail).to_dict(), "token": token.to_dict()})
        _, body = ack
        if body["ok"]:
            self.job_ids.append(body["job_id"])
        else:
            self.rejected_jobs.append(body["reason"])

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for item in self.workload.expand():
            self.schedule(item.submit_time, self._submit_job, item)
        for name in ("ce", "factory", "frontend"):
            self.services[name].start(self.contexts[name])

    def run(self, until_s: float, stop_when: Optional[Callable[[Simulation], bool]] = None, observers: Iterable[Observer] = ()) -> EventLog:
        self.start()
        observers = list(observers)
        while self._queue and self._queue[0][0] <= until_s:
            at, _, fn, args = heapq.heappop(self._queue)
            self.now = at
            fn(*args)
            self.events_processed += 1
            for obs in observers:
                obs(self)
            if stop_when is not None and stop_when(self):
                break
        return self.log

    # -- inspection ---------------------------------------------------------------

    def jobs_terminal(self) -> bool:
        jobs = self.frontend.pool.jobs
        return len(jobs) == self.workload.total_jobs and all(j.state in JOB_TERMINAL for j in jobs.values())

    def glideins_terminal(self) -> bool:
        return all(g.state in GLIDEIN_TERMINAL for g in self.factory.state.glideins.values())

    def drained(self) -> bool:
        return self.jobs_terminal() and self.glideins_terminal()

    def audit_mismatches(self) -> list[str]:
        """Entities whose final state differs from what the audit trail says."""
        replay = replay_states(self.log.audit_records())
        out = []
        for job_id, job in self.frontend.pool.jobs.items():
            got = replay.get(("job", str(job_id)))
            if got != job.state.value:
                out.append(f"job {job_id}: state {job.state.value}, audit {got}")
        for gid, rec in self.factory.state.glideins.items():
            rt = self.ce.glideins.get(gid)
            truth = rt.state.value if rt is not None else rec.state.value
            got = replay.get(("glidein", gid))
            if got != truth:
                out.append(f"glidein {gid}: state {truth}, audit {got}")
        return out


def run_simulation(
    topology: TopologyConfig,
    workload: WorkloadSpec,
    seed: int,
    until_s: float,
    stop_when: Optional[Callable[[Simulation], bool]] = None,
    disable: Iterable[str] = (),
    observers: Iterable[Observer] = (),
) -> tuple[EventLog, MetricsReport]:
    """Run ``workload`` on ``topology`` until the queue empties or ``until_s``."""
    sim = Simulation(topology, workload, seed, disable=disable)
    sim.run(until_s, stop_when=stop_when, observers=observers)
    return sim.log, metrics_report(sim.log)
