"""User pool: access point, collector of execution-point ads, and negotiator."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Mapping, Optional

from .audit import AuditLog
from .core import ExecutionRecord, Job, JobEvent, JobState, ResourceSpec, carve, fits
from .credentials import AuthorityState, Token, TokenRejected

_JOB_VERBS = {
    JobState.IDLE: "queued",
    JobState.MATCHED: "claimed",
    JobState.RUNNING: "started",
    JobState.COMPLETED: "completed",
    JobState.FAILED: "failed",
}


class JobRejected(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


@dataclass
class EPAd:
    """What the collector knows about one execution point (glidein)."""

    glidein_id: str
    client_id: str
    detected: ResourceSpec
    remaining: ResourceSpec
    last_heartbeat: float
    retiring: bool = False
    address: str = "ce"


@dataclass(frozen=True)
class JobSpec:
    requirements: ResourceSpec
    declared_runtime_s: float
    fail: bool = False

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> JobSpec:
        return cls(ResourceSpec.from_dict(d["requirements"]), d["declared_runtime_s"], bool(d.get("fail", False)))

    def to_dict(self) -> dict[str, Any]:
        return {"requirements": self.requirements.to_dict(), "declared_runtime_s": self.declared_runtime_s, "fail": self.fail}


@dataclass(frozen=True)
class PoolSnapshot:
    job_counts: Mapping[str, int]
    eps: Mapping[str, tuple[ResourceSpec, bool]]
    jobs: Mapping[int, str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_counts": dict(self.job_counts),
            "eps": {g: {"remaining": r.to_dict(), "retiring": ret} for g, (r, ret) in self.eps.items()},
            "jobs": {str(j): s for j, s in self.jobs.items()},
        }


@dataclass
class PoolState:
    authority: AuthorityState
    audience: str
    jobs: dict[int, Job] = field(default_factory=dict)
    ep_ads: dict[str, EPAd] = field(default_factory=dict)
    negotiation_period_s: float = 2.0
    ad_lifetime_s: float = 10.0
    next_job_id: int = 1
    last_negotiation: Optional[float] = None
    # job_id -> glidein_id for Matched jobs whose claim is unanswered
    pending: dict[int, str] = field(default_factory=dict)
    # job_id -> (glidein_id, slot_id, start_time) for Running jobs
    running_on: dict[int, tuple[str, int, float]] = field(default_factory=dict)
    audit: Optional[AuditLog] = field(default=None, repr=False)

    def _set(self, job_id: int, event: JobEvent, now: float, **detail: Any) -> Job:
        job = self.jobs[job_id].apply(event)
        if "execution_record" in detail:
            rec = detail["execution_record"]
            job = replace(job, execution_record=rec)
            detail["execution_record"] = rec.to_dict()
        self.jobs[job_id] = job
        if self.audit is not None:
            self.audit.record(now, str(job_id), _JOB_VERBS[job.state], kind="job", state=job.state.value, **detail)
        return job

    # -- access point -------------------------------------------------------

    def submit_job(self, spec: JobSpec, token: Token, now: float) -> int:
        try:
            owner = self.authority.verify(token, self.audience, "job.submit", now)
        except TokenRejected as exc:
            if self.audit is not None:
                self.audit.record(now, token.subject, "rejected_auth", kind="auth", reason=exc.reason, scope="job.submit")
            raise JobRejected(exc.reason) from None
        job_id = self.next_job_id
        self.next_job_id += 1
        job = Job(job_id, owner, now, spec.requirements, spec.declared_runtime_s, fail=spec.fail)
        self.jobs[job_id] = job
        if self.audit is not None:
            self.audit.record(
                now, str(job_id), "submitted", kind="job", state=JobState.IDLE.value,
                requirements=spec.requirements.to_dict(), declared_runtime_s=spec.declared_runtime_s,
            )
        return job_id

    # -- collector ------------------------------------------------------------

    def register(self, ad: EPAd) -> None:
        self.ep_ads[ad.glidein_id] = ad

    def heartbeat(self, glidein_id: str, remaining: ResourceSpec, retiring: bool, now: float) -> bool:
        ad = self.ep_ads.get(glidein_id)
        if ad is None:
            return False
        # claims still in flight are not yet reflected in the glidein's view
        for job_id, gid in self.pending.items():
            if gid == glidein_id and fits(self.jobs[job_id].requirements, remaining):
                remaining = carve(remaining, self.jobs[job_id].requirements)
        ad.remaining = remaining
        ad.retiring = ad.retiring or retiring
        ad.last_heartbeat = now
        return True

    def deregister(self, glidein_id: str, now: float) -> list[int]:
        if self.ep_ads.pop(glidein_id, None) is None:
            return []
        return self._requeue_pending(glidein_id, now)

    def _requeue_pending(self, glidein_id: str, now: float) -> list[int]:
        back = sorted(j for j, g in self.pending.items() if g == glidein_id)
        for job_id in back:
            del self.pending[job_id]
            self._set(job_id, JobEvent.UNMATCH, now, glidein_id=glidein_id, reason="ad-removed")
        return back

    def expire_ads(self, now: float) -> list[str]:
        removed = sorted(g for g, ad in self.ep_ads.items() if now - ad.last_heartbeat > self.ad_lifetime_s)
        for gid in removed:
            del self.ep_ads[gid]
            self._requeue_pending(gid, now)
        return removed

    # -- negotiator -------------------------------------------------------------

    def negotiate(self, now: float) -> list[tuple[int, str]]:
        """Match idle jobs FIFO onto the first ad with room, by glidein_id."""
        if self.last_negotiation is not None and now < self.last_negotiation + self.negotiation_period_s - 1e-9:
            raise ValueError(f"negotiation at {now} too early; previous was {self.last_negotiation}")
        self.last_negotiation = now
        ads = [self.ep_ads[g] for g in sorted(self.ep_ads) if not self.ep_ads[g].retiring]
        idle = sorted(
            (j for j in self.jobs.values() if j.state is JobState.IDLE),
            key=lambda j: (j.submit_time, j.job_id),
        )
        matches = []
        for job in idle:
            for ad in ads:
                if fits(job.requirements, ad.remaining):
                    ad.remaining = carve(ad.remaining, job.requirements)
                    self.pending[job.job_id] = ad.glidein_id
                    self._set(job.job_id, JobEvent.MATCH, now, glidein_id=ad.glidein_id)
                    matches.append((job.job_id, ad.glidein_id))
                    break
        return matches

    def claim_reply(
        self,
        job_id: int,
        glidein_id: str,
        accepted: bool,
        now: float,
        slot_id: Optional[int] = None,
        start_time: Optional[float] = None,
        reason: str = "",
    ) -> bool:
        """Apply the glidein's answer to a claim. Returns False for stale replies."""
        if self.pending.get(job_id) != glidein_id:
            return False
        del self.pending[job_id]
        if accepted:
            self.running_on[job_id] = (glidein_id, int(slot_id), start_time if start_time is not None else now)
            self._set(job_id, JobEvent.START, now, glidein_id=glidein_id, slot_id=slot_id)
        else:
            ad = self.ep_ads.get(glidein_id)
            if ad is not None and reason == "retiring":
                ad.retiring = True
            self._set(job_id, JobEvent.UNMATCH, now, glidein_id=glidein_id, reason=reason or "refused")
        return True

    def job_done(self, job_id: int, record: ExecutionRecord, failed: bool, now: float) -> bool:
        job = self.jobs.get(job_id)
        if job is None or job.state is not JobState.RUNNING or job.execution_record is not None:
            return False
        self.running_on.pop(job_id, None)
        self._set(job_id, JobEvent.FAIL if failed else JobEvent.COMPLETE, now, execution_record=record)
        return True

    def query(self) -> PoolSnapshot:
        counts = Counter({s.value: 0 for s in JobState})
        counts.update(j.state.value for j in self.jobs.values())
        eps = {g: (ad.remaining, ad.retiring) for g, ad in sorted(self.ep_ads.items())}
        jobs = {j: job.state.value for j, job in sorted(self.jobs.items())}
        return PoolSnapshot(MappingProxyType(dict(counts)), MappingProxyType(eps), MappingProxyType(jobs))


def submit_job(pool: PoolState, jobspec: JobSpec, token: Token, now: float) -> int:
    return pool.submit_job(jobspec, token, now)


def negotiate(pool: PoolState, now: float) -> list[tuple[int, str]]:
    return pool.negotiate(now)


def expire_ads(pool: PoolState, now: float) -> list[str]:
    return pool.expire_ads(now)


def query(pool: PoolState) -> PoolSnapshot:
    return pool.query()
