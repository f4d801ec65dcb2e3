"""Service actors shared by the simulator and the process runner.

Each actor owns its module state and reacts to timers and messages through a
small context object supplied by the transport. Nothing here knows whether
time is simulated or real.
"""

from __future__ import annotations

import logging
import random
from typing import Any, Callable, Mapping, Optional, Protocol

from ..audit import AuditLog
from ..ce import CEState, NodeDescriptor, SubmissionRejected, ce_cycle, release_node, submit_glidein
from ..core import (
    IllegalTransition,
    EntryDescriptor,
    ExecutionRecord,
    GlideinState,
    PRESSURE_STATES,
    ResourceSpec,
    parse_glidein_event,
    tadd,
)
from ..credentials import AuthorityState, Token
from ..factory import FactoryState, factory_cycle, handle_glidein_event
from ..frontend import FrontendConfig, FrontendState, KnownEntry, MailboxUnavailable, frontend_cycle
from ..glidein import ClaimRejected, GlideinRuntime, PoolUnavailable, claim, complete, glidein_poll, retire, startup
from ..mailbox import FactoryStatusMessage, Mailbox, MailboxRejected, RequestMessage
from ..pool import EPAd, JobRejected, JobSpec, PoolState
from .topology import TopologyConfig

log = logging.getLogger(__name__)

MESSAGE_TYPES = frozenset(
    {
        "PING",
        "PONG",
        "QUERY",
        "QUERY_REPLY",
        "REQUEST_PUT",
        "REQUEST_ACK",
        "STATUS_PUT",
        "STATUS_GET",
        "STATUS_REPLY",
        "GLIDEIN_SUBMIT",
        "GLIDEIN_RETIRE",
        "GLIDEIN_EVENT",
        "EP_REGISTER",
        "EP_HEARTBEAT",
        "EP_DEREGISTER",
        "CLAIM",
        "CLAIM_REPLY",
        "EP_CLAIM_REPLY",
        "JOB_DONE",
        "EP_JOB_DONE",
        "JOB_SUBMIT",
        "JOB_SUBMIT_ACK",
    }
)
ALIASES = {"EP_CLAIM_REPLY": "CLAIM_REPLY", "EP_JOB_DONE": "JOB_DONE"}

Reply = Optional[tuple[str, dict]]


class ServiceUnavailable(Exception):
    """The destination service cannot be reached right now."""


class Context(Protocol):
    service: str
    audit: AuditLog
    rng: random.Random

    @property
    def now(self) -> float: ...

    def send(self, dest: str, mtype: str, payload: dict) -> None: ...

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any) -> None: ...

    def event(self, kind: str, payload: Any) -> None: ...


class Service:
    name = ""

    def start(self, ctx: Context) -> None:
        pass

    def handle(self, ctx: Context, mtype: str, sender: str, payload: Mapping[str, Any]) -> Reply:
        mtype = ALIASES.get(mtype, mtype)
        if mtype == "PING":
            return "PONG", {"service": self.name}
        if mtype == "QUERY":
            return "QUERY_REPLY", {"service": self.name, "snapshot": self.snapshot()}
        fn = getattr(self, "on_" + mtype.lower(), None)
        if fn is None:
            log.warning("%s: unsupported message %s from %s", self.name, mtype, sender)
            return None
        return fn(ctx, sender, payload)

    def snapshot(self) -> dict:
        return {}

    def periodic(self, ctx: Context, period: float, fn: Callable[[Context], Any], first_delay: float = 0.0) -> None:
        """Run ``fn`` every ``period`` seconds until it returns False."""

        def tick() -> None:
            if fn(ctx) is not False:
                ctx.call_later(period, tick)

        ctx.call_later(first_delay, tick)


# -- factory -------------------------------------------------------------------


class FactoryService(Service):
    name = "factory"

    def __init__(self, topo: TopologyConfig, authority: AuthorityState) -> None:
        ce_ep = topo.endpoints["ce"]
        entries = {
            e.entry_id: EntryDescriptor(
                e.entry_id, ce_ep.address, ce_ep.hostname, e.max_pressure, e.max_submit_per_cycle, e.trusted_clients
            )
            for e in topo.factory.entries
        }
        self.state = FactoryState(
            entries=entries,
            mailbox=Mailbox(authority, topo.hostname("factory")),
            authority=authority,
            cycle_period_s=topo.factory.cycle_period_s,
            request_ttl_s=topo.factory.request_ttl_s,
        )
        self.topo = topo

    def start(self, ctx: Context) -> None:
        self.periodic(ctx, self.state.cycle_period_s, self.cycle)

    def cycle(self, ctx: Context) -> None:
        now = ctx.now
        actions = factory_cycle(self.state, now)
        for f in actions.auth_failures:
            ctx.audit.record(now, f.client_id, "rejected_auth", kind="auth", reason=f.reason, scope="compute.create", entry_id=f.entry_id)
        for sub in actions.submissions:
            ctx.audit.record(now, sub.glidein_id, "submitted", kind="glidein", state="Submitted", entry_id=sub.entry_id, client_id=sub.client_id)
        for sub in actions.submissions:
            entry = self.state.entries[sub.entry_id]
            payload = {"glidein_id": sub.glidein_id, "client_id": sub.client_id, "entry_id": sub.entry_id, "token": sub.credential.to_dict()}
            try:
                ctx.send(entry.ce_address, "GLIDEIN_SUBMIT", payload)
            except ServiceUnavailable:
                self._fail(ctx, sub.glidein_id, "ce-unreachable")
        for gid in sorted(actions.retirements):
            try:
                ctx.send(self.state.entries[self.state.glideins[gid].entry_id].ce_address, "GLIDEIN_RETIRE", {"glidein_id": gid})
            except ServiceUnavailable:
                log.warning("cannot deliver retirement of %s", gid)
        ctx.event(
            "cycle",
            {
                "service": self.name,
                "entries": {e: self.state.counts(e) for e in sorted(self.state.entries)},
                "pressure": {e: self.state.pressure(e) for e in sorted(self.state.entries)},
                "submissions": [s.glidein_id for s in actions.submissions],
                "retirements": sorted(actions.retirements),
                "auth_failures": self.state.auth_failures,
            },
        )
        for st in actions.statuses:
            ctx.event("status", st.to_dict())

    def _fail(self, ctx: Context, gid: str, reason: str) -> None:
        rec = self.state.glideins.get(gid)
        if rec is None or rec.state in (GlideinState.DONE, GlideinState.FAILED):
            return
        handle_glidein_event(self.state, gid, "failed", ctx.now)
        ctx.audit.record(ctx.now, gid, "failed", kind="glidein", state="Failed", reason=reason)

    def on_request_put(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        msg = RequestMessage.from_dict(payload["request"])
        token = Token.from_dict(payload["token"]) if payload.get("token") else None
        try:
            seq = self.state.mailbox.put_request(msg, ctx.now, token)
        except MailboxRejected as exc:
            if exc.reason != "stale-sequence":
                ctx.audit.record(ctx.now, msg.client_id, "rejected_auth", kind="auth", reason=exc.reason, scope="mailbox.write")
            return "REQUEST_ACK", {"ok": False, "reason": exc.reason, "entry_id": msg.entry_id, "seq": msg.seq}
        return "REQUEST_ACK", {"ok": True, "entry_id": msg.entry_id, "seq": seq}

    def on_status_get(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        statuses = self.state.mailbox.fetch_status(payload.get("client_id"))
        return "STATUS_REPLY", {"statuses": [s.to_dict() for s in statuses]}

    def on_status_put(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        self.state.mailbox.publish_status(FactoryStatusMessage.from_dict(payload["status"]))
        return None

    def on_glidein_event(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        gid = payload["glidein_id"]
        if gid not in self.state.glideins:
            log.warning("event for unknown glidein %s", gid)
            return None
        if payload.get("rejected"):
            self._fail(ctx, gid, payload["rejected"])
            return None
        event = parse_glidein_event(payload["event"])
        detected = ResourceSpec.from_dict(payload["detected"]) if payload.get("detected") else None
        try:
            handle_glidein_event(self.state, gid, event, ctx.now, detected, payload.get("jobs_served"))
        except IllegalTransition as exc:
            # the Factory's own retire decision can race with pilot-side reports
            log.debug("ignoring %s", exc)
        return None

    def snapshot(self) -> dict:
        return {
            "glideins": {g: r.state.value for g, r in sorted(self.state.glideins.items())},
            "pressure": {e: self.state.pressure(e) for e in sorted(self.state.entries)},
            "auth_failures": self.state.auth_failures,
        }


# -- compute entrypoint + glideins ------------------------------------------------


class CEService(Service):
    name = "ce"

    def __init__(self, topo: TopologyConfig, authority: AuthorityState) -> None:
        cfg = topo.ce
        self.state = CEState(
            audience=topo.hostname("ce"),
            nodes=[NodeDescriptor(n.node_id, n.actual, n.advertised) for n in cfg.nodes],
            authority=authority,
            cycle_period_s=cfg.cycle_period_s,
            startup_delay_s=cfg.startup_delay_s,
            validation_failure_prob=cfg.validation_failure_prob,
        )
        self.glidein_cfg = cfg.glidein
        self.glideins: dict[str, GlideinRuntime] = {}
        self.owner: dict[str, str] = {}  # glidein_id -> submitting service
        self.clients: dict[str, str] = {}  # glidein_id -> client_id
        self.pool = "frontend"

    def start(self, ctx: Context) -> None:
        self.periodic(ctx, self.state.cycle_period_s, self.cycle)

    def notify(self, ctx: Context, gid: str, event: str, **extra: Any) -> None:
        try:
            ctx.send(self.owner.get(gid, "factory"), "GLIDEIN_EVENT", {"glidein_id": gid, "event": event, **extra})
        except ServiceUnavailable:
            log.warning("factory unreachable; dropped %s for %s", event, gid)

    def on_glidein_submit(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        gid = payload["glidein_id"]
        token = Token.from_dict(payload["token"])
        self.owner.setdefault(gid, sender)
        self.clients.setdefault(gid, payload["client_id"])
        try:
            submit_glidein(self.state, gid, payload["client_id"], token, ctx.now)
        except SubmissionRejected as exc:
            ctx.audit.record(ctx.now, gid, "rejected_auth", kind="auth", reason=exc.reason, scope="compute.create")
            if exc.reason != "duplicate-glidein":
                self.notify(ctx, gid, "failed", rejected=exc.reason)
            return None
        ctx.audit.record(ctx.now, gid, "queued", kind="glidein", state="Queued", client_id=payload["client_id"])
        self.notify(ctx, gid, "queued")
        return None

    def cycle(self, ctx: Context) -> None:
        now = ctx.now
        for gid, node_id in ce_cycle(self.state, now):
            ctx.audit.record(now, gid, "assigned", kind="glidein", state="Starting", node_id=node_id)
            self.notify(ctx, gid, "node_assigned", node_id=node_id)
            ctx.call_later(self.state.startup_delay_s, self.glidein_start, ctx, gid, node_id)

    # glidein lifecycle, multiplexed on this service's loop

    def _register(self, ctx: Context) -> Callable[[GlideinRuntime], None]:
        def register(rt: GlideinRuntime) -> None:
            ad = rt.ad()
            try:
                ctx.send(self.pool, "EP_REGISTER", ad)
            except ServiceUnavailable as exc:
                raise PoolUnavailable(str(exc)) from None

        return register

    def glidein_start(self, ctx: Context, gid: str, node_id: str) -> None:
        now = ctx.now
        node = next(n for n in self.state.nodes if n.node_id == node_id)
        # one draw per start keeps the random stream independent of outcomes
        fail = ctx.rng.random() < self.state.validation_failure_prob
        g = self.glidein_cfg
        rt = GlideinRuntime(
            gid,
            client_id=self.clients.get(gid, ""),
            max_lifetime_s=g.max_lifetime_s,
            idle_timeout_s=g.idle_timeout_s,
            poll_period_s=g.poll_period_s,
            audit=ctx.audit,
        )
        self.glideins[gid] = rt
        startup(rt, node.advertised, fail, now, self._register(ctx))
        if rt.state is GlideinState.FAILED:
            self._finish(ctx, rt, "failed")
            return
        if rt.state is GlideinState.REGISTERED:
            self.notify(ctx, gid, "registered", detected=rt.detected.to_dict())
        self.periodic(ctx, rt.poll_period_s, lambda c, gid=gid: self.glidein_tick(c, gid), first_delay=rt.poll_period_s)

    def glidein_tick(self, ctx: Context, gid: str) -> bool:
        rt = self.glideins[gid]
        if rt.state in (GlideinState.DONE, GlideinState.FAILED):
            return False
        steps = glidein_poll(rt, ctx.now, self._register(ctx))
        for step in steps:
            if step == "registered":
                self.notify(ctx, gid, "registered", detected=rt.detected.to_dict())
            elif step == "retiring":
                self.notify(ctx, gid, "retire", reason=rt.retire_reason)
        if rt.state is GlideinState.DONE:
            self._finish(ctx, rt, "done")
            return False
        if rt.state is GlideinState.FAILED:
            self._finish(ctx, rt, "failed")
            return False
        if rt.state is not GlideinState.STARTING:
            hb = {"glidein_id": gid, "remaining": rt.remaining.to_dict(), "retiring": rt.state is GlideinState.RETIRING}
            try:
                ctx.send(self.pool, "EP_HEARTBEAT", hb)
            except ServiceUnavailable:
                pass
        return True

    def _finish(self, ctx: Context, rt: GlideinRuntime, how: str) -> None:
        release_node(self.state, rt.glidein_id, ctx.now)
        if how == "done":
            try:
                ctx.send(self.pool, "EP_DEREGISTER", {"glidein_id": rt.glidein_id})
            except ServiceUnavailable:
                pass
            self.notify(ctx, rt.glidein_id, "retired", jobs_served=rt.jobs_served)
        else:
            self.notify(ctx, rt.glidein_id, "failed")

    def on_claim(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        gid = payload["glidein_id"]
        job_id = int(payload["job_id"])
        rt = self.glideins.get(gid)
        reply = {"job_id": job_id, "glidein_id": gid}
        if rt is None:
            ctx.send(sender, "CLAIM_REPLY", {**reply, "accepted": False, "reason": "unknown-glidein"})
            return None
        was = rt.state
        try:
            slot_id = claim(
                rt, job_id, ResourceSpec.from_dict(payload["requirements"]), payload["declared_runtime_s"], ctx.now, bool(payload.get("fail", False))
            )
        except ClaimRejected as exc:
            ctx.send(sender, "CLAIM_REPLY", {**reply, "accepted": False, "reason": exc.reason, "remaining": rt.remaining.to_dict() if rt.remaining else None})
            return None
        slot = rt.dynamic_slots[slot_id]
        ctx.send(sender, "CLAIM_REPLY", {**reply, "accepted": True, "slot_id": slot_id, "start_time": slot.start_time, "remaining": rt.remaining.to_dict()})
        if was is GlideinState.REGISTERED:
            self.notify(ctx, gid, "running", jobs_served=rt.jobs_served)
        ctx.call_later(round(slot.end_time - ctx.now, 6), self.slot_done, ctx, gid, slot_id, sender)
        return None

    def slot_done(self, ctx: Context, gid: str, slot_id: int, pool: str) -> None:
        rt = self.glideins[gid]
        was = rt.state
        res = complete(rt, slot_id, ctx.now)
        try:
            ctx.send(pool, "JOB_DONE", {"job_id": res.job_id, "execution_record": res.execution_record.to_dict(), "failed": res.failed})
        except ServiceUnavailable:
            log.warning("pool unreachable; completion of job %s not reported", res.job_id)
        if was is GlideinState.RUNNING and rt.state is GlideinState.REGISTERED:
            self.notify(ctx, gid, "idle", jobs_served=rt.jobs_served)

    def on_glidein_retire(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        rt = self.glideins.get(payload["glidein_id"])
        if rt is not None and retire(rt, ctx.now, "factory"):
            self.notify(ctx, rt.glidein_id, "retire", reason="factory")
        return None

    def snapshot(self) -> dict:
        return {
            "nodes": {n.node_id: n.occupant for n in self.state.nodes},
            "queue": self.state.queued_ids(),
            "glideins": {g: rt.state.value for g, rt in sorted(self.glideins.items())},
        }


# -- frontend + user pool ------------------------------------------------------------


class FrontendService(Service):
    """Frontend daemon plus the user pool (access point and central manager)."""

    name = "frontend"

    def __init__(
        self,
        topo: TopologyConfig,
        authority: AuthorityState,
        credentials: Mapping[str, Token],
        mailbox_token: Token,
        enabled: bool = True,
    ) -> None:
        fe = topo.frontend
        ce_nodes = topo.ce.nodes
        default_adv = ce_nodes[0].advertised if ce_nodes else ResourceSpec()
        factory_addr = topo.endpoints["factory"].address
        cfg = FrontendConfig(
            client_id=fe.client_id,
            entries_known=[KnownEntry(e.entry_id, e.node_advertised or default_adv, factory_addr) for e in fe.entries],
            max_pressure_per_entry=fe.max_pressure_per_entry,
            total_max_glideins=fe.total_max_glideins,
            total_curb_glideins=fe.total_curb_glideins,
            expansion_factor=fe.expansion_factor,
            cycle_period_s=fe.cycle_period_s,
        )
        self.frontend = FrontendState(
            config=cfg,
            authority=authority,
            credentials=dict(credentials),
            mailbox_tokens={factory_addr: mailbox_token},
            token_ttl_s=fe.token_ttl_s,
            refresh_margin_s=min(600.0, fe.token_ttl_s / 4),
        )
        self.pool = PoolState(
            authority=authority,
            audience=topo.hostname("frontend"),
            negotiation_period_s=fe.negotiation_period_s,
            ad_lifetime_s=fe.ad_lifetime_s,
        )
        self.enabled = enabled
        self.acks: dict[str, int] = {}

    def start(self, ctx: Context) -> None:
        self.pool.audit = ctx.audit
        if self.enabled:
            self.periodic(ctx, self.frontend.config.cycle_period_s, self.cycle)
        self.periodic(ctx, self.pool.negotiation_period_s, self.negotiation)

    def cycle(self, ctx: Context) -> None:
        def put(addr: str, msg: RequestMessage, token: Token) -> None:
            try:
                ctx.send(addr, "REQUEST_PUT", {"request": msg.to_dict(), "token": token.to_dict()})
            except ServiceUnavailable as exc:
                raise MailboxUnavailable(str(exc)) from None

        report = frontend_cycle(self.frontend, ctx.now, self.pool.jobs.values(), put)
        for addr in sorted({e.mailbox for e in self.frontend.config.entries_known}):
            try:
                ctx.send(addr, "STATUS_GET", {"client_id": self.frontend.config.client_id})
            except ServiceUnavailable:
                pass
        ctx.event(
            "request",
            {
                "service": self.name,
                "entries": {
                    m.entry_id: {"matching_idle": report.matching_idle[m.entry_id], "req_pressure": m.req_pressure, "seq": m.seq}
                    for m in report.requests
                },
                "failed": report.failed,
            },
        )

    def negotiation(self, ctx: Context) -> None:
        now = ctx.now
        self.pool.expire_ads(now)
        for job_id, gid in self.pool.negotiate(now):
            job = self.pool.jobs[job_id]
            payload = {
                "job_id": job_id,
                "glidein_id": gid,
                "requirements": job.requirements.to_dict(),
                "declared_runtime_s": job.declared_runtime_s,
                "fail": job.fail,
            }
            try:
                ctx.send(self.pool.ep_ads[gid].address, "CLAIM", payload)
            except ServiceUnavailable:
                self.pool.claim_reply(job_id, gid, False, now, reason="unreachable")

    def on_job_submit(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        try:
            job_id = self.pool.submit_job(JobSpec.from_dict(payload["job"]), Token.from_dict(payload["token"]), ctx.now)
        except JobRejected as exc:
            return "JOB_SUBMIT_ACK", {"ok": False, "reason": exc.reason}
        return "JOB_SUBMIT_ACK", {"ok": True, "job_id": job_id}

    def on_ep_register(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        det = ResourceSpec.from_dict(payload["detected"])
        rem = ResourceSpec.from_dict(payload["remaining"])
        self.pool.register(EPAd(payload["glidein_id"], payload.get("client_id", ""), det, rem, ctx.now, bool(payload.get("retiring")), sender))
        return None

    def on_ep_heartbeat(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        self.pool.heartbeat(payload["glidein_id"], ResourceSpec.from_dict(payload["remaining"]), bool(payload.get("retiring")), ctx.now)
        return None

    def on_ep_deregister(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        self.pool.deregister(payload["glidein_id"], ctx.now)
        return None

    def on_claim_reply(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        self.pool.claim_reply(
            int(payload["job_id"]),
            payload["glidein_id"],
            bool(payload["accepted"]),
            ctx.now,
            slot_id=payload.get("slot_id"),
            start_time=payload.get("start_time"),
            reason=payload.get("reason", ""),
        )
        ad = self.pool.ep_ads.get(payload["glidein_id"])
        if ad is not None and not payload["accepted"] and payload.get("remaining"):
            ad.remaining = ResourceSpec.from_dict(payload["remaining"])
        return None

    def on_job_done(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        rec = ExecutionRecord.from_dict(payload["execution_record"])
        self.pool.job_done(int(payload["job_id"]), rec, bool(payload.get("failed")), ctx.now)
        return None

    def on_status_reply(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        self.frontend.update_status(FactoryStatusMessage.from_dict(s) for s in payload["statuses"])
        return None

    def on_request_ack(self, ctx: Context, sender: str, payload: Mapping) -> Reply:
        if payload.get("ok"):
            self.acks[payload["entry_id"]] = payload["seq"]
        else:
            log.warning("request %s/%s rejected: %s", payload.get("entry_id"), payload.get("seq"), payload.get("reason"))
        return None

    def snapshot(self) -> dict:
        snap = self.pool.query().to_dict()
        snap["seq"] = dict(self.frontend.seq)
        return snap


def pressure_by_entry(factory: FactoryService) -> dict[str, int]:
    return {e: factory.state.pressure(e) for e in factory.state.entries}


def max_pressure_by_entry(factory: FactoryService) -> dict[str, int]:
    return {e: d.max_pressure for e, d in factory.state.entries.items()}


__all__ = [
    "CEService",
    "Context",
    "FactoryService",
    "FrontendService",
    "MESSAGE_TYPES",
    "PRESSURE_STATES",
    "Service",
    "ServiceUnavailable",
    "tadd",
]
