"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

from __future__ import annotations

import functools
import itertools
import math
import random
import time

import pytest

from glidemini.ce import CEState, NodeDescriptor, SubmissionRejected, submit_glidein
from glidemini.core import ResourceSpec
from glidemini.credentials import Token, init_authority
from glidemini.harness.events import EventLog
from glidemini.harness.metrics import metrics_report
from glidemini.harness.sim import Simulation
from glidemini.harness.smoke import smoke_procs
from glidemini.harness.topology import WorkloadItem, WorkloadSpec, load_minimal, smoke_workload
from glidemini.mailbox import Mailbox, MailboxRejected, RequestMessage
from glidemini.pool import EPAd, JobRejected, JobSpec, PoolState

R = ResourceSpec
RUNS: dict[str, EventLog] = {}


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


def drain(sim: Simulation, until_s: float = 600.0) -> Simulation:
    sim.run(until_s, stop_when=lambda s: s.drained() and bool(s.factory.state.glideins))
    return sim


def max_overlap(intervals) -> int:
    """Largest number of half-open intervals covering one instant."""
    points = sorted([(s, 1) for s, _ in intervals] + [(e, -1) for _, e in intervals], key=lambda p: (p[0], p[1]))
    cur = best = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


def records(log: EventLog) -> list[dict]:
    return [dict(r.detail["execution_record"], job=r.subject) for r in log.audit_records() if r.action == "completed" and r.detail.get("kind") == "job"]


# -- run producers, cached so criterion 10 reuses them --------------------------------


@functools.lru_cache(maxsize=None)
def smoke_run(seed: int = 42, prob: float = 0.0):
    topo = load_minimal() if prob == 0 else load_minimal().with_changes(**{"ce.validation_failure_prob": prob})
    t0 = time.perf_counter()
    sim = drain(Simulation(topo, smoke_workload(), seed))
    wall = time.perf_counter() - t0
    RUNS[f"smoke-{seed}-{prob}"] = sim.log
    return sim, wall


@functools.lru_cache(maxsize=None)
def pressure_run():
    topo = load_minimal().with_changes(**{"frontend.max_pressure_per_entry": 5})
    sim = Simulation(topo, WorkloadSpec((WorkloadItem(0, 100, R(1, 1024, 0, 0), 1000),)), 1)
    entry = topo.factory.entries[0].entry_id
    trace: list[tuple[float, int, int]] = []

    def watch(s: Simulation) -> None:
        remaining = sum(1 for j in s.frontend.pool.jobs.values() if j.state.value not in ("Completed", "Failed", "Removed"))
        trace.append((s.now, s.factory.state.pressure(entry), remaining))

    sim.run(300.0, observers=[watch])
    RUNS["pressure"] = sim.log
    return sim, trace


def fake_cores_topology(advertised_cores: int):
    topo = load_minimal()
    nodes = [{"count": 1, "actual": {"cores": 4, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0},
              "advertised": {"cores": advertised_cores, "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}}]
    return topo.with_changes(**{"ce.nodes": nodes})


@functools.lru_cache(maxsize=None)
def fake_cores_run(advertised_cores: int):
    # 512 MB so 16 jobs fit the node's 8192 MB
    w = WorkloadSpec((WorkloadItem(0, 16, R(1, 512, 0, 0), 100),))
    sim = drain(Simulation(fake_cores_topology(advertised_cores), w, 5), 2000)
    RUNS[f"fake-{advertised_cores}"] = sim.log
    return sim


@functools.lru_cache(maxsize=None)
def procs_run(base: str):
    r = smoke_procs(load_minimal(), base, timeout_s=120)
    RUNS["procs"] = r.log
    return r


# -- criteria -------------------------------------------------------------------------


def test_criterion_1_smoke(verdict):
    sim, wall = smoke_run()
    rep = metrics_report(sim.log)
    ok = (
        rep.jobs_completed == 10
        and rep.jobs_submitted == 10
        and rep.peak_active_glideins == 2
        and rep.peak_running_jobs <= 16
        and rep.makespan_s <= 40
        and wall < 5
        and rep.glideins_unfinished == 0
        and sim.audit_mismatches() == []
    )
    verdict(1, ok, f"{rep.jobs_completed}/10 completed, makespan {rep.makespan_s:g} s (<= 40), "
                   f"peak glideins {rep.peak_active_glideins} (== 2), peak jobs {rep.peak_running_jobs} (<= 16), wall {wall:.2f} s (< 5)")
    assert ok


def test_criterion_2_pressure_convergence(verdict):
    sim, trace = pressure_run()
    topo = sim.topology
    per_cycle = topo.factory.entries[0].max_submit_per_cycle
    cycles = math.ceil(5 / per_cycle) + 1
    # factory cycles run at 0, P, 2P...; the k-th cycle is at (k-1)P
    settle_at = (cycles - 1) * topo.factory.cycle_period_s
    window = [(t, p) for t, p, remaining in trace if t >= settle_at and remaining > 0]
    bad = [(t, p) for t, p in window if p != 5]
    ok = bool(window) and not bad and window[-1][0] >= 250
    verdict(2, ok, f"pressure == 5 from t={settle_at:g} ({cycles} cycles) over {len(window)} events to t={window[-1][0]:g}; {len(bad)} deviations")
    assert ok


def _random_scenario(rng: random.Random):
    topo = load_minimal()
    maxp = rng.randint(1, 10)
    total = rng.randint(1, 30)
    changes = {
        "ce.nodes": [{"count": rng.randint(1, 4), "actual": {"cores": rng.choice([1, 2, 4, 8]), "memory_mb": 8192, "disk_mb": 1000, "gpus": 0}}],
        "ce.validation_failure_prob": rng.choice([0, 0, 0.1, 0.3, 0.7, 1]),
        "ce.startup_delay_s": rng.choice([1, 3, 7]),
        "ce.glidein": {"max_lifetime_s": rng.choice([40, 200, 3600]), "idle_timeout_s": rng.choice([4, 10, 30]), "poll_period_s": 2},
        "factory.entries": [dict(topo.raw["services"]["factory"]["entries"][0], max_pressure=maxp, max_submit_per_cycle=rng.randint(1, 6))],
        "frontend.max_pressure_per_entry": rng.randint(1, 15),
        "frontend.total_max_glideins": total,
        "frontend.total_curb_glideins": rng.randint(1, total),
    }
    topo = topo.with_changes(**changes)
    items = tuple(
        WorkloadItem(rng.uniform(0, 60), rng.randint(1, 8), R(rng.randint(1, 2), rng.choice([256, 1024]), 0, 0), rng.choice([3, 10, 40]), rng.random() < 0.1)
        for _ in range(rng.randint(0, 4))
    )
    return topo, WorkloadSpec(items), maxp


def test_criterion_3_throttle_fuzz(verdict):
    rng = random.Random(2024)
    violations = 0
    events = 0
    for _ in range(200):
        topo, workload, maxp = _random_scenario(rng)
        entry = topo.factory.entries[0].entry_id
        sim = Simulation(topo, workload, rng.randrange(2**31))
        hits = []

        def check(s: Simulation) -> None:
            if s.factory.state.pressure(entry) > maxp:
                hits.append(s.now)

        sim.run(200.0, observers=[check])
        violations += len(hits)
        events += sim.events_processed
    ok = violations == 0
    verdict(3, ok, f"200 scenarios, {events} events checked, {violations} pressure > max_pressure violations")
    assert ok


def test_criterion_4_determinism(verdict):
    hashes = []
    for _ in range(3):
        sim = drain(Simulation(load_minimal(), smoke_workload(), 42))
        hashes.append(sim.log.hash())
    a, _ = smoke_run(42, 0.2)
    b, _ = smoke_run(43, 0.2)
    ok = len(set(hashes)) == 1 and hashes[0] == smoke_run()[0].log.hash() and a.log.hash() != b.log.hash()
    verdict(4, ok, f"seed 42 x3 -> {len(set(hashes))} distinct hash; prob 0.2 seeds 42/43 differ: {a.log.hash() != b.log.hash()}")
    assert ok


def test_criterion_5_fake_cores(verdict):
    fake = fake_cores_run(16)
    real = fake_cores_run(4)
    recs_fake, recs_real = records(fake.log), records(real.log)
    conc_fake = max_overlap([(r["start_time"], r["end_time"]) for r in recs_fake])
    conc_real = max_overlap([(r["start_time"], r["end_time"]) for r in recs_real])
    one_glidein = len({r["glidein_id"] for r in recs_fake}) == 1
    ok = len(recs_fake) == 16 and conc_fake == 16 and one_glidein and len(recs_real) == 16 and conc_real == 4
    verdict(5, ok, f"advertised 16: concurrency {conc_fake} on {len({r['glidein_id'] for r in recs_fake})} glidein(s); advertised = actual: concurrency {conc_real}")
    assert ok


def test_criterion_6_no_waste(verdict):
    sim, _ = smoke_run()
    topo = sim.topology
    bound = topo.ce.glidein.idle_timeout_s + topo.ce.glidein.poll_period_s
    rep = metrics_report(sim.log)
    audit = list(sim.log.audit_records())
    last_end: dict[str, float] = {}
    for r in records(sim.log):
        last_end[r["glidein_id"]] = max(last_end.get(r["glidein_id"], 0.0), r["end_time"])
    registered = {r.subject: r.time for r in audit if r.action == "registered"}
    done = {r.subject: r.time for r in audit if r.action == "done"}
    lag = {g: done[g] - last_end.get(g, registered[g]) for g in registered if g in done}
    waste = {g: m.idle_s for g, m in rep.glideins.items() if m.startup_s}
    ok = set(lag) == set(registered) and all(v <= bound for v in lag.values()) and all(v <= bound for v in waste.values())
    verdict(6, ok, f"{len(lag)} glideins; max Done lag {max(lag.values()):g} s, max waste {max(waste.values()):g} s (bound {bound:g} s)")
    assert ok


OTHER_SCOPE = {"compute.create": "job.submit", "job.submit": "mailbox.write", "mailbox.write": "compute.create"}


def _bad_tokens(authority, subject, audience, scope):
    good = authority.issue(subject, audience, scope, 100, 0.0)
    flipped_sig = Token(**{**good.to_dict(), "signature": format(int(good.signature[0], 16) ^ 1, "x") + good.signature[1:]})
    flipped_claim = Token(**{**good.to_dict(), "subject": chr(ord(subject[0]) ^ 1) + subject[1:]})
    return [
        ("valid", good, None),
        ("expired", good, "expired"),
        ("wrong-audience", authority.issue(subject, "elsewhere." + audience, scope, 100, 0.0), "wrong-audience"),
        ("wrong-scope", authority.issue(subject, audience, OTHER_SCOPE[scope], 100, 0.0), "wrong-scope"),
        ("bit-flipped signature", flipped_sig, "bad-signature"),
        ("bit-flipped claim", flipped_claim, "bad-signature"),
        ("foreign key", init_authority(None, seed=999).issue(subject, audience, scope, 100, 0.0), "bad-signature"),
    ]


def test_criterion_7_auth_matrix(verdict):
    a = init_authority(None, seed=31)
    ce_host, fa_host, ap_host = "ce.glideinwms.org", "factory.glideinwms.org", "frontend.glideinwms.org"
    outcomes = []

    def attempt(fn):
        try:
            fn()
            return None
        except SubmissionRejected as e:
            return e.reason
        except JobRejected as e:
            return e.reason
        except MailboxRejected as e:
            return e.reason

    for i, (name, tok, expect) in enumerate(_bad_tokens(a, "fe", ce_host, "compute.create")):
        ce = CEState(ce_host, [NodeDescriptor("n0", R(1, 1, 1, 0), R(1, 1, 1, 0))], a)
        now = 200.0 if name == "expired" else 1.0
        outcomes.append(("ce", name, expect, attempt(lambda: submit_glidein(ce, f"g{i}", "fe", tok, now))))
    for name, tok, expect in _bad_tokens(a, "user", ap_host, "job.submit"):
        pool = PoolState(a, ap_host)
        now = 200.0 if name == "expired" else 1.0
        outcomes.append(("pool", name, expect, attempt(lambda: pool.submit_job(JobSpec(R(1, 1, 0, 0), 1), tok, now))))
    cred = a.issue("fe", ce_host, "compute.create", 3600, 0)
    for name, tok, expect in _bad_tokens(a, "fe", fa_host, "mailbox.write"):
        box = Mailbox(a, fa_host)
        now = 200.0 if name == "expired" else 1.0
        msg = RequestMessage("fe", "e1", 0, 1, 1, cred, now).signed(a)
        outcomes.append(("mailbox", name, expect, attempt(lambda: box.put_request(msg, now, tok))))
    wrong = [(svc, n, e, got) for svc, n, e, got in outcomes if e != got]
    false_accepts = sum(1 for _, _, e, got in wrong if e is not None and got is None)
    false_rejects = sum(1 for _, _, e, got in wrong if e is None and got is not None)
    ok = not wrong
    verdict(7, ok, f"{len(outcomes)} cases over CE/pool/mailbox; {false_accepts} false accepts, {false_rejects} false rejects, {len(wrong)} wrong reasons")
    assert ok, wrong


JOB_T = [R(1, 1024, 0, 0), R(2, 2048, 0, 0), R(4, 512, 100, 0)]
EP_T = [R(4, 4096, 200, 0), R(2, 8192, 0, 0)]


def _oracle(jobs, eps):
    """FIFO over (submit_time, job_id); first fitting EP in glidein_id order; deduct."""
    left = {g: list(c.as_tuple()) for g, c in eps}
    out = []
    for jid, _t, req in sorted(jobs, key=lambda j: (j[1], j[0])):
        for g in sorted(left):
            if all(x <= y for x, y in zip(req.as_tuple(), left[g])):
                left[g] = [y - x for x, y in zip(req.as_tuple(), left[g])]
                out.append((jid, g))
                break
    return out


def test_criterion_8_matching_oracle(verdict):
    a = init_authority(None, seed=8)
    tok = a.issue("user", "ap", "job.submit", 3600, 0)
    n = mismatches = 0
    for nj in range(7):
        for jt in itertools.product(range(3), repeat=nj):
            for ne in range(4):
                for et in itertools.product(range(2), repeat=ne):
                    pool = PoolState(a, "ap")
                    jobs = []
                    for i, t in enumerate(jt):
                        st = float((i * 5) % 3)
                        jobs.append((pool.submit_job(JobSpec(JOB_T[t], 10), tok, st), st, JOB_T[t]))
                    names = ["ep-b", "ep-c", "ep-a"][:ne]
                    for nm, t in zip(names, et):
                        pool.register(EPAd(nm, "fe", EP_T[t], EP_T[t], 0.0))
                    mismatches += pool.negotiate(5.0) != _oracle(jobs, [(nm, EP_T[t]) for nm, t in zip(names, et)])
                    n += 1
    ok = mismatches == 0
    verdict(8, ok, f"{n} instances, {mismatches} differ from the oracle")
    assert ok


def test_criterion_9_mode_equivalence(verdict, tmp_path_factory):
    base = tmp_path_factory.mktemp("procs")
    r = procs_run(str(base))
    sim, _ = smoke_run()
    sim_ids = sorted(metrics_report(sim.log).completed_job_ids)
    ok = r.passed and sorted(r.completed_job_ids) == sim_ids and len(sim_ids) == 10 and r.wall_s < 120
    verdict(9, ok, f"procs completed {len(r.completed_job_ids)} jobs (same ids as sim: {sorted(r.completed_job_ids) == sim_ids}), "
                   f"glideins {sorted(set(r.glidein_states.values()))}, wall {r.wall_s:.1f} s (< 120)")
    assert ok


def test_criterion_10_exactly_once(verdict, tmp_path_factory):
    smoke_run()
    smoke_run(42, 0.2)
    smoke_run(43, 0.2)
    pressure_run()
    fake_cores_run(16)
    fake_cores_run(4)
    if "procs" not in RUNS:
        procs_run(str(tmp_path_factory.mktemp("procs10")))
    bad = []
    completed = 0
    for name, log in sorted(RUNS.items()):
        counts: dict[str, int] = {}
        for r in records(log):
            counts[r["job"]] = counts.get(r["job"], 0) + 1
        rep = metrics_report(log)
        completed += rep.jobs_completed
        if set(counts) != {str(j) for j in rep.completed_job_ids} or any(c != 1 for c in counts.values()):
            bad.append(name)
    ok = not bad
    verdict(10, ok, f"{len(RUNS)} runs, {completed} completed jobs, runs with a duplicate or missing record: {bad or 'none'}")
    assert ok
