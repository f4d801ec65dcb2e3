from __future__ import annotations

import itertools
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from glidemini.core import PRESSURE_STATES, EntryDescriptor, GlideinRecord, GlideinState, IllegalTransition, ResourceSpec
from glidemini.credentials import init_authority
from glidemini.factory import FactoryState, compute_retirements, compute_submission, factory_cycle, handle_glidein_event
from glidemini.mailbox import Mailbox, RequestMessage

FACTORY = "factory.glideinwms.org"
CE = "ce.glideinwms.org"


def make_factory(authority, max_pressure=8, per_cycle=10, trusted=(), entries=("e1",)):
    ents = {e: EntryDescriptor(e, "ce", CE, max_pressure, per_cycle, tuple(trusted)) for e in entries}
    return FactoryState(ents, Mailbox(authority, FACTORY), authority)


def put(state, authority, client, entry, seq, req, now, max_run=None, audience=CE):
    cred = authority.issue(client, audience, "compute.create", 3600, 0)
    m = RequestMessage(client, entry, seq, req, req if max_run is None else max_run, cred, now).signed(authority)
    state.mailbox.put_request(m, now, authority.issue(client, FACTORY, "mailbox.write", 3600, 0))


def test_compute_submission_examples():
    assert compute_submission(5, 2, 8, 10) == 3
    assert compute_submission(5, 7, 8, 10) == 0
    assert compute_submission(20, 0, 8, 3) == 3


@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(1, 30), st.integers(1, 30))
def test_submission_monotone(req, cur, maxp, per, step):
    n = compute_submission(req, cur, maxp, per)
    assert 0 <= n <= per
    assert cur + n <= max(cur, maxp)
    assert compute_submission(req + step, cur, maxp, per) >= n
    assert compute_submission(req, cur + step, maxp, per) <= n


def rec(gid, served, t, state=GlideinState.RUNNING):
    return GlideinRecord(gid, "e1", "fe", state, t, ResourceSpec(8, 1, 1, 0), served)


def precedes(a, b):
    # a is retired before b
    if a.jobs_served != b.jobs_served:
        return a.jobs_served < b.jobs_served
    if a.submit_time != b.submit_time:
        return a.submit_time > b.submit_time
    return a.glidein_id > b.glidein_id


def oracle_retire(req_max_run, gs):
    excess = len(gs) - req_max_run
    if excess <= 0:
        return set()
    # the unique subset whose members all precede every non-member
    for subset in itertools.combinations(gs, excess):
        rest = [g for g in gs if g not in subset]
        if all(precedes(a, b) for a in subset for b in rest):
            return {g.glidein_id for g in subset}
    raise AssertionError("no consistent subset")


def test_compute_retirements_examples():
    three = [rec(f"g{i}", i, i) for i in range(3)]
    assert compute_retirements(3, three) == set()
    four = [rec("a", 5, 10), rec("b", 2, 20), rec("c", 2, 30), rec("d", 0, 40)]
    assert compute_retirements(2, four) == {"d", "c"} == oracle_retire(2, four)
    assert compute_retirements(0, three[:2]) == {"g0", "g1"}


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=6, unique_by=lambda x: x), st.integers(0, 6), st.data())
def test_retirements_match_enumeration(rows, cap, data):
    ids = data.draw(st.permutations([f"g{i:02d}" for i in range(len(rows))]))
    gs = [rec(ids[i], served, float(t)) for i, (served, t) in enumerate(rows)]
    assert compute_retirements(cap, gs) == oracle_retire(cap, gs)


def test_cycle_quiescent(authority):
    f = make_factory(authority, entries=("e1", "e2"))
    acts = factory_cycle(f, 0)
    assert acts.submissions == [] and acts.retirements == set()
    assert [s.entry_id for s in acts.statuses] == ["e1", "e2"]


def test_cycle_one_request_submits_five(authority):
    f = make_factory(authority)
    put(f, authority, "fe", "e1", 0, 5, 0)
    acts = factory_cycle(f, 1)
    assert len(acts.submissions) == 5
    assert len({s.glidein_id for s in acts.submissions}) == 5
    assert f.pressure("e1") == 5


def test_cycle_wrong_audience_counts_auth_failure(authority):
    f = make_factory(authority)
    put(f, authority, "fe", "e1", 0, 5, 0, audience="other-ce.glideinwms.org")
    acts = factory_cycle(f, 1)
    assert acts.submissions == [] and f.auth_failures == 1
    assert acts.auth_failures[0].reason == "wrong-audience"


def test_untrusted_client_skipped(authority):
    f = make_factory(authority, trusted=("good",))
    put(f, authority, "evil", "e1", 0, 5, 0)
    acts = factory_cycle(f, 1)
    assert acts.submissions == [] and f.auth_failures == 1


def test_stale_request_submits_nothing(authority):
    f = make_factory(authority)
    put(f, authority, "fe", "e1", 0, 5, 0)
    assert factory_cycle(f, 100).submissions == []


def test_cycle_too_early(authority):
    f = make_factory(authority)
    factory_cycle(f, 0)
    with pytest.raises(ValueError):
        factory_cycle(f, 1)


def test_retire_excess_running(authority):
    f = make_factory(authority)
    for i, served in enumerate([3, 0, 1]):
        f.glideins[f"g{i}"] = rec(f"g{i}", served, float(i))
    put(f, authority, "fe", "e1", 0, 3, 0, max_run=1)
    acts = factory_cycle(f, 1)
    assert acts.retirements == {"g1", "g2"}
    assert f.glideins["g1"].state is GlideinState.RETIRING


def test_handle_event_examples(authority):
    f = make_factory(authority)
    f.glideins["g"] = GlideinRecord("g", "e1", "fe")
    assert handle_glidein_event(f, "g", "queued", 1).state is GlideinState.QUEUED
    f.glideins["s"] = GlideinRecord("s", "e1", "fe", GlideinState.STARTING)
    assert handle_glidein_event(f, "s", "failed", 1).state is GlideinState.FAILED
    f.glideins["d"] = GlideinRecord("d", "e1", "fe", GlideinState.DONE, detected=ResourceSpec(1, 1, 1, 0))
    with pytest.raises(IllegalTransition):
        handle_glidein_event(f, "d", "running", 1)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 12))
def test_convergence_to_constant_request(maxp, per, k):
    k = min(k, maxp)
    a = init_authority(None, seed=1)
    f = make_factory(a, maxp, per)
    bound = math.ceil(k / per)
    for cycle in range(bound + 4):
        now = 2.0 * cycle
        put(f, a, "fe", "e1", cycle, k, now)
        acts = factory_cycle(f, now)
        # glideins move along but stay within the pressure states
        for s in acts.submissions:
            handle_glidein_event(f, s.glidein_id, "queued", now)
        if cycle + 1 >= bound:
            assert f.pressure("e1") == k


def _fuzz_step(f, a, rng, clients, now, seqs, maxp):
    for c in clients:
        if rng.random() < 0.7:
            seqs[c] += 1
            req = rng.randint(0, 3 * maxp)
            put(f, a, c, "e1", seqs[c], req, now, max_run=rng.randint(0, req + 2))
    acts = factory_cycle(f, now)
    assert f.pressure("e1") <= maxp
    for gid, g in sorted(f.glideins.items()):
        r = rng.random()
        ev = {
            GlideinState.SUBMITTED: "queued",
            GlideinState.QUEUED: "node_assigned",
            GlideinState.STARTING: "registered",
            GlideinState.REGISTERED: "running",
            GlideinState.RUNNING: "job_finished_and_none_idle_pending",
            GlideinState.RETIRING: "retired",
        }.get(g.state)
        if ev is None:
            continue
        if r < 0.1:
            ev = "failed"
        elif r < 0.5:
            continue
        handle_glidein_event(f, gid, ev, now, ResourceSpec(8, 1, 1, 0))
        assert f.pressure("e1") <= maxp
    return acts


@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 3), st.integers(0, 10_000))
def test_throttle_safety_fuzz(maxp, per, nclients, seed):
    import random

    rng = random.Random(seed)
    a = init_authority(None, seed=seed)
    f = make_factory(a, maxp, per)
    clients = [f"c{i}" for i in range(nclients)]
    seqs = {c: -1 for c in clients}
    for cycle in range(25):
        _fuzz_step(f, a, rng, clients, 2.0 * cycle, seqs, maxp)
        assert sum(1 for g in f.glideins.values() if g.state in PRESSURE_STATES) <= maxp
