from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from glidemini.ce import CEState, NodeDescriptor, SubmissionRejected, UnknownGlidein, ce_cycle, release_node, remove_queued, submit_glidein
from glidemini.core import ResourceSpec

CE = "ce.glideinwms.org"
NODE = ResourceSpec(8, 8192, 1000, 0)


def make_ce(authority, n=2):
    return CEState(CE, [NodeDescriptor(f"node-{i}", NODE, NODE) for i in range(n)], authority)


def tok(authority, now=0, ttl=3600, audience=CE, scope="compute.create"):
    return authority.issue("fe", audience, scope, ttl, now)


def test_submit_examples(authority):
    ce = make_ce(authority)
    submit_glidein(ce, "g1", "fe", tok(authority), 1)
    assert ce.queued_ids() == ["g1"]
    with pytest.raises(SubmissionRejected) as e:
        submit_glidein(ce, "g2", "fe", tok(authority, ttl=10), 20)
    assert e.value.reason == "expired" and ce.queued_ids() == ["g1"]
    with pytest.raises(SubmissionRejected) as e:
        submit_glidein(ce, "g1", "fe", tok(authority), 2)
    assert e.value.reason == "duplicate-glidein"


def test_cycle_examples(authority):
    ce = make_ce(authority)
    assert ce_cycle(ce, 0) == []
    for g in ("a", "b", "c"):
        submit_glidein(ce, g, "fe", tok(authority), 0)
    assert ce_cycle(ce, 1) == [("a", "node-0"), ("b", "node-1")]
    assert ce.queued_ids() == ["c"]
    assert ce_cycle(ce, 2) == []
    assert ce.queued_ids() == ["c"]


def test_release_examples(authority):
    ce = make_ce(authority)
    for g in ("a", "b", "c"):
        submit_glidein(ce, g, "fe", tok(authority), 0)
    ce_cycle(ce, 1)
    assert release_node(ce, "a", 5) == "node-0"
    assert not ce.nodes[0].busy
    with pytest.raises(UnknownGlidein):
        release_node(ce, "zzz", 5)
    # a node freed mid-cycle is usable from the next cycle
    assert ce_cycle(ce, 6) == [("c", "node-0")]


def test_node_freed_at_cycle_time_waits_one_cycle(authority):
    ce = make_ce(authority, n=1)
    for g in ("a", "b"):
        submit_glidein(ce, g, "fe", tok(authority), 0)
    ce_cycle(ce, 1)
    release_node(ce, "a", 2)
    assert ce_cycle(ce, 2) == []
    assert ce_cycle(ce, 3) == [("b", "node-0")]


def test_natural_node_order(authority):
    ce = CEState(CE, [NodeDescriptor(f"node-{i}", NODE, NODE) for i in (10, 2, 1)], authority)
    for g in ("a", "b", "c"):
        submit_glidein(ce, g, "fe", tok(authority), 0)
    assert [n for _, n in ce_cycle(ce, 1)] == ["node-1", "node-2", "node-10"]


def test_remove_queued(authority):
    ce = make_ce(authority, n=0)
    submit_glidein(ce, "a", "fe", tok(authority), 0)
    assert remove_queued(ce, "a") and not remove_queued(ce, "a")


def test_validation():
    from glidemini.credentials import init_authority

    a = init_authority(None, seed=1)
    with pytest.raises(ValueError):
        CEState(CE, [NodeDescriptor("n", NODE, NODE), NodeDescriptor("n", NODE, NODE)], a)
    with pytest.raises(ValueError):
        CEState(CE, [], a, validation_failure_prob=1.5)


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_fifo_occupancy_and_auth_completeness(nnodes, seed):
    from glidemini.credentials import init_authority

    rng = random.Random(seed)
    a = init_authority(None, seed=2)
    forger = init_authority(None, seed=3)
    ce = make_ce(a, nnodes)
    accepted, assigned = [], []
    running = []
    now = 0.0
    for step in range(40):
        now += 1
        for _ in range(rng.randint(0, 2)):
            gid = f"g{step}-{rng.random():.6f}"
            good = rng.random() < 0.6
            t = tok(a if good else forger, now)
            try:
                submit_glidein(ce, gid, "fe", t, now)
                accepted.append(gid)
            except SubmissionRejected as exc:
                assert not good and exc.reason == "bad-signature"
        for gid, node in ce_cycle(ce, now):
            assigned.append(gid)
            running.append(gid)
        occupants = [n.occupant for n in ce.nodes if n.busy]
        assert len(occupants) == len(set(occupants)) <= nnodes
        assert set(occupants) <= set(accepted)
        if running and rng.random() < 0.4:
            release_node(ce, running.pop(rng.randrange(len(running))), now)
    assert assigned == accepted[: len(assigned)]
