from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from glidemini.core import Job, JobState, ResourceSpec
from glidemini.frontend import (
    FrontendConfig,
    FrontendState,
    KnownEntry,
    MailboxUnavailable,
    compute_request,
    count_matching,
    frontend_cycle,
)
from glidemini.mailbox import FactoryStatusMessage, Mailbox

NODE = ResourceSpec(8, 8192, 1000, 0)
FACTORY = "factory.glideinwms.org"


def jobs(n, cores=1, state=JobState.IDLE, start=1):
    return [Job(start + i, "u", 0.0, ResourceSpec(cores, 1024, 0, 0), 10, state) for i in range(n)]


def cfg(**kw):
    base = dict(client_id="fe", entries_known=[KnownEntry("e1", NODE, "factory")], max_pressure_per_entry=8)
    base.update(kw)
    return FrontendConfig(**base)


def test_count_matching_examples():
    assert count_matching(jobs(10), NODE) == (10, 0)
    assert count_matching(jobs(3, cores=16), NODE) == (0, 0)
    assert count_matching([], NODE) == (0, 0)
    assert count_matching(jobs(2) + jobs(3, state=JobState.RUNNING, start=10), NODE) == (2, 3)


def test_compute_request_examples():
    assert compute_request(10, 0, 0, cfg(max_pressure_per_entry=5)) == (5, 5)
    assert compute_request(0, 0, 0, cfg()) == (0, 0)
    assert compute_request(10, 3, 60, cfg(max_pressure_per_entry=20)) == (3, 3)
    assert compute_request(10, 3, 100, cfg(max_pressure_per_entry=20)) == (0, 0)


def test_expansion_factor_exact():
    c = cfg(expansion_factor="0.1", max_pressure_per_entry=100)
    assert c.expansion_factor == Fraction(1, 10)
    assert compute_request(30, 0, 0, c) == (3, 3)
    assert compute_request(31, 0, 0, c) == (4, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(total_curb_glideins=200, total_max_glideins=100)
    with pytest.raises(ValueError):
        cfg(expansion_factor=0)


@given(st.integers(0, 200), st.integers(0, 50), st.integers(0, 150), st.integers(1, 20))
def test_request_properties(idle, busy, total, cap):
    c = cfg(max_pressure_per_entry=cap)
    rp, rm = compute_request(idle, busy, total, c)
    assert rp == rm and 0 <= rp <= cap
    if idle == 0 and busy == 0:
        assert rp == 0
    if idle > 0 and total < c.total_curb_glideins and busy == 0:
        assert rp > 0
    if idle >= cap:
        assert compute_request(idle * 3 + 1, busy, total, c) == (rp, rm)


class FakeBox:
    def __init__(self, authority, down=False):
        self.box = Mailbox(authority, FACTORY)
        self.down = down
        self.puts = []

    def __call__(self, addr, msg, token):
        if self.down:
            raise MailboxUnavailable("down")
        self.box.put_request(msg, msg.sent_at, token)
        self.puts.append(msg)


def make_state(authority, **kw):
    creds = {"e1": authority.issue("fe", "ce.glideinwms.org", "compute.create", 3600, 0)}
    mb = {"factory": authority.issue("fe", FACTORY, "mailbox.write", 3600, 0)}
    return FrontendState(cfg(**kw), authority, creds, mb)


def test_cycle_empty_pool_requests_zero(authority):
    st_ = make_state(authority)
    box = FakeBox(authority)
    rep = frontend_cycle(st_, 0, [], box)
    assert [(m.entry_id, m.req_pressure) for m in rep.requests] == [("e1", 0)]


def test_cycle_ten_idle(authority):
    st_ = make_state(authority, max_pressure_per_entry=8)
    box = FakeBox(authority)
    rep = frontend_cycle(st_, 0, jobs(10), box)
    assert rep.requests[0].req_pressure == 8 and box.box.requests


def test_cycle_mailbox_down_keeps_seq(authority):
    st_ = make_state(authority)
    box = FakeBox(authority, down=True)
    rep = frontend_cycle(st_, 0, jobs(3), box)
    assert rep.requests == [] and st_.seq == {} and "e1" in rep.failed
    box.down = False
    rep = frontend_cycle(st_, 2, jobs(3), box)
    assert rep.requests[0].seq == 0


def test_seq_increases_by_one(authority):
    st_ = make_state(authority)
    box = FakeBox(authority)
    for i in range(5):
        box.down = i == 2
        frontend_cycle(st_, 2.0 * i, jobs(3), box)
    assert [m.seq for m in box.puts] == [0, 1, 2, 3]


def test_busy_and_total_from_status(authority):
    st_ = make_state(authority, max_pressure_per_entry=20)
    st_.update_status([FactoryStatusMessage("e1", 0, {"fe": {"Running": 3, "Queued": 2, "Done": 4}, "x": {"Running": 9}}, 0)])
    assert st_.glidein_counts("e1") == (3, 5)
    rep = frontend_cycle(st_, 0, jobs(4), FakeBox(authority))
    assert rep.requests[0].req_pressure == 7


def test_credentials_refreshed_before_expiry(authority):
    st_ = make_state(authority)
    box = FakeBox(authority)
    frontend_cycle(st_, 3000, [], box)
    assert st_.credentials["e1"].expires_at == 6600
    assert st_.mailbox_tokens["factory"].expires_at == 6600
