"""End-to-end smoke test: submit the built-in workload and wait for a clean drain."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from ..core import GLIDEIN_TERMINAL, GlideinState, JobState
from .events import EventLog
from .metrics import MetricsReport, metrics_report
from .sim import Simulation
from .topology import TopologyConfig, WorkloadSpec, smoke_workload

log = logging.getLogger(__name__)

DEFAULT_UNTIL_S = 600.0
DEFAULT_TIMEOUT_S = 120.0
_TERMINAL = {s.value for s in GLIDEIN_TERMINAL}


@dataclass
class SmokeResult:
    passed: bool
    report: MetricsReport
    log: EventLog
    reason: str = ""
    completed_job_ids: tuple[int, ...] = ()
    glidein_states: dict[str, str] = field(default_factory=dict)
    audit_mismatches: list[str] = field(default_factory=list)
    wall_s: float = 0.0

    def summary(self) -> str:
        r = self.report
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: {r.jobs_completed}/{r.jobs_submitted} jobs completed, "
            f"{len(r.glideins)} glideins {dict(sorted(r.glideins_by_terminal_state.items()))}, "
            f"makespan {r.makespan_s:g} s, wall {self.wall_s:.2f} s" + (f" ({self.reason})" if self.reason else "")
        )


def _verdict(expected_jobs: int, jobs: dict[int, str], glideins: dict[str, str], timed_out: bool) -> tuple[bool, str]:
    if len(jobs) < expected_jobs:
        return False, f"only {len(jobs)} of {expected_jobs} jobs accepted"
    not_done = sorted(j for j, s in jobs.items() if s != JobState.COMPLETED.value)
    open_g = sorted(g for g, s in glideins.items() if s not in _TERMINAL)
    if not_done:
        return False, ("timeout: " if timed_out else "") + f"{len(not_done)} job(s) not Completed"
    if open_g:
        return False, ("timeout: " if timed_out else "") + f"{len(open_g)} glidein(s) not terminal"
    return True, ""


def smoke_sim(
    topology: TopologyConfig,
    seed: int = 0,
    until_s: float = DEFAULT_UNTIL_S,
    workload: Optional[WorkloadSpec] = None,
    disable: Iterable[str] = (),
) -> SmokeResult:
    workload = workload or smoke_workload()
    t0 = time.perf_counter()
    sim = Simulation(topology, workload, seed, disable=disable)

    def settled(s: Simulation) -> bool:
        # jobs all terminal and every glidein finished, or nothing will ever start
        return s.drained() and bool(s.factory.state.glideins)

    sim.run(until_s, stop_when=settled)
    wall = time.perf_counter() - t0
    jobs = {j: job.state.value for j, job in sim.frontend.pool.jobs.items()}
    glideins = {g: (sim.ce.glideins[g].state.value if g in sim.ce.glideins else r.state.value) for g, r in sim.factory.state.glideins.items()}
    passed, reason = _verdict(workload.total_jobs, jobs, glideins, not settled(sim))
    report = metrics_report(sim.log)
    return SmokeResult(
        passed,
        report,
        sim.log,
        reason,
        report.completed_job_ids,
        glideins,
        sim.audit_mismatches(),
        wall,
    )


def smoke_procs(topology: TopologyConfig, base_dir: str | Path = ".", timeout_s: float = DEFAULT_TIMEOUT_S, seed: int = 0) -> SmokeResult:
    """Bring the topology up if needed, run the smoke workload, and tear down what we started."""
    from . import procs

    base = Path(base_dir)
    t0 = time.perf_counter()
    started = False
    try:
        state = procs.RunState.load(base.resolve())
    except procs.NotRunning:
        state = procs.up(topology, base, seed=seed)
        started = True
    jobs: dict[int, str] = {}
    glideins: dict[str, str] = {}
    timed_out = True
    try:
        workload = smoke_workload()
        ids = procs.submit_workload(state, workload)
        deadline = t0 + timeout_s
        while time.perf_counter() < deadline:
            fe = procs.query(state, "frontend")
            fa = procs.query(state, "factory")
            all_jobs = {int(j): s for j, s in fe.get("jobs", {}).items()}
            jobs = {j: all_jobs.get(j, "missing") for j in ids}
            glideins = dict(fa.get("glideins", {}))
            if glideins and all(s in _TERMINAL for s in glideins.values()) and all(s in ("Completed", "Failed", "Removed") for s in jobs.values()):
                timed_out = False
                break
            time.sleep(0.5)
    finally:
        if started:
            event_log = procs.down(base)
        else:
            event_log = procs.merge_event_logs(state.logs_dir)
    passed, reason = _verdict(workload.total_jobs, jobs, glideins, timed_out)
    report = metrics_report(event_log)
    return SmokeResult(passed, report, event_log, reason, report.completed_job_ids, glideins, [], time.perf_counter() - t0)


def smoke_test(topology: TopologyConfig, **kwargs) -> SmokeResult:
    """Run the smoke test in the topology's mode."""
    if topology.mode == "procs":
        return smoke_procs(topology, **kwargs)
    return smoke_sim(topology, **kwargs)


__all__ = ["SmokeResult", "smoke_procs", "smoke_sim", "smoke_test", "GlideinState"]
