"""Metrics recomputed purely from an event log."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..audit import AuditRecord, glidein_timelines
from .events import EventLog, MalformedLog


@dataclass(frozen=True)
class GlideinMetrics:
    busy_s: float
    idle_s: float
    startup_s: float
    jobs: int
    terminal_state: str | None


@dataclass(frozen=True)
class MetricsReport:
    jobs_submitted: int = 0
    jobs_completed: int = 0
    jobs_failed: int = 0
    jobs_removed: int = 0
    jobs_unfinished: int = 0
    makespan_s: float = 0.0
    glideins: Mapping[str, GlideinMetrics] = field(default_factory=dict)
    glideins_by_terminal_state: Mapping[str, int] = field(default_factory=dict)
    glideins_unfinished: int = 0
    auth_failures: int = 0
    peak_running_jobs: int = 0
    peak_active_glideins: int = 0
    completed_job_ids: tuple[int, ...] = ()
    execution_records: Mapping[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "jobs_submitted": self.jobs_submitted,
            "jobs_completed": self.jobs_completed,
            "jobs_failed": self.jobs_failed,
            "jobs_removed": self.jobs_removed,
            "jobs_unfinished": self.jobs_unfinished,
            "makespan_s": self.makespan_s,
            "glideins": {
                g: {"busy_s": m.busy_s, "idle_s": m.idle_s, "startup_s": m.startup_s, "jobs": m.jobs, "terminal_state": m.terminal_state}
                for g, m in sorted(self.glideins.items())
            },
            "glideins_by_terminal_state": dict(sorted(self.glideins_by_terminal_state.items())),
            "glideins_unfinished": self.glideins_unfinished,
            "auth_failures": self.auth_failures,
            "peak_running_jobs": self.peak_running_jobs,
            "peak_active_glideins": self.peak_active_glideins,
        }


def _peak(intervals: list[tuple[float, float]]) -> int:
    # ends sort before starts at the same instant
    points = sorted([(s, 1) for s, _ in intervals] + [(e, -1) for _, e in intervals], key=lambda p: (p[0], p[1]))
    cur = best = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


def metrics_from_records(records: list[AuditRecord]) -> MetricsReport:
    job_state: dict[str, str] = {}
    submit_times: list[float] = []
    end_times: list[float] = []
    exec_count: Counter = Counter()
    job_intervals: list[tuple[float, float]] = []
    auth = 0
    for r in records:
        kind = r.detail.get("kind")
        if r.action == "rejected_auth":
            auth += 1
            continue
        if kind != "job":
            continue
        if r.action == "submitted":
            submit_times.append(r.time)
        st = r.detail.get("state")
        if st is not None:
            job_state[r.subject] = st
        if r.action in ("completed", "failed"):
            end_times.append(r.time)
            rec = r.detail.get("execution_record")
            if rec:
                exec_count[int(r.subject)] += 1
                job_intervals.append((float(rec["start_time"]), float(rec["end_time"])))

    timelines = glidein_timelines(records)
    glideins: dict[str, GlideinMetrics] = {}
    terminal = Counter()
    unfinished = 0
    active: list[tuple[float, float]] = []
    for gid, t in sorted(timelines.items()):
        if t.terminal_state is None:
            unfinished += 1
        else:
            terminal[t.terminal_state] += 1
        busy = t.busy_s
        if t.registered is not None and t.terminal is not None:
            idle = round((t.terminal - t.registered) - busy, 6)
            active.append((t.registered, t.terminal))
        else:
            idle = 0.0
        startup = round(t.registered - t.submitted, 6) if t.registered is not None and t.submitted is not None else 0.0
        glideins[gid] = GlideinMetrics(busy, idle, startup, len(t.busy), t.terminal_state)

    counts = Counter(job_state.values())
    done = counts["Completed"] + counts["Failed"] + counts["Removed"]
    makespan = round(max(end_times) - min(submit_times), 6) if end_times and submit_times else 0.0
    return MetricsReport(
        jobs_submitted=len(job_state),
        jobs_completed=counts["Completed"],
        jobs_failed=counts["Failed"],
        jobs_removed=counts["Removed"],
        jobs_unfinished=len(job_state) - done,
        makespan_s=makespan,
        glideins=glideins,
        glideins_by_terminal_state=dict(terminal),
        glideins_unfinished=unfinished,
        auth_failures=auth,
        peak_running_jobs=_peak(job_intervals),
        peak_active_glideins=_peak(active),
        completed_job_ids=tuple(sorted(int(j) for j, s in job_state.items() if s == "Completed")),
        execution_records=dict(exec_count),
    )


def metrics_report(log: EventLog) -> MetricsReport:
    """Derive the run report from ``log`` alone; raises MalformedLog on bad entries."""
    try:
        return metrics_from_records(log.audit_records())
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MalformedLog):
            raise
        raise MalformedLog(str(exc)) from None
