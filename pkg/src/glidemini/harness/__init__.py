"""Topology loading, simulation, local process runner and metrics."""

from .events import EventLog
from .metrics import MetricsReport, metrics_report
from .sim import Simulation, run_simulation
from .topology import TopologyConfig, WorkloadSpec, load_minimal, parse_topology, parse_workload, smoke_workload

__all__ = [
    "EventLog",
    "MetricsReport",
    "Simulation",
    "TopologyConfig",
    "WorkloadSpec",
    "load_minimal",
    "metrics_report",
    "parse_topology",
    "parse_workload",
    "run_simulation",
    "smoke_workload",
]
