"""A miniature pilot-based workload management system.

A Factory keeps pilot (glidein) pressure at a Compute Entrypoint in line with
requests from a Frontend; glideins join a user pool and run user jobs in
partitionable slots. Everything runs either as one deterministic simulation
or as local processes.
"""

from .core import (
    ExecutionRecord,
    GlideinRecord,
    GlideinState,
    Job,
    JobState,
    ResourceSpec,
    carve,
    fits,
    release,
    transition,
)

__all__ = [
    "ExecutionRecord",
    "GlideinRecord",
    "GlideinState",
    "Job",
    "JobState",
    "ResourceSpec",
    "carve",
    "fits",
    "release",
    "transition",
]
__version__ = "0.1.0"
