"""Command line entry point.

Exit codes: 0 pass, 1 fail, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from ..credentials import CredentialError
from .events import EventLog
from .metrics import metrics_report
from .sim import Simulation
from .topology import TopologyError, load_minimal, parse_topology, parse_workload

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2

log = logging.getLogger("glidemini")


def _load_topology(path: Optional[str]):
    return load_minimal() if path is None else parse_topology(path)


def _print_config_error(exc: Exception) -> None:
    if isinstance(exc, TopologyError):
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
    else:
        print(f"config error: {exc}", file=sys.stderr)


def cmd_up(args) -> int:
    from . import procs

    topo = _load_topology(args.file)
    state = procs.up(topo, args.dir, seed=args.seed)
    for name, pid in sorted(state.pids.items()):
        print(f"{name}: pid {pid} ({topo.endpoints[name].address})")
    return EXIT_PASS


def cmd_down(args) -> int:
    from . import procs

    merged = procs.down(args.dir)
    print(f"stopped; {len(merged)} events merged into logs/events.log (hash {merged.hash()[:16]})")
    return EXIT_PASS


def cmd_status(args) -> int:
    from . import procs

    state = procs.RunState.load(Path(args.dir).resolve())
    topo = state.topology()
    authority = state.authority()
    ok = True
    for name in procs.SERVICE_ORDER:
        alive = procs.ping(topo, authority, name)
        ok &= alive
        line = f"{name}: {'up' if alive else 'DOWN'} pid {state.pids.get(name)}"
        if alive and args.verbose:
            line += " " + json.dumps(procs.query(state, name), sort_keys=True)
        print(line)
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_submit(args) -> int:
    from . import procs

    workload = parse_workload(args.file)
    state = procs.RunState.load(Path(args.dir).resolve())
    ids = procs.submit_workload(state, workload)
    print(f"submitted {len(ids)} job(s): {ids[0]}..{ids[-1]}" if ids else "submitted 0 jobs")
    return EXIT_PASS


def cmd_smoke(args) -> int:
    from .smoke import smoke_procs, smoke_sim

    topo = _load_topology(args.file)
    mode = args.mode or topo.mode
    if mode == "procs":
        result = smoke_procs(topo, args.dir, timeout_s=args.timeout, seed=args.seed)
    else:
        result = smoke_sim(topo, seed=args.seed, until_s=args.until)
    print(result.summary())
    if args.json:
        print(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    return EXIT_PASS if result.passed else EXIT_FAIL


def cmd_sim(args) -> int:
    topo = _load_topology(args.file)
    workload = parse_workload(args.workload)
    sim = Simulation(topo, workload, args.seed)
    sim.run(args.until, stop_when=(lambda s: s.drained() and bool(s.factory.state.glideins)) if args.stop_on_drain else None)
    report = metrics_report(sim.log)
    if args.events:
        sim.log.write(args.events)
    print(json.dumps({"hash": sim.log.hash(), "end_time": sim.now, "metrics": report.to_dict()}, indent=2, sort_keys=True))
    passed = report.jobs_completed == report.jobs_submitted and report.glideins_unfinished == 0 and not sim.audit_mismatches()
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_report(args) -> int:
    report = metrics_report(EventLog.read(args.events))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glidemini", description="Miniature pilot-based workload management system")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-C", "--dir", default=".", help="working directory for run state and logs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("up", help="start every service as a local process")
    s.add_argument("-f", "--file", help="topology file (default: shipped minimal topology)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_up)

    s = sub.add_parser("down", help="stop the running services")
    s.set_defaults(fn=cmd_down)

    s = sub.add_parser("status", help="health of the running services")
    s.set_defaults(fn=cmd_status)

    s = sub.add_parser("submit", help="submit a workload to the running access point")
    s.add_argument("-f", "--file", required=True, help="workload file")
    s.set_defaults(fn=cmd_submit)

    s = sub.add_parser("smoke-test", help="run the built-in smoke workload")
    s.add_argument("-f", "--file", help="topology file (default: shipped minimal topology)")
    s.add_argument("--mode", choices=["sim", "procs"], help="override the topology's mode")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--until", type=float, default=600.0, help="sim horizon in sim-seconds")
    s.add_argument("--timeout", type=float, default=120.0, help="procs wall-clock timeout")
    s.add_argument("--json", action="store_true", help="also print the metrics report")
    s.set_defaults(fn=cmd_smoke)

    s = sub.add_parser("sim", help="simulate a workload on a topology")
    s.add_argument("-f", "--file", help="topology file (default: shipped minimal topology)")
    s.add_argument("-w", "--workload", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--until", type=float, default=600.0)
    s.add_argument("--stop-on-drain", action="store_true", help="stop as soon as all work is finished")
    s.add_argument("--events", help="write the event log to this file")
    s.set_defaults(fn=cmd_sim)

    s = sub.add_parser("report", help="recompute metrics from an event log file")
    s.add_argument("events")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from . import procs

    try:
        return args.fn(args)
    except (TopologyError, CredentialError, FileNotFoundError, json.JSONDecodeError) as exc:
        _print_config_error(exc)
        return EXIT_CONFIG
    except procs.PortInUse as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (procs.ProcsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
