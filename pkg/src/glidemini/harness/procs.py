"""Run each service as a local process speaking the line protocol.

``up`` provisions credentials, launches one process per service and health
checks them; ``down`` stops them and merges their event logs. Hostnames in
the topology resolve to loopback through a table handed to every process.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import random
import signal
import socket
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from ..audit import AuditLog
from ..core import tadd
from ..credentials import AuthorityState, Token, init_authority
from ..pool import JobSpec
from .events import EventEntry, EventLog
from .services import CEService, FactoryService, FrontendService, Service
from .topology import TopologyConfig, WorkloadSpec, validate_topology
from .wire import Message, WireError, decode, encode

log = logging.getLogger(__name__)

RUN_DIR = ".glidemini"
RUN_FILE = "run.json"
TOPOLOGY_FILE = "topology.json"
TOKENS_DIR = "tokens"
HEALTH_TIMEOUT_S = 10.0
SERVICE_ORDER = ("ce", "factory", "frontend")
USER = "user"


class ProcsError(Exception):
    pass


class PortInUse(ProcsError):
    def __init__(self, service: str, port: int) -> None:
        self.service = service
        self.port = port
        super().__init__(f"port-in-use: {service} port {port}")


class HealthCheckFailed(ProcsError):
    def __init__(self, service: str) -> None:
        self.service = service
        super().__init__(f"health check failed: {service} did not answer PING within {HEALTH_TIMEOUT_S:g} s")


class NotRunning(ProcsError):
    pass


@dataclass
class RunState:
    base_dir: str
    secret_dir: str
    logs_dir: str
    epoch: float
    time_scale: float
    pids: dict[str, int] = field(default_factory=dict)

    @classmethod
    def load(cls, base: Path) -> RunState:
        path = base / RUN_DIR / RUN_FILE
        if not path.exists():
            raise NotRunning(f"no running topology under {base}")
        return cls(**json.loads(path.read_text()))

    def save(self) -> None:
        path = Path(self.base_dir) / RUN_DIR / RUN_FILE
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def topology(self) -> TopologyConfig:
        return validate_topology(json.loads((Path(self.base_dir) / RUN_DIR / TOPOLOGY_FILE).read_text()))

    def authority(self) -> AuthorityState:
        return init_authority(self.secret_dir)

    def sim_now(self) -> float:
        return round((time.time() - self.epoch) * self.time_scale, 6)


def resolve_secret_dir(topo: TopologyConfig, base: Path) -> Path:
    d = Path(os.environ.get("GLIDEMINI_SECRET_DIR") or topo.secret_dir)
    return d if d.is_absolute() else (base / d)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def check_ports(topo: TopologyConfig, ip: str = "127.0.0.1") -> None:
    for name in SERVICE_ORDER:
        ep = topo.endpoints[name]
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind((ip, ep.port))
            except OSError:
                raise PortInUse(name, ep.port) from None


def write_tokens(topo: TopologyConfig, authority: AuthorityState, secret_dir: Path) -> dict[str, Token]:
    """Issue the credentials each party needs, valid from the run's time zero."""
    fe = topo.frontend
    tokens = {f"compute.create.{e.entry_id}": authority.issue(fe.client_id, topo.hostname("ce"), "compute.create", fe.token_ttl_s, 0.0) for e in fe.entries}
    tokens["mailbox.write"] = authority.issue(fe.client_id, topo.hostname("factory"), "mailbox.write", fe.token_ttl_s, 0.0)
    tokens["job.submit"] = authority.issue(USER, topo.hostname("frontend"), "job.submit", 86400.0, 0.0)
    tdir = secret_dir / TOKENS_DIR
    tdir.mkdir(parents=True, exist_ok=True)
    for name, tok in tokens.items():
        path = tdir / f"{name}.json"
        path.write_text(tok.to_wire())
        path.chmod(0o600)
    return tokens


def read_token(secret_dir: Path, name: str) -> Token:
    return Token.from_dict(json.loads((Path(secret_dir) / TOKENS_DIR / f"{name}.json").read_text()))


# -- client side ------------------------------------------------------------------


async def request_async(
    topo: TopologyConfig, authority: AuthorityState, service: str, mtype: str, payload: dict, timeout: float = 5.0, sender: str = "cli"
) -> Message:
    ep = topo.endpoints[service]
    ip = topo.resolution_table()[ep.hostname]
    reader, writer = await asyncio.wait_for(asyncio.open_connection(ip, ep.port), timeout)
    try:
        writer.write(encode(Message(mtype, sender, 0, payload), authority))
        await writer.drain()
        line = await asyncio.wait_for(reader.readline(), timeout)
        if not line:
            raise ConnectionError(f"{service} closed the connection")
        return decode(line, authority)
    finally:
        writer.close()


def request(topo: TopologyConfig, authority: AuthorityState, service: str, mtype: str, payload: dict, timeout: float = 5.0) -> Message:
    return asyncio.run(request_async(topo, authority, service, mtype, payload, timeout))


def ping(topo: TopologyConfig, authority: AuthorityState, service: str, timeout: float = 1.0) -> bool:
    try:
        reply = request(topo, authority, service, "PING", {}, timeout)
    except (OSError, asyncio.TimeoutError, ConnectionError, WireError):
        return False
    return reply.type == "PONG" and reply.payload.get("service") == service


def submit_workload(state: RunState, workload: WorkloadSpec, sleep: Callable[[float], None] = time.sleep) -> list[int]:
    """Send every job to the access point at its submit_time (relative to now)."""
    topo = state.topology()
    authority = state.authority()
    token = read_token(Path(state.secret_dir), "job.submit")
    start = state.sim_now()
    ids = []
    for item in workload.expand():
        wait = (start + item.submit_time - state.sim_now()) / state.time_scale
        if wait > 0:
            sleep(wait)
        body = {"job": JobSpec(item.requirements, item.declared_runtime_s, item.fail).to_dict(), "token": token.to_dict()}
        reply = request(topo, authority, "frontend", "JOB_SUBMIT", body)
        if not reply.payload.get("ok"):
            raise ProcsError(f"job rejected: {reply.payload.get('reason')}")
        ids.append(int(reply.payload["job_id"]))
    return ids


def query(state: RunState, service: str) -> dict:
    reply = request(state.topology(), state.authority(), service, "QUERY", {})
    return dict(reply.payload.get("snapshot", {}))


# -- lifecycle ----------------------------------------------------------------------


def up(topo: TopologyConfig, base_dir: str | Path = ".", seed: int = 0) -> RunState:
    """Provision credentials and launch every service, health-checked."""
    base = Path(base_dir).resolve()
    run_dir = base / RUN_DIR
    try:
        old = RunState.load(base)
        if any(_pid_alive(p) for p in old.pids.values()):
            raise ProcsError(f"a topology is already running under {base}; run down first")
    except NotRunning:
        pass
    check_ports(topo)
    secret_dir = resolve_secret_dir(topo, base)
    authority = init_authority(secret_dir)
    write_tokens(topo, authority, secret_dir)
    logs = base / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    for f in logs.glob("events-*.jsonl"):
        f.unlink()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / TOPOLOGY_FILE).write_text(json.dumps(topo.raw, indent=2, sort_keys=True))

    state = RunState(str(base), str(secret_dir), str(logs), time.time(), topo.time_scale)
    resolve = json.dumps(topo.resolution_table())
    procs: dict[str, subprocess.Popen] = {}
    try:
        for name in SERVICE_ORDER:
            out = open(logs / f"{name}.out", "ab")
            cmd = [
                sys.executable, "-m", "glidemini.harness.procs", "serve",
                "--service", name, "--run-dir", str(run_dir), "--secret-dir", str(secret_dir),
                "--logs", str(logs), "--epoch", repr(state.epoch), "--seed", str(seed), "--resolve", resolve,
            ]
            procs[name] = subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT, start_new_session=True, cwd=base)
            out.close()
            state.pids[name] = procs[name].pid
            state.save()
            # dependencies come first in SERVICE_ORDER, so wait for each before the next
            deadline = time.monotonic() + HEALTH_TIMEOUT_S
            while not ping(topo, authority, name):
                if procs[name].poll() is not None or time.monotonic() > deadline:
                    raise HealthCheckFailed(name)
                time.sleep(0.1)
    except BaseException:
        _terminate(state.pids)
        (run_dir / RUN_FILE).unlink(missing_ok=True)
        raise
    log.info("topology up: %s", state.pids)
    return state


def _terminate(pids: dict[str, int], grace_s: float = 5.0) -> None:
    for pid in pids.values():
        try:
            os.kill(pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
    deadline = time.monotonic() + grace_s
    for pid in pids.values():
        while time.monotonic() < deadline:
            try:
                done, _ = os.waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                done = pid if not _pid_alive(pid) else 0
            if done:
                break
            time.sleep(0.05)
        else:
            try:
                os.kill(pid, signal.SIGKILL)
                os.waitpid(pid, 0)
            except (ProcessLookupError, ChildProcessError):
                pass


def merge_event_logs(logs_dir: str | Path) -> EventLog:
    logs = Path(logs_dir)
    parts = []
    for f in sorted(logs.glob("events-*.jsonl")):
        with open(f, "rb") as fh:
            parts.append([EventEntry.from_line(line) for line in fh if line.strip()])
    merged = EventLog.merge(parts)
    merged.write(logs / "events.log")
    return merged


def down(base_dir: str | Path = ".") -> EventLog:
    """Stop every service, keep logs and secrets, and write the merged event log."""
    base = Path(base_dir).resolve()
    state = RunState.load(base)
    _terminate(state.pids)
    (base / RUN_DIR / RUN_FILE).unlink(missing_ok=True)
    return merge_event_logs(state.logs_dir)


# -- server side ---------------------------------------------------------------------


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {"ts": round(record.created, 6), "level": record.levelname, "logger": record.name, "msg": record.getMessage()},
            sort_keys=True,
        )


class _Peer:
    """Outgoing connection to one service; replies are fed back to the owner."""

    def __init__(self, proc: ServiceProcess, name: str) -> None:
        self.proc = proc
        self.name = name
        self.queue: asyncio.Queue[bytes] = asyncio.Queue()
        self.task = asyncio.get_running_loop().create_task(self._run())

    async def _run(self) -> None:
        topo = self.proc.topo
        ep = topo.endpoints[self.name]
        while True:
            line = await self.queue.get()
            try:
                reader, writer = await asyncio.open_connection(self.proc.resolve[ep.hostname], ep.port)
            except OSError as exc:
                log.warning("cannot reach %s: %s; dropping %d message(s)", self.name, exc, 1 + self.queue.qsize())
                while not self.queue.empty():
                    self.queue.get_nowait()
                continue
            reader_task = asyncio.get_running_loop().create_task(self.proc.read_loop(reader, writer))
            try:
                while True:
                    writer.write(line)
                    await writer.drain()
                    line = await self.queue.get()
            except (ConnectionError, OSError) as exc:
                log.warning("connection to %s lost: %s", self.name, exc)
            finally:
                reader_task.cancel()
                writer.close()


class _ProcContext:
    def __init__(self, proc: ServiceProcess) -> None:
        self.proc = proc
        self.service = proc.name
        self.rng = proc.rng
        self.audit = AuditLog(proc.name, listeners=[self._log_audit])
        self._floor = 0.0

    @property
    def now(self) -> float:
        # timers may fire a hair early; never report a time before their target
        real = round((time.time() - self.proc.epoch) * self.proc.time_scale, 6)
        self._floor = max(self._floor, real)
        return self._floor

    def send(self, dest: str, mtype: str, payload: dict) -> None:
        self.proc.send(self.proc.topo.service_for(dest), mtype, payload)

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any) -> None:
        target = tadd(self.now, delay)

        def fire() -> None:
            self._floor = max(self._floor, target)
            try:
                fn(*args)
            except Exception:
                log.exception("timer callback failed")

        self.proc.loop.call_later(max(0.0, delay) / self.proc.time_scale, fire)

    def event(self, kind: str, payload: Any) -> None:
        self.proc.record(self.proc.events.append(self.now, self.service, kind, payload))

    def _log_audit(self, record) -> None:
        self.proc.record(self.proc.events.append_audit(record))


class ServiceProcess:
    def __init__(self, run_dir: Path, name: str, secret_dir: str, logs_dir: str, epoch: float, seed: int, resolve: dict[str, str]) -> None:
        self.topo = validate_topology(json.loads((run_dir / TOPOLOGY_FILE).read_text()))
        self.name = name
        self.authority = init_authority(secret_dir)
        self.epoch = epoch
        self.time_scale = self.topo.time_scale
        self.rng = random.Random(seed)
        self.resolve = resolve
        self.events = EventLog()
        self.event_file = open(Path(logs_dir) / f"events-{name}.jsonl", "ab")
        self.seq = 0
        self.peers: dict[str, _Peer] = {}
        self.service = self._build(Path(secret_dir))

    def _build(self, secret_dir: Path) -> Service:
        if self.name == "ce":
            return CEService(self.topo, self.authority)
        if self.name == "factory":
            return FactoryService(self.topo, self.authority)
        if self.name == "frontend":
            fe = self.topo.frontend
            creds = {e.entry_id: read_token(secret_dir, f"compute.create.{e.entry_id}") for e in fe.entries}
            return FrontendService(self.topo, self.authority, creds, read_token(secret_dir, "mailbox.write"))
        raise ProcsError(f"unknown service {self.name!r}")

    def record(self, entry: EventEntry) -> None:
        self.event_file.write(entry.line() + b"\n")
        self.event_file.flush()

    def send(self, dest: str, mtype: str, payload: dict) -> None:
        self.seq += 1
        line = encode(Message(mtype, self.name, self.seq, payload), self.authority)
        peer = self.peers.get(dest)
        if peer is None:
            peer = self.peers[dest] = _Peer(self, dest)
        peer.queue.put_nowait(line)

    async def read_loop(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        while True:
            try:
                line = await reader.readline()
            except (ConnectionError, ValueError) as exc:
                log.warning("read failed: %s", exc)
                return
            if not line:
                return
            try:
                msg = decode(line, self.authority)
            except WireError as exc:
                log.warning("rejected message: %s", exc)
                continue
            try:
                reply = self.service.handle(self.ctx, msg.type, msg.sender, msg.payload)
            except Exception:
                log.exception("handler for %s failed", msg.type)
                continue
            if reply is not None:
                self.seq += 1
                writer.write(encode(Message(reply[0], self.name, self.seq, reply[1]), self.authority))
                try:
                    await writer.drain()
                except ConnectionError:
                    return

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            await self.read_loop(reader, writer)
        finally:
            writer.close()

    async def run(self) -> None:
        self.loop = asyncio.get_running_loop()
        self.ctx = _ProcContext(self)
        ep = self.topo.endpoints[self.name]
        server = await asyncio.start_server(self._on_connect, self.resolve[ep.hostname], ep.port)
        stop = asyncio.Event()
        for sig in (signal.SIGTERM, signal.SIGINT):
            self.loop.add_signal_handler(sig, stop.set)
        self.service.start(self.ctx)
        log.info("%s serving on %s:%d", self.name, self.resolve[ep.hostname], ep.port)
        async with server:
            await stop.wait()
        log.info("%s stopping", self.name)
        self.event_file.close()


def serve_main(argv: Optional[list[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="glidemini-serve")
    p.add_argument("command", choices=["serve"])
    p.add_argument("--service", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--secret-dir", required=True)
    p.add_argument("--logs", required=True)
    p.add_argument("--epoch", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolve", required=True)
    args = p.parse_args(argv)
    handler = logging.FileHandler(Path(args.logs) / f"{args.service}.log")
    handler.setFormatter(JsonLineFormatter())
    logging.basicConfig(level=logging.INFO, handlers=[handler])
    proc = ServiceProcess(Path(args.run_dir), args.service, args.secret_dir, args.logs, args.epoch, args.seed, json.loads(args.resolve))
    asyncio.run(proc.run())
    return 0


if __name__ == "__main__":
    sys.exit(serve_main())
