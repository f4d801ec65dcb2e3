"""Topology and workload files.

A topology is one JSON document describing the three-host minimal
deployment (ce, factory, frontend) under a virtual domain.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from ..core import ResourceSpec

SERVICES = ("ce", "factory", "frontend")
MODES = ("sim", "procs")
DEFAULT_DOMAIN = "glideinwms.org"


class TopologyError(ValueError):
    """Parse or validation failure. ``errors`` holds (field path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]) -> None:
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    actual: ResourceSpec
    advertised: ResourceSpec


@dataclass(frozen=True)
class GlideinConfig:
    max_lifetime_s: float = 3600.0
    idle_timeout_s: float = 30.0
    poll_period_s: float = 2.0


@dataclass(frozen=True)
class CEConfig:
    nodes: tuple[NodeConfig, ...]
    cycle_period_s: float = 1.0
    startup_delay_s: float = 3.0
    validation_failure_prob: float = 0.0
    glidein: GlideinConfig = GlideinConfig()


@dataclass(frozen=True)
class EntryConfig:
    entry_id: str
    ce: str  # service name of the CE
    max_pressure: int
    max_submit_per_cycle: int
    trusted_clients: tuple[str, ...] = ()


@dataclass(frozen=True)
class FactoryConfig:
    entries: tuple[EntryConfig, ...]
    cycle_period_s: float = 2.0
    request_ttl_s: float = 60.0


@dataclass(frozen=True)
class FrontendEntryConfig:
    entry_id: str
    node_advertised: Optional[ResourceSpec] = None


@dataclass(frozen=True)
class FrontendServiceConfig:
    client_id: str
    entries: tuple[FrontendEntryConfig, ...]
    cycle_period_s: float = 2.0
    max_pressure_per_entry: int = 8
    total_max_glideins: int = 100
    total_curb_glideins: int = 50
    expansion_factor: str = "1"
    token_ttl_s: float = 3600.0
    negotiation_period_s: float = 2.0
    ad_lifetime_s: float = 10.0


@dataclass(frozen=True)
class ServiceEndpoint:
    name: str
    hostname: str
    port: int

    @property
    def address(self) -> str:
        return f"{self.hostname}:{self.port}"


@dataclass(frozen=True)
class TopologyConfig:
    domain: str
    endpoints: Mapping[str, ServiceEndpoint]
    ce: CEConfig
    factory: FactoryConfig
    frontend: FrontendServiceConfig
    secret_dir: str = "./secrets"
    mode: str = "sim"
    time_scale: float = 1.0
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def services(self) -> tuple[str, ...]:
        return tuple(sorted(self.endpoints))

    def hostname(self, service: str) -> str:
        return self.endpoints[service].hostname

    def service_for(self, address: str) -> str:
        """Map a service name, hostname or host:port onto a service name."""
        if address in self.endpoints:
            return address
        host = address.rsplit(":", 1)[0] if ":" in address else address
        for name, ep in self.endpoints.items():
            if ep.hostname == host or ep.address == address:
                return name
        raise KeyError(address)

    def resolution_table(self, ip: str = "127.0.0.1") -> dict[str, str]:
        return {ep.hostname: ip for ep in self.endpoints.values()}

    def with_changes(self, **changes: Any) -> TopologyConfig:
        """Return a re-validated copy with top-level or dotted service keys replaced.

        ``with_changes(**{"ce.validation_failure_prob": 1})`` edits one field.
        """
        raw = json.loads(json.dumps(self.raw))
        for key, value in changes.items():
            parts = key.split(".")
            cur = raw["services"] if parts[0] in SERVICES else raw
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = value
        return validate_topology(raw)


def _natural_key(s: str) -> tuple:
    return tuple(int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s))


class _Checker:
    def __init__(self) -> None:
        self.errors: list[tuple[str, str]] = []

    def err(self, path: str, msg: str) -> None:
        self.errors.append((path, msg))

    def number(self, d: Mapping, key: str, path: str, default: float, *, positive=True, lo=None, hi=None) -> float:
        v = d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.err(f"{path}.{key}", f"expected a number, got {v!r}")
            return default
        if positive and not v > 0:
            self.err(f"{path}.{key}", "must be positive")
        if lo is not None and v < lo or hi is not None and v > hi:
            self.err(f"{path}.{key}", f"must be within [{lo}, {hi}]")
        return float(v)

    def integer(self, d: Mapping, key: str, path: str, default: Optional[int] = None, minimum: int = 0) -> int:
        if key not in d and default is None:
            self.err(f"{path}.{key}", "required")
            return minimum
        v = d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.err(f"{path}.{key}", f"expected an integer, got {v!r}")
            return minimum
        if v < minimum:
            self.err(f"{path}.{key}", f"must be >= {minimum}")
        return v

    def resources(self, d: Any, path: str) -> Optional[ResourceSpec]:
        if not isinstance(d, Mapping):
            self.err(path, "expected an object with cores/memory_mb/disk_mb/gpus")
            return None
        try:
            return ResourceSpec.from_dict(d)
        except (TypeError, ValueError) as exc:
            self.err(path, str(exc))
            return None


def validate_topology(data: Any) -> TopologyConfig:
    """Validate a decoded topology document; raises TopologyError listing every problem."""
    c = _Checker()
    if not isinstance(data, Mapping):
        raise TopologyError([("$", "topology must be an object")])
    domain = data.get("domain", DEFAULT_DOMAIN)
    if not isinstance(domain, str) or not domain:
        c.err("domain", "must be a non-empty string")
        domain = DEFAULT_DOMAIN
    mode = data.get("mode", "sim")
    if mode not in MODES:
        c.err("mode", f"must be one of {list(MODES)}")
    secret_dir = data.get("secret_dir", "./secrets")
    if not isinstance(secret_dir, str):
        c.err("secret_dir", "must be a path string")
        secret_dir = "./secrets"
    time_scale = c.number(data, "time_scale", "$", 1.0)

    services = data.get("services")
    if not isinstance(services, Mapping):
        raise TopologyError(c.errors + [("services", "must be an object")])
    for name in SERVICES:
        if name not in services:
            c.err(f"services.{name}", "missing service")
    for name in services:
        if name not in SERVICES:
            c.err(f"services.{name}", f"unknown service (expected {list(SERVICES)})")

    endpoints: dict[str, ServiceEndpoint] = {}
    for name in SERVICES:
        svc = services.get(name)
        if svc is None:
            continue
        path = f"services.{name}"
        if not isinstance(svc, Mapping):
            c.err(path, "must be an object")
            continue
        host = svc.get("hostname")
        if not isinstance(host, str) or not host:
            c.err(f"{path}.hostname", "required")
            host = f"{name}.{domain}"
        elif not host.endswith("." + domain):
            c.err(f"{path}.hostname", f"{host!r} is outside the domain {domain!r}")
        port = svc.get("port")
        if isinstance(port, bool) or not isinstance(port, int) or not 0 < port < 65536:
            c.err(f"{path}.port", f"expected a TCP port, got {port!r}")
            port = 0
        endpoints[name] = ServiceEndpoint(name, host, port)

    seen_hosts: dict[str, str] = {}
    seen_ports: dict[int, str] = {}
    for name, ep in endpoints.items():
        if ep.hostname in seen_hosts:
            c.err(f"services.{name}.hostname", f"duplicate hostname {ep.hostname!r} (also used by {seen_hosts[ep.hostname]})")
        seen_hosts.setdefault(ep.hostname, name)
        if ep.port and ep.port in seen_ports:
            c.err(f"services.{name}.port", f"duplicate port {ep.port} (also used by {seen_ports[ep.port]})")
        seen_ports.setdefault(ep.port, name)

    ce = _parse_ce(c, services.get("ce") or {})
    factory = _parse_factory(c, services.get("factory") or {})
    frontend = _parse_frontend(c, services.get("frontend") or {}, factory)

    if c.errors:
        raise TopologyError(c.errors)
    return TopologyConfig(
        domain=domain,
        endpoints=endpoints,
        ce=ce,
        factory=factory,
        frontend=frontend,
        secret_dir=secret_dir,
        mode=mode,
        time_scale=time_scale,
        raw=json.loads(json.dumps(data)),
    )


def _parse_ce(c: _Checker, d: Mapping) -> CEConfig:
    path = "services.ce"
    nodes: list[NodeConfig] = []
    groups = d.get("nodes", [])
    if not isinstance(groups, list) or not groups:
        c.err(f"{path}.nodes", "must be a non-empty list")
        groups = []
    for i, g in enumerate(groups):
        gp = f"{path}.nodes[{i}]"
        if not isinstance(g, Mapping):
            c.err(gp, "must be an object")
            continue
        actual = c.resources(g.get("actual"), f"{gp}.actual")
        advertised = c.resources(g.get("advertised", g.get("actual")), f"{gp}.advertised")
        count = c.integer(g, "count", gp, default=1, minimum=1)
        if actual is None or advertised is None:
            continue
        if "node_id" in g:
            if count != 1:
                c.err(f"{gp}.count", "node_id requires count 1")
            nodes.append(NodeConfig(str(g["node_id"]), actual, advertised))
        else:
            for _ in range(count):
                nodes.append(NodeConfig(f"node-{len(nodes)}", actual, advertised))
    ids = [n.node_id for n in nodes]
    if len(set(ids)) != len(ids):
        c.err(f"{path}.nodes", "node ids must be unique")
    gd = d.get("glidein", {})
    if not isinstance(gd, Mapping):
        c.err(f"{path}.glidein", "must be an object")
        gd = {}
    glidein = GlideinConfig(
        max_lifetime_s=c.number(gd, "max_lifetime_s", f"{path}.glidein", 3600.0),
        idle_timeout_s=c.number(gd, "idle_timeout_s", f"{path}.glidein", 30.0),
        poll_period_s=c.number(gd, "poll_period_s", f"{path}.glidein", 2.0),
    )
    return CEConfig(
        nodes=tuple(sorted(nodes, key=lambda n: _natural_key(n.node_id))),
        cycle_period_s=c.number(d, "cycle_period_s", path, 1.0),
        startup_delay_s=c.number(d, "startup_delay_s", path, 3.0, positive=False, lo=0),
        validation_failure_prob=c.number(d, "validation_failure_prob", path, 0.0, positive=False, lo=0, hi=1),
        glidein=glidein,
    )


def _parse_factory(c: _Checker, d: Mapping) -> FactoryConfig:
    path = "services.factory"
    entries = []
    raw = d.get("entries", [])
    if not isinstance(raw, list) or not raw:
        c.err(f"{path}.entries", "must be a non-empty list")
        raw = []
    for i, e in enumerate(raw):
        ep = f"{path}.entries[{i}]"
        if not isinstance(e, Mapping) or not isinstance(e.get("entry_id"), str):
            c.err(ep, "must be an object with a string entry_id")
            continue
        ce = e.get("ce", "ce")
        if ce != "ce":
            c.err(f"{ep}.ce", "the minimal deployment has a single CE service named 'ce'")
        trusted = e.get("trusted_clients", [])
        if not isinstance(trusted, list) or not all(isinstance(t, str) for t in trusted):
            c.err(f"{ep}.trusted_clients", "must be a list of client ids")
            trusted = []
        entries.append(
            EntryConfig(
                entry_id=e["entry_id"],
                ce="ce",
                max_pressure=c.integer(e, "max_pressure", ep, minimum=1),
                max_submit_per_cycle=c.integer(e, "max_submit_per_cycle", ep, minimum=1),
                trusted_clients=tuple(trusted),
            )
        )
    ids = [e.entry_id for e in entries]
    if len(set(ids)) != len(ids):
        c.err(f"{path}.entries", "entry ids must be unique")
    return FactoryConfig(
        entries=tuple(entries),
        cycle_period_s=c.number(d, "cycle_period_s", path, 2.0),
        request_ttl_s=c.number(d, "request_ttl_s", path, 60.0),
    )


def _parse_frontend(c: _Checker, d: Mapping, factory: FactoryConfig) -> FrontendServiceConfig:
    path = "services.frontend"
    client_id = d.get("client_id", "frontend")
    if not isinstance(client_id, str) or not client_id:
        c.err(f"{path}.client_id", "must be a non-empty string")
        client_id = "frontend"
    raw = d.get("entries")
    if raw is None:
        raw = [{"entry_id": e.entry_id} for e in factory.entries]
    entries = []
    known = {e.entry_id for e in factory.entries}
    for i, e in enumerate(raw if isinstance(raw, list) else []):
        ep = f"{path}.entries[{i}]"
        if not isinstance(e, Mapping) or not isinstance(e.get("entry_id"), str):
            c.err(ep, "must be an object with a string entry_id")
            continue
        if e["entry_id"] not in known:
            c.err(f"{ep}.entry_id", f"unknown entry {e['entry_id']!r}")
        adv = c.resources(e["node_advertised"], f"{ep}.node_advertised") if "node_advertised" in e else None
        entries.append(FrontendEntryConfig(e["entry_id"], adv))
    pool = d.get("pool", {})
    if not isinstance(pool, Mapping):
        c.err(f"{path}.pool", "must be an object")
        pool = {}
    exp = d.get("expansion_factor", 1)
    if isinstance(exp, bool) or not isinstance(exp, (int, float, str)):
        c.err(f"{path}.expansion_factor", "must be a positive rational")
        exp = 1
    curb = c.integer(d, "total_curb_glideins", path, default=50)
    tmax = c.integer(d, "total_max_glideins", path, default=100)
    if curb > tmax:
        c.err(f"{path}.total_curb_glideins", "must be <= total_max_glideins")
    return FrontendServiceConfig(
        client_id=client_id,
        entries=tuple(entries),
        cycle_period_s=c.number(d, "cycle_period_s", path, 2.0),
        max_pressure_per_entry=c.integer(d, "max_pressure_per_entry", path, default=8),
        total_max_glideins=tmax,
        total_curb_glideins=curb,
        expansion_factor=str(exp),
        token_ttl_s=c.number(d, "token_ttl_s", path, 3600.0),
        negotiation_period_s=c.number(pool, "negotiation_period_s", f"{path}.pool", 2.0),
        ad_lifetime_s=c.number(pool, "ad_lifetime_s", f"{path}.pool", 10.0),
    )


def parse_topology(file: Union[str, Path]) -> TopologyConfig:
    path = Path(file)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise TopologyError([("$", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}")]) from None
    return validate_topology(data)


def minimal_topology_path() -> Path:
    return Path(str(resources.files("glidemini") / "data" / "minimal.json"))


def load_minimal() -> TopologyConfig:
    return parse_topology(minimal_topology_path())


# -- workloads ----------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadItem:
    submit_time: float
    count: int
    requirements: ResourceSpec
    declared_runtime_s: float
    fail: bool = False


@dataclass(frozen=True)
class WorkloadSpec:
    items: tuple[WorkloadItem, ...] = ()

    @property
    def total_jobs(self) -> int:
        return sum(i.count for i in self.items)

    def expand(self) -> list[WorkloadItem]:
        """One item per job, ordered by submit time (stable)."""
        out = []
        for it in sorted(self.items, key=lambda i: i.submit_time):
            out.extend(WorkloadItem(it.submit_time, 1, it.requirements, it.declared_runtime_s, it.fail) for _ in range(it.count))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "jobs": [
                {
                    "submit_time": i.submit_time,
                    "count": i.count,
                    "requirements": i.requirements.to_dict(),
                    "declared_runtime_s": i.declared_runtime_s,
                    "fail": i.fail,
                }
                for i in self.items
            ]
        }


def validate_workload(data: Any) -> WorkloadSpec:
    c = _Checker()
    rows = data.get("jobs") if isinstance(data, Mapping) else data
    if not isinstance(rows, list):
        raise TopologyError([("jobs", "must be a list")])
    items = []
    for i, r in enumerate(rows):
        p = f"jobs[{i}]"
        if not isinstance(r, Mapping):
            c.err(p, "must be an object")
            continue
        req = c.resources(r.get("requirements"), f"{p}.requirements")
        st = c.number(r, "submit_time", p, 0.0, positive=False, lo=0)
        cnt = c.integer(r, "count", p, default=1, minimum=1)
        rt = c.number(r, "declared_runtime_s", p, 1.0)
        if req is not None:
            items.append(WorkloadItem(st, cnt, req, rt, bool(r.get("fail", False))))
    if c.errors:
        raise TopologyError(c.errors)
    return WorkloadSpec(tuple(items))


def parse_workload(file: Union[str, Path]) -> WorkloadSpec:
    try:
        data = json.loads(Path(file).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TopologyError([("$", f"parse error at line {exc.lineno} column {exc.colno}: {exc.msg}")]) from None
    return validate_workload(data)


def smoke_workload() -> WorkloadSpec:
    """Ten 1-core, 1 GiB, 10 s jobs at t=0."""
    return WorkloadSpec((WorkloadItem(0.0, 10, ResourceSpec(1, 1024, 0, 0), 10.0),))
