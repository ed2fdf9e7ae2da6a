"""Scenario files: a line/block text format declaring a topology, fabric
declarations, workloads, a timed event list and expected outcomes.

Grammar (see docs/formats.md for the full reference):

    scenario <name>
    [nodes]      <id> client|peer|router
    [links]      <id> <a> <b> latency=<ms> [loss=<p>] [mtu=<bytes>]
    [storages]   <id> <node> <scope> [history=<n>]
    [evals]      <id> <node> <scope> <handler>
    [subscriptions] <id> <node> <keyexpr>
    [schemas]    <id> <scope> <field>...
    [twins]      <id> device=<name> cloud=<node> device-node=<node>
    [fleet]      coordinator <node> [beat_ms=<ms>] | agent <key> <node> [app=n:v]
    [images]     <name> <version> <utf-8 payload...>
    [manifests]  <job> <selector> container|ecu <name> <version> [k=<n>] [window=<ms>]
    [sites]      <id> <node> vehicle|edge|cloud cpu=<n> [gpu=<n>] [npu=<n>]
    [tasks]      <workload> <task> [deps=a,b] [cpu|gpu|npu=<n>] [out=<bytes>]
                 [deadline=<ms>] [vehicle|edge|cloud=<duration-ms>]
    [timeline]   @<ms> <event> <args...>
    [expect]     <metric> <op> <value-or-metric>
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .infomodel import Field, FieldKind, Schema
from .keyspace import KeyExprError, parse_selector
from .netsim import NodeMode
from .sched import ResourceVector, SiteClass, TaskSpec

EVENT_KINDS = (
    "put", "get", "link_up", "link_down", "start_update_job",
    "inject_failure", "disconnect", "reconnect", "run_dag", "run_loop",
)
OPS = ("==", "!=", "<=", ">=", "<", ">")


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnresolvedReference(ScenarioError):
    def __init__(self, ref_id: str, message: str = ""):
        super().__init__(message or f"unresolved reference: {ref_id}")
        self.ref_id = ref_id


@dataclass(frozen=True)
class NodeDecl:
    name: str
    mode: NodeMode


@dataclass(frozen=True)
class LinkDecl:
    name: str
    a: str
    b: str
    latency_ms: int
    loss: float = 0.0
    mtu_bytes: int = 1500


@dataclass(frozen=True)
class StorageDecl:
    name: str
    node: str
    scope: str
    history: int = 1


@dataclass(frozen=True)
class EvalDecl:
    name: str
    node: str
    scope: str
    handler: str


@dataclass(frozen=True)
class SubDecl:
    name: str
    node: str
    expr: str


@dataclass(frozen=True)
class TwinDecl:
    name: str
    device: str
    cloud_node: str
    device_node: str


@dataclass(frozen=True)
class FleetDecl:
    coordinator_node: str
    beat_ms: int
    agents: Tuple[Tuple[str, str, Optional[str]], ...]  # (fleet key, node, app "n:v")


@dataclass(frozen=True)
class ImageDecl:
    name: str
    version: str
    data: bytes


@dataclass(frozen=True)
class ManifestDecl:
    job_id: str
    selector: str
    kind: str  # container | ecu
    name: str
    version: str
    k_beats: int = 3
    window_ms: int = 5000


@dataclass(frozen=True)
class SiteDecl:
    site_id: str
    node: str
    site_class: SiteClass
    capacity: ResourceVector


@dataclass(frozen=True)
class Event:
    time_ms: int
    kind: str
    args: Tuple[str, ...]
    line: int


@dataclass(frozen=True)
class Expectation:
    metric: str
    op: str
    value: str  # literal or another metric name
    line: int


@dataclass
class Scenario:
    name: str
    nodes: Dict[str, NodeDecl] = field(default_factory=dict)
    links: Dict[str, LinkDecl] = field(default_factory=dict)
    storages: Dict[str, StorageDecl] = field(default_factory=dict)
    evals: Dict[str, EvalDecl] = field(default_factory=dict)
    subscriptions: Dict[str, SubDecl] = field(default_factory=dict)
    schemas: Dict[str, Schema] = field(default_factory=dict)
    twins: Dict[str, TwinDecl] = field(default_factory=dict)
    fleet: Optional[FleetDecl] = None
    images: List[ImageDecl] = field(default_factory=list)
    manifests: Dict[str, ManifestDecl] = field(default_factory=dict)
    sites: Dict[str, SiteDecl] = field(default_factory=dict)
    workloads: Dict[str, List[TaskSpec]] = field(default_factory=dict)
    timeline: List[Event] = field(default_factory=list)
    expectations: List[Expectation] = field(default_factory=list)


_SECTIONS = (
    "nodes", "links", "storages", "evals", "subscriptions", "schemas",
    "twins", "fleet", "images", "manifests", "sites", "tasks",
    "timeline", "expect",
)

_MODES = {"client": NodeMode.CLIENT, "peer": NodeMode.PEER, "router": NodeMode.ROUTER}
_CLASSES = {"vehicle": SiteClass.VEHICLE, "edge": SiteClass.EDGE, "cloud": SiteClass.CLOUD}


def _kv(tokens: List[str], lineno: int) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(lineno, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k in out:
            raise ParseError(lineno, f"duplicate option {k!r}")
        out[k] = v
    return out


def _num(text: str, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(lineno, f"{what} must be an integer, got {text!r}")


def _parse_field(spec: str, lineno: int) -> Field:
    # name:kind[:lo..hi][:unit]   kind is int, real, text, or enum=A,B,C
    parts = spec.split(":")
    if len(parts) < 2:
        raise ParseError(lineno, f"field needs name:kind, got {spec!r}")
    name, kind_part, rest = parts[0], parts[1], parts[2:]
    lo = hi = None
    unit = ""
    values: Tuple[str, ...] = ()
    if kind_part.startswith("enum="):
        kind = FieldKind.ENUM
        values = tuple(kind_part[len("enum="):].split(","))
    elif kind_part in ("int", "real", "text"):
        kind = FieldKind[kind_part.upper()]
    else:
        raise ParseError(lineno, f"unknown field kind {kind_part!r}")
    for extra in rest:
        if ".." in extra:
            lo_s, hi_s = extra.split("..", 1)
            try:
                lo, hi = float(lo_s), float(hi_s)
            except ValueError:
                raise ParseError(lineno, f"bad range {extra!r}")
        else:
            unit = extra
    try:
        return Field(name, kind, unit=unit, values=values, lo=lo, hi=hi)
    except ValueError as exc:
        raise ParseError(lineno, str(exc))


def parse_scenario(text: str, origin: str = "<string>") -> Scenario:
    """Parse scenario text. Raises ParseError with the offending 1-based
    line number; reference resolution happens afterwards in validate()."""
    scenario: Optional[Scenario] = None
    section: Optional[str] = None
    fleet_coordinator: Optional[Tuple[str, int]] = None
    fleet_agents: List[Tuple[str, str, Optional[str]]] = []
    workloads: Dict[str, List[TaskSpec]] = {}
    last_time = -1

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if scenario is None:
            head = line.split()
            if len(head) != 2 or head[0] != "scenario":
                raise ParseError(lineno, "file must start with: scenario <name>")
            scenario = Scenario(name=head[1])
            scenario.workloads = workloads
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in _SECTIONS:
                raise ParseError(lineno, f"unknown section [{section}]")
            continue
        if section is None:
            raise ParseError(lineno, f"content before any section: {line!r}")
        toks = line.split()

        if section == "nodes":
            if len(toks) != 2 or toks[1] not in _MODES:
                raise ParseError(lineno, "expected: <id> client|peer|router")
            if toks[0] in scenario.nodes:
                raise ParseError(lineno, f"duplicate node {toks[0]!r}")
            scenario.nodes[toks[0]] = NodeDecl(toks[0], _MODES[toks[1]])

        elif section == "links":
            if len(toks) < 4:
                raise ParseError(lineno, "expected: <id> <a> <b> latency=<ms> ...")
            opts = _kv(toks[3:], lineno)
            if "latency" not in opts:
                raise ParseError(lineno, "link needs latency=<ms>")
            try:
                loss = float(opts.get("loss", "0"))
            except ValueError:
                raise ParseError(lineno, f"bad loss {opts['loss']!r}")
            if toks[0] in scenario.links:
                raise ParseError(lineno, f"duplicate link {toks[0]!r}")
            scenario.links[toks[0]] = LinkDecl(
                toks[0], toks[1], toks[2],
                latency_ms=_num(opts["latency"], lineno, "latency"),
                loss=loss,
                mtu_bytes=_num(opts.get("mtu", "1500"), lineno, "mtu"),
            )

        elif section == "storages":
            if len(toks) < 3:
                raise ParseError(lineno, "expected: <id> <node> <scope> [history=<n>]")
            opts = _kv(toks[3:], lineno)
            scenario.storages[toks[0]] = StorageDecl(
                toks[0], toks[1], _expr(toks[2], lineno),
                history=_num(opts.get("history", "1"), lineno, "history"),
            )

        elif section == "evals":
            if len(toks) != 4:
                raise ParseError(lineno, "expected: <id> <node> <scope> <handler>")
            scenario.evals[toks[0]] = EvalDecl(toks[0], toks[1], _expr(toks[2], lineno), toks[3])

        elif section == "subscriptions":
            if len(toks) != 3:
                raise ParseError(lineno, "expected: <id> <node> <keyexpr>")
            scenario.subscriptions[toks[0]] = SubDecl(toks[0], toks[1], _expr(toks[2], lineno))

        elif section == "schemas":
            if len(toks) < 3:
                raise ParseError(lineno, "expected: <id> <scope> <field>...")
            fields = tuple(_parse_field(spec, lineno) for spec in toks[2:])
            try:
                scenario.schemas[toks[0]] = Schema(_expr(toks[1], lineno), fields)
            except ValueError as exc:
                raise ParseError(lineno, str(exc))

        elif section == "twins":
            if len(toks) != 4:
                raise ParseError(lineno, "expected: <id> device=<name> cloud=<node> device-node=<node>")
            opts = _kv(toks[1:], lineno)
            missing = {"device", "cloud", "device-node"} - set(opts)
            if missing:
                raise ParseError(lineno, f"twin missing {sorted(missing)}")
            scenario.twins[toks[0]] = TwinDecl(toks[0], opts["device"], opts["cloud"], opts["device-node"])

        elif section == "fleet":
            if toks[0] == "coordinator":
                if len(toks) < 2:
                    raise ParseError(lineno, "expected: coordinator <node> [beat_ms=<ms>]")
                opts = _kv(toks[2:], lineno)
                fleet_coordinator = (toks[1], _num(opts.get("beat_ms", "1000"), lineno, "beat_ms"))
            elif toks[0] == "agent":
                if len(toks) < 3:
                    raise ParseError(lineno, "expected: agent <fleet-key> <node> [app=<name>:<version>]")
                opts = _kv(toks[3:], lineno)
                app = opts.get("app")
                if app is not None and ":" not in app:
                    raise ParseError(lineno, f"app must be <name>:<version>, got {app!r}")
                fleet_agents.append((_expr(toks[1], lineno), toks[2], app))
            else:
                raise ParseError(lineno, f"fleet line must start with coordinator|agent, got {toks[0]!r}")

        elif section == "images":
            if len(toks) < 3:
                raise ParseError(lineno, "expected: <name> <version> <payload>")
            payload = line.split(None, 2)[2]
            scenario.images.append(ImageDecl(toks[0], toks[1], payload.encode("utf-8")))

        elif section == "manifests":
            if len(toks) < 5:
                raise ParseError(lineno, "expected: <job> <selector> container|ecu <name> <version> ...")
            if toks[2] not in ("container", "ecu"):
                raise ParseError(lineno, f"manifest kind must be container|ecu, got {toks[2]!r}")
            opts = _kv(toks[5:], lineno)
            if toks[0] in scenario.manifests:
                raise ParseError(lineno, f"duplicate manifest {toks[0]!r}")
            scenario.manifests[toks[0]] = ManifestDecl(
                toks[0], _expr(toks[1], lineno), toks[2], toks[3], toks[4],
                k_beats=_num(opts.get("k", "3"), lineno, "k"),
                window_ms=_num(opts.get("window", "5000"), lineno, "window"),
            )

        elif section == "sites":
            if len(toks) < 4 or toks[2] not in _CLASSES:
                raise ParseError(lineno, "expected: <id> <node> vehicle|edge|cloud cpu=<n> ...")
            opts = _kv(toks[3:], lineno)
            cap = ResourceVector(
                cpu=_num(opts.get("cpu", "0"), lineno, "cpu"),
                gpu=_num(opts.get("gpu", "0"), lineno, "gpu"),
                npu=_num(opts.get("npu", "0"), lineno, "npu"),
            )
            scenario.sites[toks[0]] = SiteDecl(toks[0], toks[1], _CLASSES[toks[2]], cap)

        elif section == "tasks":
            if len(toks) < 3:
                raise ParseError(lineno, "expected: <workload> <task> <options>...")
            opts = _kv(toks[2:], lineno)
            durations = {}
            for cls_name, cls in _CLASSES.items():
                if cls_name in opts:
                    durations[cls] = _num(opts[cls_name], lineno, cls_name)
            if not durations:
                raise ParseError(lineno, "task needs at least one of vehicle=|edge=|cloud=")
            deps = tuple(d for d in opts.get("deps", "").split(",") if d)
            demand = ResourceVector(
                cpu=_num(opts.get("cpu", "1"), lineno, "cpu"),
                gpu=_num(opts.get("gpu", "0"), lineno, "gpu"),
                npu=_num(opts.get("npu", "0"), lineno, "npu"),
            )
            deadline = _num(opts["deadline"], lineno, "deadline") if "deadline" in opts else None
            spec = TaskSpec(
                toks[1], demand, durations, frozenset(deps),
                output_bytes=_num(opts.get("out", "0"), lineno, "out"),
                deadline_ms=deadline,
            )
            workloads.setdefault(toks[0], []).append(spec)

        elif section == "timeline":
            if not toks[0].startswith("@"):
                raise ParseError(lineno, f"timeline line must start with @<ms>, got {toks[0]!r}")
            t = _num(toks[0][1:], lineno, "event time")
            if t < last_time:
                raise ParseError(lineno, f"timeline not sorted: {t} after {last_time}")
            last_time = t
            if len(toks) < 2 or toks[1] not in EVENT_KINDS:
                raise ParseError(lineno, f"unknown event kind {toks[1] if len(toks) > 1 else ''!r}")
            scenario.timeline.append(Event(t, toks[1], tuple(toks[2:]), lineno))

        elif section == "expect":
            if len(toks) != 3 or toks[1] not in OPS:
                raise ParseError(lineno, "expected: <metric> <op> <value>")
            scenario.expectations.append(Expectation(toks[0], toks[1], toks[2], lineno))

    if scenario is None:
        raise ParseError(1, "empty scenario file")
    if fleet_coordinator is not None or fleet_agents:
        if fleet_coordinator is None:
            raise ParseError(1, "fleet agents declared without a coordinator")
        scenario.fleet = FleetDecl(fleet_coordinator[0], fleet_coordinator[1], tuple(fleet_agents))
    validate(scenario)
    return scenario


def _expr(text: str, lineno: int) -> str:
    try:
        parse_selector(text)
    except KeyExprError as exc:
        raise ParseError(lineno, f"bad key expression {text!r}: {exc}")
    return text


_EVENT_ARITY = {
    "put": 3, "get": 3, "link_up": 1, "link_down": 1, "start_update_job": 1,
    "inject_failure": 2, "disconnect": 1, "reconnect": 1, "run_dag": 2, "run_loop": 2,
}


def validate(scenario: Scenario) -> None:
    """Cross-check every reference; raises UnresolvedReference."""
    def need_node(name: str):
        if name not in scenario.nodes:
            raise UnresolvedReference(name, f"unknown node {name!r}")

    for link in scenario.links.values():
        need_node(link.a)
        need_node(link.b)
    for decl in list(scenario.storages.values()) + list(scenario.evals.values()):
        need_node(decl.node)
    for sub in scenario.subscriptions.values():
        need_node(sub.node)
    for twin in scenario.twins.values():
        need_node(twin.cloud_node)
        need_node(twin.device_node)
    if scenario.fleet:
        need_node(scenario.fleet.coordinator_node)
        for _, node, _ in scenario.fleet.agents:
            need_node(node)
    published = {(img.name, img.version) for img in scenario.images}
    for man in scenario.manifests.values():
        if man.kind == "container" and (man.name, man.version) not in published:
            raise UnresolvedReference(f"{man.name}:{man.version}",
                                      f"manifest {man.job_id!r} names an unpublished image")
    for site in scenario.sites.values():
        need_node(site.node)
    for workload, specs in scenario.workloads.items():
        ids = {t.task_id for t in specs}
        for t in specs:
            for dep in t.deps:
                if dep not in ids:
                    raise UnresolvedReference(dep, f"workload {workload!r}: unknown dep {dep!r}")

    for ev in scenario.timeline:
        if len(ev.args) < _EVENT_ARITY[ev.kind]:
            raise ParseError(ev.line, f"{ev.kind} needs at least {_EVENT_ARITY[ev.kind]} args")
        if ev.kind == "put":
            need_node(ev.args[0])
        elif ev.kind == "get":
            need_node(ev.args[1])
        elif ev.kind in ("link_up", "link_down"):
            if ev.args[0] not in scenario.links:
                raise UnresolvedReference(ev.args[0], f"unknown link {ev.args[0]!r}")
        elif ev.kind == "start_update_job":
            if ev.args[0] not in scenario.manifests:
                raise UnresolvedReference(ev.args[0], f"unknown job {ev.args[0]!r}")
        elif ev.kind == "inject_failure":
            if ev.args[0] not in scenario.manifests:
                raise UnresolvedReference(ev.args[0], f"unknown job {ev.args[0]!r}")
        elif ev.kind in ("disconnect", "reconnect"):
            if ev.args[0] not in scenario.twins:
                raise UnresolvedReference(ev.args[0], f"unknown twin {ev.args[0]!r}")
        elif ev.kind == "run_dag":
            if ev.args[1] not in scenario.workloads:
                raise UnresolvedReference(ev.args[1], f"unknown workload {ev.args[1]!r}")
            opts = dict(tok.split("=", 1) for tok in ev.args[2:] if "=" in tok)
            for site_id in opts.get("sites", "").split(","):
                if site_id and site_id not in scenario.sites:
                    raise UnresolvedReference(site_id, f"unknown site {site_id!r}")
        elif ev.kind == "run_loop":
            need_node(ev.args[1])
            opts = dict(tok.split("=", 1) for tok in ev.args[2:] if "=" in tok)
            for agent in opts.get("agents", "").split(","):
                if agent:
                    need_node(agent)
            disc = opts.get("disconnect")
            if disc:
                parts = disc.split(":")
                if len(parts) == 4:
                    need_node(parts[0])
                    if parts[3] not in scenario.links:
                        raise UnresolvedReference(parts[3], f"unknown link {parts[3]!r}")


def load_scenario(path: str) -> Scenario:
    """Read and parse a scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read(), origin=path)
