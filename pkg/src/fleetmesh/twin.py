"""Device twins and the lifecycle agent.

A twin is a pair of documents per device: `desired` (authored by the
cloud replica) and `reported` (authored by the device replica).  Each
field carries a hybrid-logical timestamp and the writer id; replicas
converge by last-writer-wins, with deltas riding the fabric under
`/twin/<device>/<side>/<field>`.  The lifecycle agent reconciles the
locally cached desired state against its running workload map, one
action per workload, and keeps doing so while disconnected.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from .codec import EncodingTag, Value, as_properties, properties_value
from .fabric import Fabric, SampleKind, Timestamp, Workspace
from .keyspace import parse_key_expr


class TwinError(ValueError):
    pass


class WrongSideWriter(TwinError):
    pass


class Unreachable(TwinError):
    pass


class TwinSide(Enum):
    DESIRED = "desired"
    REPORTED = "reported"


class ReplicaRole(Enum):
    CLOUD = "cloud"
    DEVICE = "device"


# the side each role is allowed to author
_AUTHORS = {ReplicaRole.CLOUD: TwinSide.DESIRED, ReplicaRole.DEVICE: TwinSide.REPORTED}


@dataclass(frozen=True)
class FieldRecord:
    value: Optional[Value]  # None is a tombstone
    ts: Timestamp
    writer: int

    @property
    def deleted(self) -> bool:
        return self.value is None


class TwinDoc:
    """One side of a twin: field name -> latest surviving record."""

    def __init__(self):
        self._fields: Dict[str, FieldRecord] = {}

    def write(self, name: str, rec: FieldRecord) -> bool:
        """Apply `rec` under last-writer-wins; True iff it stuck."""
        cur = self._fields.get(name)
        if cur is not None and (rec.ts, rec.writer) <= (cur.ts, cur.writer):
            return False
        self._fields[name] = rec
        return True

    def get(self, name: str) -> Optional[Value]:
        rec = self._fields.get(name)
        return None if rec is None or rec.deleted else rec.value

    def record(self, name: str) -> Optional[FieldRecord]:
        return self._fields.get(name)

    def live_fields(self) -> Dict[str, Value]:
        return {n: r.value for n, r in sorted(self._fields.items()) if not r.deleted}

    def digest(self) -> Dict[str, Tuple[Timestamp, int]]:
        return {n: (r.ts, r.writer) for n, r in self._fields.items()}

    def __eq__(self, other):
        if not isinstance(other, TwinDoc):
            return NotImplemented
        return self._fields == other._fields

    def __repr__(self):
        inner = ", ".join(f"{n}={'<del>' if r.deleted else r.value!r}" for n, r in sorted(self._fields.items()))
        return f"TwinDoc({inner})"


def twin_key(device: str, side: TwinSide, field_name: str) -> str:
    return f"/twin/{device}/{side.value}/{field_name}"


def _delta_value(rec: FieldRecord) -> Value:
    props = {
        "op": "del" if rec.deleted else "set",
        "tag": "" if rec.deleted else rec.value.tag.value,
        "v": "" if rec.deleted else rec.value.payload.hex(),
        "p": str(rec.ts.physical_ms),
        "l": str(rec.ts.logical),
        "n": str(rec.ts.node),
        "writer": str(rec.writer),
    }
    return properties_value(props)


def _parse_delta(value: Value) -> Optional[FieldRecord]:
    try:
        props = as_properties(value)
        ts = Timestamp(int(props["p"]), int(props["l"]), int(props["n"]))
        writer = int(props["writer"])
        if props["op"] == "del":
            return FieldRecord(None, ts, writer)
        return FieldRecord(Value(EncodingTag(props["tag"]), bytes.fromhex(props["v"])), ts, writer)
    except (KeyError, ValueError):
        return None


class TwinReplica:
    """One replica of a device twin, attached to a fabric node."""

    def __init__(self, fabric: Fabric, node: int, device: str, role: ReplicaRole):
        self.fabric = fabric
        self.node = node
        self.device = device
        self.role = role
        self.desired = TwinDoc()
        self.reported = TwinDoc()
        self.connected = True
        # deltas authored while disconnected, in write order
        self.pending: Deque[Tuple[TwinSide, str, FieldRecord]] = deque()
        self.ws: Workspace = fabric.open_workspace(node)
        self._sub = self.ws.subscribe(f"/twin/{device}/**", sink=self._on_sample)

    # ----------------------------------------------------------- documents

    def doc(self, side: TwinSide) -> TwinDoc:
        return self.desired if side is TwinSide.DESIRED else self.reported

    # -------------------------------------------------------------- writes

    def twin_write(self, side: TwinSide, field_name: str, value: Optional[Value]) -> Timestamp:
        if _AUTHORS[self.role] is not side:
            raise WrongSideWriter(f"{self.role.value} replica cannot author {side.value}")
        if isinstance(value, str):
            value = Value(EncodingTag.TEXT, value.encode("utf-8"))
        ts = self.fabric.stamp(self.node)
        rec = FieldRecord(value, ts, self.node)
        self.doc(side).write(field_name, rec)
        if self.connected:
            self._send_delta(side, field_name, rec)
        else:
            self.pending.append((side, field_name, rec))
        return ts

    def twin_delete(self, side: TwinSide, field_name: str) -> Timestamp:
        return self.twin_write(side, field_name, None)

    def _send_delta(self, side: TwinSide, field_name: str, rec: FieldRecord) -> None:
        self.ws.put(twin_key(self.device, side, field_name), _delta_value(rec))

    # ------------------------------------------------------------ receive

    def _on_sample(self, sample) -> None:
        if not self.connected:
            return
        if sample.kind is not SampleKind.PUT:
            return
        chunks = sample.key.chunks
        if len(chunks) != 4 or chunks[0] != "twin" or chunks[1] != self.device:
            return
        try:
            side = TwinSide(chunks[2])
        except ValueError:
            return
        rec = _parse_delta(sample.value)
        if rec is not None:
            self.doc(side).write(chunks[3], rec)

    # -------------------------------------------------------- connectivity

    def set_connectivity(self, connected: bool, peer: Optional["TwinReplica"] = None) -> Optional["SyncReport"]:
        """Flip app-level connectivity; on reconnect flush pending deltas
        in write order, then digest-sync with `peer` if one is given."""
        was = self.connected
        self.connected = connected
        if not connected or was:
            return None
        while self.pending:
            side, field_name, rec = self.pending.popleft()
            self._send_delta(side, field_name, rec)
        self.fabric.sim.settle()
        if peer is not None:
            return twin_sync(self, peer)
        return None


@dataclass
class SyncReport:
    transferred: List[Tuple[str, str, str]] = field(default_factory=list)  # (side, field, direction)

    @property
    def empty(self) -> bool:
        return not self.transferred


def _reachable(a: TwinReplica, b: TwinReplica) -> bool:
    if a.node == b.node:
        return True
    return bool(a.fabric.sim.routes(a.node).next_hops(a.node, b.node))


def twin_sync(a: TwinReplica, b: TwinReplica) -> SyncReport:
    """Digest exchange then delta transfer; afterwards both replicas hold
    identical desired and reported docs.  Deltas cross the fabric."""
    if not (a.connected and b.connected and _reachable(a, b) and _reachable(b, a)):
        raise Unreachable(f"replicas on nodes {a.node} and {b.node} cannot sync")
    report = SyncReport()
    for side in (TwinSide.DESIRED, TwinSide.REPORTED):
        da, db = a.doc(side).digest(), b.doc(side).digest()
        for name in sorted(set(da) | set(db)):
            sa, sb = da.get(name), db.get(name)
            if sa == sb:
                continue
            if sb is None or (sa is not None and sa > sb):
                src, direction = a, f"{a.node}->{b.node}"
            else:
                src, direction = b, f"{b.node}->{a.node}"
            rec = src.doc(side).record(name)
            src._send_delta(side, name, rec)
            report.transferred.append((side.value, name, direction))
    a.fabric.sim.settle()
    return report


# --------------------------------------------------------------- workloads

class RestartPolicy(Enum):
    ALWAYS = "ALWAYS"
    NEVER = "NEVER"


@dataclass(frozen=True)
class WorkloadSpec:
    workload_id: str
    image_name: str
    version: str
    restart_policy: RestartPolicy = RestartPolicy.ALWAYS
    cpu: int = 1
    gpu: int = 0
    npu: int = 0

    def to_value(self) -> Value:
        return properties_value({
            "name": self.image_name,
            "version": self.version,
            "restart": self.restart_policy.value,
            "cpu": str(self.cpu),
            "gpu": str(self.gpu),
            "npu": str(self.npu),
        })


def version_key(version: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in version.split("."))


def parse_workload(workload_id: str, value: Value) -> Optional[WorkloadSpec]:
    try:
        props = as_properties(value)
        version_key(props["version"])
        return WorkloadSpec(
            workload_id,
            props.get("name", workload_id),
            props["version"],
            RestartPolicy(props.get("restart", "ALWAYS")),
            int(props.get("cpu", "1")),
            int(props.get("gpu", "0")),
            int(props.get("npu", "0")),
        )
    except (KeyError, ValueError):
        return None


class ActionKind(Enum):
    START = "START"
    STOP = "STOP"
    RESTART = "RESTART"
    REPLACE = "REPLACE"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    workload: str
    version: Optional[str] = None


@dataclass
class RunningWorkload:
    version: str
    healthy: bool = True


class LcmAgent:
    """Reconciles the device replica's cached desired state against the
    running workload map, one action per workload per tick."""

    def __init__(self, replica: TwinReplica):
        if replica.role is not ReplicaRole.DEVICE:
            raise TwinError("agent runs on the device replica")
        self.replica = replica
        self.running: Dict[str, RunningWorkload] = {}
        self._managed: set = set()

    @property
    def connected(self) -> bool:
        return self.replica.connected

    def observe_external(self, workload_id: str, version: str) -> None:
        """Note a workload started outside the twin; never stopped by us."""
        self.running[workload_id] = RunningWorkload(version)

    def set_health(self, workload_id: str, healthy: bool) -> None:
        if workload_id in self.running:
            self.running[workload_id].healthy = healthy

    def desired_workloads(self) -> Dict[str, WorkloadSpec]:
        out = {}
        for name, value in self.replica.desired.live_fields().items():
            spec = parse_workload(name, value)
            if spec is not None:
                out[name] = spec
        return out

    def agent_tick(self, now: int = 0) -> List[Action]:
        desired = self.desired_workloads()
        actions: List[Action] = []
        for wid in sorted(desired):
            spec = desired[wid]
            run = self.running.get(wid)
            if run is None:
                actions.append(Action(ActionKind.START, wid, spec.version))
            elif version_key(run.version) != version_key(spec.version):
                actions.append(Action(ActionKind.REPLACE, wid, spec.version))
            elif not run.healthy and spec.restart_policy is RestartPolicy.ALWAYS:
                actions.append(Action(ActionKind.RESTART, wid, run.version))
        for wid in sorted(self.running):
            if wid not in desired and wid in self._managed:
                actions.append(Action(ActionKind.STOP, wid))
        self._apply(actions)
        return actions

    def _apply(self, actions: List[Action]) -> None:
        for act in actions:
            if act.kind is ActionKind.STOP:
                self.running.pop(act.workload, None)
                self._managed.discard(act.workload)
            else:
                self.running[act.workload] = RunningWorkload(act.version)
                self._managed.add(act.workload)

    def report_running(self) -> None:
        """Publish the running map into the reported doc, one field per
        workload id, clearing fields for stopped ones."""
        doc = self.replica.reported
        for wid in sorted(self.running):
            run = self.running[wid]
            cur = doc.get(wid)
            want = properties_value({"version": run.version, "healthy": "1" if run.healthy else "0"})
            if cur is None or cur != want:
                self.replica.twin_write(TwinSide.REPORTED, wid, want)
        for wid in sorted(doc.live_fields()):
            if wid not in self.running:
                self.replica.twin_delete(TwinSide.REPORTED, wid)
