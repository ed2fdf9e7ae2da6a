"""Scenario execution: build the simulated topology, replay the timeline,
collect a line trace and a metrics map, check expectations."""

import hashlib
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .codec import EncodingTag, Value, make_value, properties_value, text_value
from .fabric import Fabric, GetResult
from .infomodel import SchemaRegistry, bind_validation
from .keyspace import parse_key_expr
from .netsim import LinkStatus, Sim
from .ota import (
    Artifact,
    ImageRepo,
    Manifest,
    OtaCoordinator,
    TargetKind,
    UpdateJob,
    digest64,
    publish_manifest,
)
from .sched import (
    ComputeSite,
    TransferModel,
    run_interactive_loop,
    run_schedule,
    schedule_eft,
    submit_dag,
)
from .scenario import Event, Scenario, UnresolvedReference
from .twin import ReplicaRole, TwinError, TwinReplica, TwinSide, twin_sync

TRACE_HEADER = "# fleetmesh-trace v1"


class SinkUnavailable(Exception):
    pass


@dataclass
class RunReport:
    scenario: str
    seed: int
    trace_lines: List[str] = field(default_factory=list)
    metrics: Dict[str, object] = field(default_factory=dict)
    trace_hash: int = 0
    failures: List[str] = field(default_factory=list)
    trace_path: Optional[str] = None
    dag_runs: Dict[str, object] = field(default_factory=dict)
    sites_used: Dict[str, List] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _builtin_handler(name: str):
    if name == "greet":
        return lambda key, props: text_value(f"Hello {props.get('name', 'anonymous')}")
    if name == "echo":
        return lambda key, props: text_value(key.text)
    if name.startswith("const:"):
        fixed = name[len("const:"):]
        return lambda key, props: text_value(fixed)
    raise UnresolvedReference(name, f"unknown eval handler {name!r}")


def _payload_value(spec: str) -> Value:
    if spec.startswith("text:"):
        return text_value(spec[len("text:"):])
    if spec.startswith("props:"):
        pairs = {}
        body = spec[len("props:"):]
        for part in body.split(","):
            if part:
                k, _, v = part.partition("=")
                pairs[k] = v
        return properties_value(pairs)
    if spec.startswith("raw:"):
        return make_value(EncodingTag.RAW, bytes.fromhex(spec[len("raw:"):]))
    return text_value(spec)


class _Runner:
    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.report = RunReport(scenario.name, seed)
        self.sim = Sim(seed)
        self.fabric = Fabric(self.sim)
        self.node_ids: Dict[str, int] = {}
        self.node_names: Dict[int, str] = {}
        self.link_ids: Dict[str, int] = {}
        self.sub_counts: Dict[str, int] = {}
        self.twins: Dict[str, Tuple[TwinReplica, TwinReplica]] = {}
        self.sync_transfers: Dict[str, int] = {}
        self.coordinator: Optional[OtaCoordinator] = None
        self.manifests: Dict[str, Manifest] = {}
        self.jobs: Dict[str, UpdateJob] = {}
        self.gets: Dict[str, GetResult] = {}

    # ------------------------------------------------------------- build

    def build(self) -> None:
        sc = self.scenario
        for name in sc.nodes:
            nid = self.sim.add_node(sc.nodes[name].mode)
            self.node_ids[name] = nid
            self.node_names[nid] = name
        for name, link in sc.links.items():
            self.link_ids[name] = self.sim.add_link(
                self.node_ids[link.a], self.node_ids[link.b], link.latency_ms,
                loss_prob=link.loss, mtu_bytes=link.mtu_bytes,
            )
        self.sim.settle()

        for decl in sc.storages.values():
            ws = self.fabric.open_workspace(self.node_ids[decl.node])
            ws.register_storage(decl.scope, history_depth=decl.history)
        for decl in sc.evals.values():
            ws = self.fabric.open_workspace(self.node_ids[decl.node])
            ws.register_eval(decl.scope, _builtin_handler(decl.handler))
        for decl in sc.subscriptions.values():
            ws = self.fabric.open_workspace(self.node_ids[decl.node])
            self.sub_counts[decl.name] = 0

            def sink(sample, _name=decl.name):
                self.sub_counts[_name] += 1
            ws.subscribe(decl.expr, sink=sink)

        if sc.schemas:
            registry = SchemaRegistry()
            for schema in sc.schemas.values():
                registry.register(schema)
            bind_validation(self.fabric, registry)

        for name, decl in sc.twins.items():
            cloud = TwinReplica(self.fabric, self.node_ids[decl.cloud_node], decl.device, ReplicaRole.CLOUD)
            device = TwinReplica(self.fabric, self.node_ids[decl.device_node], decl.device, ReplicaRole.DEVICE)
            self.twins[name] = (cloud, device)
            self.sync_transfers[name] = 0

        if sc.fleet:
            repo = ImageRepo()
            self.coordinator = OtaCoordinator(
                self.fabric, self.node_ids[sc.fleet.coordinator_node], repo,
                beat_ms=sc.fleet.beat_ms,
            )
            published = {}
            for img in sc.images:
                published[(img.name, img.version)] = img.data
            for fleet_key, node, app in sc.fleet.agents:
                agent = self.coordinator.attach_agent(fleet_key, self.node_ids[node])
                if app:
                    app_name, _, app_version = app.partition(":")
                    agent.install(app_name, app_version, b"factory:" + app_name.encode())
            for man in sorted(sc.manifests.values(), key=lambda d: d.job_id):
                data = published.get((man.name, man.version))
                if data is None:
                    continue
                kind = TargetKind.CONTAINER_APP if man.kind == "container" else TargetKind.ECU_FIRMWARE
                manifest = Manifest(
                    man.job_id, parse_key_expr(man.selector), kind,
                    Artifact(man.name, man.version, digest64(data)),
                    k_beats=man.k_beats, window_ms=man.window_ms,
                )
                self.manifests[man.job_id] = manifest
                if not repo.has_image(man.name, man.version):
                    publish_manifest(repo, manifest, data)
        self.sim.settle()

    # ------------------------------------------------------------ timeline

    def run(self) -> RunReport:
        self.build()
        for ev in self.scenario.timeline:
            if ev.time_ms > self.sim.now:
                self.sim.step_until(ev.time_ms)
            self.sim.record(f"RUN {self.sim.now} {ev.kind} {' '.join(ev.args)}")
            getattr(self, "_ev_" + ev.kind)(ev)
        self.sim.settle()
        self._finish()
        return self.report

    def _ev_put(self, ev: Event) -> None:
        node = self.node_ids[ev.args[0]]
        key_text = ev.args[1]
        value = _payload_value(" ".join(ev.args[2:]))
        twin = self._twin_route(node, key_text)
        if twin is not None:
            replica, side, field_name = twin
            replica.twin_write(side, field_name, value)
        else:
            self.fabric.open_workspace(node).put(key_text, value)

    def _twin_route(self, node: int, key_text: str):
        parts = key_text.strip("/").split("/")
        if len(parts) < 4 or parts[0] != "twin":
            return None
        device, side_name = parts[1], parts[2]
        if side_name not in ("desired", "reported"):
            return None
        field_name = "/".join(parts[3:])
        for cloud, dev in self.twins.values():
            for replica in (cloud, dev):
                if replica.node == node and replica.device == device:
                    return replica, TwinSide(side_name), field_name
        return None

    def _ev_get(self, ev: Event) -> None:
        get_id, node_name, selector = ev.args[0], ev.args[1], ev.args[2]
        result = self.fabric.open_workspace(self.node_ids[node_name]).get(selector)
        self.gets[get_id] = result

    def _ev_link_up(self, ev: Event) -> None:
        self.sim.set_link_status(self.link_ids[ev.args[0]], LinkStatus.UP)

    def _ev_link_down(self, ev: Event) -> None:
        self.sim.set_link_status(self.link_ids[ev.args[0]], LinkStatus.DOWN)

    def _ev_start_update_job(self, ev: Event) -> None:
        manifest = self.manifests.get(ev.args[0])
        if manifest is None or self.coordinator is None:
            raise UnresolvedReference(ev.args[0], f"manifest {ev.args[0]!r} has no published image")
        job = self.coordinator.start_update_job(manifest)
        self.jobs[manifest.job_id] = job
        self.coordinator.run_job(job)

    def _ev_inject_failure(self, ev: Event) -> None:
        job = self.jobs.get(ev.args[0])
        if job is None:
            raise UnresolvedReference(ev.args[0], f"job {ev.args[0]!r} not started")
        if ev.args[1] not in job.lanes:
            raise UnresolvedReference(ev.args[1], f"job {ev.args[0]!r} has no lane {ev.args[1]!r}")
        reason = ev.args[2] if len(ev.args) > 2 else "injected"
        self.coordinator.inject_failure(job, ev.args[1], reason)

    def _ev_disconnect(self, ev: Event) -> None:
        cloud, device = self.twins[ev.args[0]]
        device.set_connectivity(False)

    def _ev_reconnect(self, ev: Event) -> None:
        cloud, device = self.twins[ev.args[0]]
        report = device.set_connectivity(True, peer=cloud)
        if report is not None:
            self.sync_transfers[ev.args[0]] += len(report.transferred)

    def _ev_run_dag(self, ev: Event) -> None:
        run_id, workload = ev.args[0], ev.args[1]
        opts = dict(tok.split("=", 1) for tok in ev.args[2:] if "=" in tok)
        site_ids = [s for s in opts.get("sites", "").split(",") if s]
        if not site_ids:
            site_ids = sorted(self.scenario.sites)
        sites = [
            ComputeSite(d.site_id, d.site_class, d.capacity, self.node_ids[d.node])
            for d in (self.scenario.sites[s] for s in site_ids)
        ]
        transfer = TransferModel(
            default_bandwidth=int(opts.get("bw", "1000000")),
            default_latency=int(opts.get("lat", "12")),
        )
        dag = submit_dag(self.scenario.workloads[workload], sites)
        plan = schedule_eft(dag, sites, transfer)
        trace = run_schedule(plan, dag, sites, self.sim, fabric=self.fabric)
        self.report.dag_runs[run_id] = trace
        self.report.sites_used[run_id] = sites
        m = self.report.metrics
        m[f"dag.{run_id}.planned"] = plan.makespan_ms
        m[f"dag.{run_id}.makespan"] = trace.makespan_ms
        m[f"dag.{run_id}.missed"] = len(trace.missed)
        m[f"dag.{run_id}.miss_ratio"] = round(trace.miss_ratio, 6)

    def _ev_run_loop(self, ev: Event) -> None:
        run_id, trainer = ev.args[0], ev.args[1]
        opts = dict(tok.split("=", 1) for tok in ev.args[2:] if "=" in tok)
        agents = [self.node_ids[a] for a in opts.get("agents", "").split(",") if a]
        epochs = int(opts.get("epochs", "1"))
        disconnects = {}
        disc = opts.get("disconnect")
        if disc:
            agent, frm, to, link = disc.split(":")
            disconnects[self.node_ids[agent]] = (int(frm), int(to), self.link_ids[link])
        trace = run_interactive_loop(
            self.fabric, self.node_ids[trainer], agents, epochs,
            disconnects=disconnects, round_ms=int(opts.get("round", "20")),
        )
        m = self.report.metrics
        finals = [trace.final[n] for n in agents]
        m[f"loop.{run_id}.final_min"] = min(finals) if finals else 0
        m[f"loop.{run_id}.final_max"] = max(finals) if finals else 0
        monotonic = all(trace.seen[n] == sorted(trace.seen[n]) for n in agents)
        m[f"loop.{run_id}.monotonic"] = int(monotonic)

    # ------------------------------------------------------------- finish

    def _finish(self) -> None:
        m = self.report.metrics
        m["net.deliveries"] = len(self.sim.delivered)
        for name, count in sorted(self.sub_counts.items()):
            m[f"sub.{name}.count"] = count
        for get_id, result in sorted(self.gets.items()):
            m[f"get.{get_id}.replies"] = len(result)
            m[f"get.{get_id}.truncated"] = int(result.truncated)
        for job_id, job in sorted(self.jobs.items()):
            for lane_key, state in sorted(job.outcome().items()):
                m[f"ota.{job_id}.{lane_key}"] = state
            m[f"ota.{job_id}.done"] = int(job.done)
        for name, (cloud, device) in sorted(self.twins.items()):
            if cloud.connected and device.connected:
                try:
                    report = twin_sync(cloud, device)
                    self.sync_transfers[name] += len(report.transferred)
                except TwinError:
                    pass  # partitioned at end of run: report unsynced as-is
            synced = (cloud.doc(TwinSide.DESIRED) == device.doc(TwinSide.DESIRED)
                      and cloud.doc(TwinSide.REPORTED) == device.doc(TwinSide.REPORTED))
            m[f"twin.{name}.synced"] = int(synced)
            m[f"twin.{name}.sync_transfers"] = self.sync_transfers[name]
            m[f"twin.{name}.desired_fields"] = len(device.doc(TwinSide.DESIRED).live_fields())
            m[f"twin.{name}.reported_fields"] = len(cloud.doc(TwinSide.REPORTED).live_fields())

        self.report.trace_lines = [
            f"{TRACE_HEADER} scenario={self.scenario.name} seed={self.report.seed}"
        ] + list(self.sim.trace_lines)
        body = "\n".join(self.report.trace_lines).encode("utf-8")
        self.report.trace_hash = int.from_bytes(
            hashlib.blake2b(body, digest_size=8).digest(), "big")
        m["trace.hash"] = f"{self.report.trace_hash:016x}"
        self._check_expectations()

    def _check_expectations(self) -> None:
        m = self.report.metrics
        for exp in self.scenario.expectations:
            if exp.metric not in m:
                raise UnresolvedReference(exp.metric, f"expect line {exp.line}: unknown metric {exp.metric!r}")
            left = m[exp.metric]
            right: object = exp.value
            if exp.value in m:
                right = m[exp.value]
            else:
                try:
                    right = int(exp.value)
                except ValueError:
                    try:
                        right = float(exp.value)
                    except ValueError:
                        right = exp.value
            if isinstance(left, (int, float)) and isinstance(right, str):
                ok = False
            elif isinstance(left, str) or isinstance(right, str):
                ok = {"==": left == right, "!=": left != right}.get(exp.op, False)
            else:
                ok = {
                    "==": left == right, "!=": left != right,
                    "<": left < right, "<=": left <= right,
                    ">": left > right, ">=": left >= right,
                }[exp.op]
            if not ok:
                self.report.failures.append(
                    f"{exp.metric} {exp.op} {exp.value} (actual {left!r}, expected against {right!r})")


def run_scenario(scenario: Scenario, seed: int) -> RunReport:
    """Execute a parsed scenario; the report carries trace lines, metrics,
    the 64-bit trace hash and any failed expectations."""
    return _Runner(scenario, seed).run()


def metrics_block(report: RunReport) -> str:
    lines = ["[metrics]"]
    for name in sorted(report.metrics):
        lines.append(f"{name}={report.metrics[name]}")
    return "\n".join(lines) + "\n"


def emit_trace(report: RunReport, sink: str) -> None:
    """Write the line trace plus the final metrics block to `sink`."""
    text = "\n".join(report.trace_lines) + "\n\n" + metrics_block(report)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(sink)), exist_ok=True)
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise SinkUnavailable(f"cannot write trace to {sink}: {exc}")
    report.trace_path = sink
