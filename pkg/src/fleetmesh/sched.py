"""Heterogeneous DAG scheduling across vehicle, edge, and cloud compute
sites, with transfer costs, an optimal brute-force reference for small
DAGs, realized execution over the simulated network, and the interactive
train/simulate/serve version loop.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from math import ceil
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Set, Tuple

from .fabric import Fabric
from .netsim import Delivery, LinkStatus, Sim

SCHED_CHANNEL = 3
MAX_BRUTE_FORCE_TASKS = 6


class SchedError(ValueError):
    pass


class CycleDetected(SchedError):
    pass


class UnsatisfiableDemand(SchedError):
    pass


class TooLarge(SchedError):
    pass


@dataclass(frozen=True)
class ResourceVector:
    cpu: int = 0
    gpu: int = 0
    npu: int = 0

    def __post_init__(self):
        if min(self.cpu, self.gpu, self.npu) < 0:
            raise SchedError("resource amounts must be >= 0")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu + other.cpu, self.gpu + other.gpu, self.npu + other.npu)

    def fits_in(self, cap: "ResourceVector") -> bool:
        return self.cpu <= cap.cpu and self.gpu <= cap.gpu and self.npu <= cap.npu


class SiteClass(Enum):
    VEHICLE = "VEHICLE"
    EDGE = "EDGE"
    CLOUD = "CLOUD"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    demand: ResourceVector
    duration_ms: Mapping[SiteClass, int]
    deps: FrozenSet[str] = frozenset()
    output_bytes: int = 0
    deadline_ms: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "duration_ms", dict(self.duration_ms))
        object.__setattr__(self, "deps", frozenset(self.deps))


@dataclass(frozen=True)
class ComputeSite:
    site_id: str
    site_class: SiteClass
    capacity: ResourceVector
    node: int  # attached network node


@dataclass
class TransferModel:
    """Cost in ms to move `nbytes` between sites: 0 when co-located,
    else ceil(nbytes / bandwidth) + latency."""

    bandwidth: Dict[Tuple[str, str], int] = field(default_factory=dict)  # bytes per ms
    latency: Dict[Tuple[str, str], int] = field(default_factory=dict)
    default_bandwidth: int = 1_000_000
    default_latency: int = 10

    def cost(self, nbytes: int, src: str, dst: str) -> int:
        if src == dst:
            return 0
        bw = self.bandwidth.get((src, dst), self.default_bandwidth)
        lat = self.latency.get((src, dst), self.default_latency)
        return ceil(nbytes / bw) + lat


class Dag:
    def __init__(self, tasks: Dict[str, TaskSpec], topo: Tuple[str, ...]):
        self.tasks = tasks
        self.topo = topo
        self.children: Dict[str, Tuple[str, ...]] = {}
        kids: Dict[str, List[str]] = {t: [] for t in tasks}
        for t in tasks.values():
            for d in t.deps:
                kids[d].append(t.task_id)
        self.children = {k: tuple(sorted(v)) for k, v in kids.items()}

    def __len__(self):
        return len(self.tasks)


def eligible_sites(task: TaskSpec, sites: Sequence[ComputeSite]) -> List[ComputeSite]:
    return [
        s for s in sorted(sites, key=lambda s: s.site_id)
        if task.demand.fits_in(s.capacity) and s.site_class in task.duration_ms
    ]


def submit_dag(tasks: Sequence[TaskSpec], sites: Optional[Sequence[ComputeSite]] = None) -> Dag:
    by_id = {}
    for t in tasks:
        if t.task_id in by_id:
            raise SchedError(f"duplicate task id {t.task_id}")
        by_id[t.task_id] = t
    for t in tasks:
        for d in t.deps:
            if d not in by_id:
                raise SchedError(f"{t.task_id} depends on unknown task {d}")
    # deterministic Kahn order, smallest ready id first
    indeg = {t.task_id: len(t.deps) for t in tasks}
    kids: Dict[str, List[str]] = {t.task_id: [] for t in tasks}
    for t in tasks:
        for d in t.deps:
            kids[d].append(t.task_id)
    ready = [tid for tid, deg in sorted(indeg.items()) if deg == 0]
    topo: List[str] = []
    heap = list(ready)
    heapq.heapify(heap)
    while heap:
        tid = heapq.heappop(heap)
        topo.append(tid)
        for c in sorted(kids[tid]):
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(topo) != len(by_id):
        raise CycleDetected("dependency cycle")
    if sites is not None:
        for t in tasks:
            if not eligible_sites(t, sites):
                raise UnsatisfiableDemand(f"no site can host {t.task_id}")
    return Dag(by_id, tuple(topo))


# ------------------------------------------------------------- scheduling

@dataclass(frozen=True)
class Placement:
    site_id: str
    start_ms: int
    end_ms: int


@dataclass
class Schedule:
    placements: Dict[str, Placement]
    makespan_ms: int
    deadline_miss_ratio: float


def _earliest_slot(
    allocs: List[Tuple[int, int, ResourceVector]],
    cap: ResourceVector,
    demand: ResourceVector,
    ready: int,
    dur: int,
) -> int:
    """Earliest start >= ready where demand fits beside existing
    (start, end, demand) allocations for the whole duration."""

    def fits_at(t0: int) -> bool:
        window = [a for a in allocs if a[0] < t0 + dur and a[1] > t0]
        points = {t0}
        for s, _, _ in window:
            if t0 <= s < t0 + dur:
                points.add(s)
        for p in sorted(points):
            use = demand
            for s, e, d in window:
                if s <= p < e:
                    use = use + d
            if not use.fits_in(cap):
                return False
        return True

    candidates = sorted({ready} | {e for _, e, _ in allocs if e > ready})
    for t0 in candidates:
        if fits_at(t0):
            return t0
    return max([ready] + [e for _, e, _ in allocs])  # after everything


def _realize(
    order: Sequence[str],
    site_of: Mapping[str, str],
    dag: Dag,
    sites: Mapping[str, ComputeSite],
    transfer: TransferModel,
) -> Optional[Dict[str, Placement]]:
    """Greedy earliest placement of tasks in `order` on fixed sites."""
    allocs: Dict[str, List[Tuple[int, int, ResourceVector]]] = {s: [] for s in sites}
    out: Dict[str, Placement] = {}
    for tid in order:
        task = dag.tasks[tid]
        site = sites[site_of[tid]]
        dur = task.duration_ms.get(site.site_class)
        if dur is None or not task.demand.fits_in(site.capacity):
            return None
        ready = 0
        for dep in task.deps:
            p = out[dep]
            ready = max(ready, p.end_ms + transfer.cost(dag.tasks[dep].output_bytes, p.site_id, site.site_id))
        start = _earliest_slot(allocs[site.site_id], site.capacity, task.demand, ready, dur)
        out[tid] = Placement(site.site_id, start, start + dur)
        allocs[site.site_id].append((start, start + dur, task.demand))
    return out


def _finish(placements: Dict[str, Placement], dag: Dag) -> Schedule:
    makespan = max((p.end_ms for p in placements.values()), default=0)
    missed = sum(
        1 for tid, p in placements.items()
        if dag.tasks[tid].deadline_ms is not None and p.end_ms > dag.tasks[tid].deadline_ms
    )
    ratio = missed / len(placements) if placements else 0.0
    return Schedule(placements, makespan, ratio)


def schedule_eft(dag: Dag, sites: Sequence[ComputeSite], transfer: TransferModel) -> Schedule:
    """List scheduling: tasks in topological order, each placed on the
    (site, slot) with the earliest finish, ties broken by (site, task)."""
    by_id = {s.site_id: s for s in sites}
    allocs: Dict[str, List[Tuple[int, int, ResourceVector]]] = {s: [] for s in by_id}
    out: Dict[str, Placement] = {}
    for tid in dag.topo:
        task = dag.tasks[tid]
        options = eligible_sites(task, sites)
        if not options:
            raise UnsatisfiableDemand(f"no site can host {tid}")
        best: Optional[Tuple[int, str]] = None
        best_start = 0
        for site in options:
            dur = task.duration_ms[site.site_class]
            ready = 0
            for dep in task.deps:
                p = out[dep]
                ready = max(ready, p.end_ms + transfer.cost(dag.tasks[dep].output_bytes, p.site_id, site.site_id))
            start = _earliest_slot(allocs[site.site_id], site.capacity, task.demand, ready, dur)
            key = (start + dur, site.site_id)
            if best is None or key < best:
                best = key
                best_start = start
        finish, site_id = best
        out[tid] = Placement(site_id, best_start, finish)
        allocs[site_id].append((best_start, finish, task.demand))
    return _finish(out, dag)


def _linear_extensions(dag: Dag):
    indeg = {tid: len(t.deps) for tid, t in dag.tasks.items()}
    kids = dag.children
    order: List[str] = []

    def rec():
        ready = sorted(tid for tid, deg in indeg.items() if deg == 0 and tid not in order)
        if not ready:
            if len(order) == len(indeg):
                yield tuple(order)
            return
        for tid in ready:
            order.append(tid)
            for c in kids[tid]:
                indeg[c] -= 1
            yield from rec()
            for c in kids[tid]:
                indeg[c] += 1
            order.pop()

    yield from rec()


def brute_force_schedule(dag: Dag, sites: Sequence[ComputeSite], transfer: TransferModel) -> Schedule:
    """Exhaustive minimum-makespan search over site placements and
    topological orderings; only for DAGs of at most 6 tasks."""
    if len(dag) > MAX_BRUTE_FORCE_TASKS:
        raise TooLarge(f"{len(dag)} tasks")
    by_id = {s.site_id: s for s in sites}
    task_ids = sorted(dag.tasks)
    options = []
    for tid in task_ids:
        sl = eligible_sites(dag.tasks[tid], sites)
        if not sl:
            raise UnsatisfiableDemand(f"no site can host {tid}")
        options.append([s.site_id for s in sl])
    orders = list(_linear_extensions(dag))
    best: Optional[Dict[str, Placement]] = None
    best_span = None
    for combo in product(*options):
        site_of = dict(zip(task_ids, combo))
        for order in orders:
            placed = _realize(order, site_of, dag, by_id, transfer)
            if placed is None:
                continue
            span = max((p.end_ms for p in placed.values()), default=0)
            if best_span is None or span < best_span:
                best_span = span
                best = placed
    return _finish(best, dag)


# --------------------------------------------------------------- execution

@dataclass
class ExecutionTrace:
    realized: Dict[str, Optional[Placement]]
    completed: Set[str]
    missed: Set[str]
    makespan_ms: int
    miss_ratio: float


def run_schedule(
    schedule: Schedule,
    dag: Dag,
    sites: Sequence[ComputeSite],
    sim: Sim,
    *,
    report_node: Optional[int] = None,
    fabric: Optional[Fabric] = None,
) -> ExecutionTrace:
    """Execute a planned schedule over the live network.

    Tasks hold their scheduled start (never begin early); dependencies
    crossing sites travel as reliable payloads of the parent's output
    size.  A task counts completed only once its completion report
    reaches the report node, so partitioned sites lose their tasks.
    Pass `fabric` when the site nodes also speak fabric protocols, so
    message dispatch is shared instead of replaced.
    """
    by_id = {s.site_id: s for s in sites}
    if report_node is None:
        report_node = min(s.node for s in sites)
    start_time = sim.now
    pending_deps: Dict[str, Set[str]] = {tid: set(t.deps) for tid, t in dag.tasks.items()}
    started: Set[str] = set()
    armed: Set[str] = set()
    finished: Dict[str, int] = {}
    completed: Set[str] = set()
    realized: Dict[str, Optional[Placement]] = {tid: None for tid in dag.tasks}
    usage = {s.site_id: ResourceVector() for s in sites}
    transfer_msgs: Dict[int, Tuple[str, str]] = {}  # msg_id -> (parent, child)
    report_msgs: Dict[int, str] = {}

    def pump() -> None:
        """Start every runnable task; called on arrivals and finishes."""
        runnable = [t for t in dag.tasks if t not in started and not pending_deps[t]]
        for tid in sorted(runnable, key=lambda t: (schedule.placements[t].start_ms, t)):
            place = schedule.placements[tid]
            site = by_id[place.site_id]
            task = dag.tasks[tid]
            sched_start = start_time + place.start_ms
            if sim.now < sched_start:
                if tid not in armed:
                    armed.add(tid)
                    sim.call_at(sched_start, pump)
                continue
            if not (usage[site.site_id] + task.demand).fits_in(site.capacity):
                continue
            _begin(tid, site, task)

    def _begin(tid: str, site: ComputeSite, task: TaskSpec) -> None:
        started.add(tid)
        usage[site.site_id] = usage[site.site_id] + task.demand
        begun = sim.now
        dur = task.duration_ms[site.site_class]

        def finish():
            finished[tid] = sim.now
            realized[tid] = Placement(site.site_id, begun - start_time, sim.now - start_time)
            u = usage[site.site_id]
            usage[site.site_id] = ResourceVector(
                u.cpu - task.demand.cpu, u.gpu - task.demand.gpu, u.npu - task.demand.npu)
            if site.node == report_node:
                completed.add(tid)
            else:
                mid = sim.send_reliable(site.node, report_node, SCHED_CHANNEL,
                                        json.dumps({"t": "done", "task": tid}).encode())
                report_msgs[mid] = tid
            for child in dag.children[tid]:
                child_site = by_id[schedule.placements[child].site_id]
                if child_site.site_id == site.site_id:
                    pending_deps[child].discard(tid)
                else:
                    payload = b"\x00" * max(1, task.output_bytes)
                    mid = sim.send_reliable(site.node, child_site.node, SCHED_CHANNEL, payload)
                    transfer_msgs[mid] = (tid, child)
            pump()

        sim.call_at(sim.now + dur, finish)

    def on_delivery(d: Delivery) -> None:
        if d.channel != SCHED_CHANNEL:
            return
        if d.msg_id in transfer_msgs:
            parent, child = transfer_msgs.pop(d.msg_id)
            pending_deps[child].discard(parent)
            pump()
        elif d.msg_id in report_msgs and d.dst == report_node:
            completed.add(report_msgs.pop(d.msg_id))

    for s in sites:
        if fabric is not None:
            fabric.set_channel_handler(s.node, SCHED_CHANNEL, on_delivery)
        else:
            sim.set_handler(s.node, on_delivery)

    pump()
    sim.settle()

    missed = set()
    for tid, task in dag.tasks.items():
        if tid not in completed:
            missed.add(tid)
        elif task.deadline_ms is not None and realized[tid].end_ms > task.deadline_ms:
            missed.add(tid)
    makespan = max((finished[t] - start_time for t in finished), default=0)
    ratio = len(missed) / len(dag.tasks) if len(dag.tasks) else 0.0
    return ExecutionTrace(realized, completed, missed, makespan, ratio)


# ---------------------------------------------------------- version loop

@dataclass
class LoopTrace:
    seen: Dict[int, List[int]]  # agent node -> version sequence as observed
    final: Dict[int, int]
    epochs: int


def run_interactive_loop(
    fabric: Fabric,
    trainer_node: int,
    agent_nodes: Sequence[int],
    n_epochs: int,
    *,
    disconnects: Optional[Dict[int, Tuple[int, int, int]]] = None,
    round_ms: int = 20,
) -> LoopTrace:
    """Train/simulate/serve skeleton: agents send observations, the
    trainer bumps the policy version once per round it hears a current
    observation, every agent follows versions monotonically.

    disconnects maps agent node -> (from_epoch, to_epoch, link_id): the
    link drops when the policy reaches from_epoch and heals at to_epoch;
    the healed agent jumps to the latest version via a direct fetch.
    """
    if n_epochs < 0:
        raise SchedError("n_epochs must be >= 0")
    sim = fabric.sim
    disconnects = dict(disconnects or {})
    trainer = fabric.open_workspace(trainer_node)
    trainer.register_storage("/loop/policy")
    version = 0
    seen: Dict[int, List[int]] = {n: [0] for n in agent_nodes}
    current: Dict[int, int] = {n: 0 for n in agent_nodes}
    obs_tags: List[int] = []

    agent_ws = {}
    for n in agent_nodes:
        ws = fabric.open_workspace(n)
        agent_ws[n] = ws

        def on_policy(sample, node=n):
            v = int(sample.value.payload.decode())
            if v > current[node]:
                current[node] = v
                seen[node].append(v)

        ws.subscribe("/loop/policy", sink=on_policy)

    def on_obs(sample):
        obs_tags.append(int(sample.value.payload.decode()))

    trainer.subscribe("/loop/obs/*", sink=on_obs)
    sim.settle()

    down: Set[int] = set()
    while version < n_epochs:
        for node, (f_ep, t_ep, link) in sorted(disconnects.items()):
            if version >= f_ep and node not in down and version < t_ep:
                sim.set_link_status(link, LinkStatus.DOWN)
                down.add(node)
            elif version >= t_ep and node in down:
                sim.set_link_status(link, LinkStatus.UP)
                down.discard(node)
                sim.settle()
                result = agent_ws[node].get("/loop/policy")
                for r in result.replies:
                    v = int(r.value.payload.decode())
                    if v > current[node]:
                        current[node] = v
                        seen[node].append(v)
        obs_tags.clear()
        for node in sorted(agent_nodes):
            if node not in down and current[node] == version:
                agent_ws[node].put(f"/loop/obs/{node}", str(version))
        sim.settle()
        if version in obs_tags or all(n in down for n in agent_nodes):
            version += 1
            trainer.put("/loop/policy", str(version))
            sim.settle()
        else:
            sim.step_until(sim.now + round_ms)
    # heal anything still down, then let every agent catch up
    for node, (f_ep, t_ep, link) in sorted(disconnects.items()):
        if node in down:
            sim.set_link_status(link, LinkStatus.UP)
            down.discard(node)
    sim.settle()
    for node in sorted(agent_nodes):
        result = agent_ws[node].get("/loop/policy")
        for r in result.replies:
            v = int(r.value.payload.decode())
            if v > current[node]:
                current[node] = v
                seen[node].append(v)
    return LoopTrace(seen, dict(current), n_epochs)
