"""Over-the-air update workflow: image repo, per-target update lanes,
authenticated channel, health precheck, apply, validation heartbeats,
and automatic rollback to the previous version.

The lane state machine is pure (advance() below); OtaCoordinator drives
one lane per target vehicle over the simulated network, with images and
commands riding reliable messages on a dedicated channel.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from .codec import properties_value
from .fabric import Fabric
from .infomodel import ControlDomain, control_fanout
from .keyspace import KeyExpr, key_matches, parse_key_expr
from .netsim import Delivery

OTA_CHANNEL = 2
DEFAULT_K_BEATS = 3
DEFAULT_WINDOW_MS = 5000
DEFAULT_BEAT_MS = 1000


class OtaError(ValueError):
    pass


class DigestMismatch(OtaError):
    pass


class ImmutableEntry(OtaError):
    pass


class NoMatchingTargets(OtaError):
    pass


class DuplicateJob(OtaError):
    pass


class IllegalTransition(OtaError):
    pass


class BadToken(OtaError):
    pass


class TransferFailed(OtaError):
    pass


class EcuRejected(OtaError):
    pass


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def derive_token(secret: bytes, edge_nonce: bytes, agent_nonce: bytes) -> bytes:
    return hashlib.blake2b(edge_nonce + agent_nonce, key=secret, digest_size=8).digest()


class TargetKind(Enum):
    CONTAINER_APP = "CONTAINER_APP"
    ECU_FIRMWARE = "ECU_FIRMWARE"


@dataclass(frozen=True)
class Artifact:
    name: str
    version: str
    digest: int


@dataclass(frozen=True)
class Manifest:
    job_id: str
    target_selector: KeyExpr
    target_kind: TargetKind
    artifact: Artifact
    k_beats: int = DEFAULT_K_BEATS
    window_ms: int = DEFAULT_WINDOW_MS

    def __post_init__(self):
        if isinstance(self.target_selector, str):
            object.__setattr__(self, "target_selector", parse_key_expr(self.target_selector))
        if self.k_beats < 1:
            raise OtaError("k_beats must be >= 1")
        if self.window_ms < 1:
            raise OtaError("window_ms must be >= 1")


class ImageRepo:
    """Immutable (name, version) -> bytes store plus published manifests."""

    def __init__(self):
        self._images: Dict[Tuple[str, str], bytes] = {}
        self._manifests: Dict[str, Manifest] = {}

    def put_image(self, name: str, version: str, data: bytes) -> int:
        key = (name, version)
        if key in self._images:
            if self._images[key] != data:
                raise ImmutableEntry(f"{name}:{version} already stored with different bytes")
            return digest64(data)
        self._images[key] = bytes(data)
        return digest64(data)

    def image(self, name: str, version: str) -> bytes:
        return self._images[(name, version)]

    def has_image(self, name: str, version: str) -> bool:
        return (name, version) in self._images

    def manifest(self, job_id: str) -> Optional[Manifest]:
        return self._manifests.get(job_id)


def publish_manifest(repo: ImageRepo, manifest: Manifest, image_bytes: bytes) -> None:
    if digest64(image_bytes) != manifest.artifact.digest:
        raise DigestMismatch(f"image digest does not match manifest for {manifest.artifact.name}")
    repo.put_image(manifest.artifact.name, manifest.artifact.version, image_bytes)
    repo._manifests[manifest.job_id] = manifest


# ------------------------------------------------------------ lane machine

class LaneState(Enum):
    CREATED = "CREATED"
    DISTRIBUTED = "DISTRIBUTED"
    CHANNEL_READY = "CHANNEL_READY"
    PRECHECKED = "PRECHECKED"
    UPDATING = "UPDATING"
    VALIDATING = "VALIDATING"
    COMMITTED = "COMMITTED"
    ROLLING_BACK = "ROLLING_BACK"
    ROLLED_BACK = "ROLLED_BACK"


TERMINAL_STATES = (LaneState.COMMITTED, LaneState.ROLLED_BACK)


class LaneEventKind(Enum):
    DISTRIBUTE = "DISTRIBUTE"
    ESTABLISH = "ESTABLISH"
    PRECHECK_OK = "PRECHECK_OK"
    PRECHECK_UNHEALTHY = "PRECHECK_UNHEALTHY"
    APPLY_START = "APPLY_START"
    APPLY_DONE = "APPLY_DONE"
    HEARTBEAT = "HEARTBEAT"
    FAILURE = "FAILURE"
    ROLLBACK_DONE = "ROLLBACK_DONE"


@dataclass(frozen=True)
class LaneEvent:
    kind: LaneEventKind
    healthy: bool = True
    at_ms: int = 0
    reason: str = ""
    prev_version: Optional[str] = None


# forward edges of the happy path; failure edges are handled separately
_FORWARD = {
    (LaneState.CREATED, LaneEventKind.DISTRIBUTE): LaneState.DISTRIBUTED,
    (LaneState.DISTRIBUTED, LaneEventKind.ESTABLISH): LaneState.CHANNEL_READY,
    (LaneState.CHANNEL_READY, LaneEventKind.PRECHECK_OK): LaneState.PRECHECKED,
    (LaneState.PRECHECKED, LaneEventKind.APPLY_START): LaneState.UPDATING,
    (LaneState.UPDATING, LaneEventKind.APPLY_DONE): LaneState.VALIDATING,
}


class Lane:
    """Per-target update lane; advance() is the only mutator."""

    def __init__(self, target: str, k_beats: int = DEFAULT_K_BEATS, window_ms: int = DEFAULT_WINDOW_MS):
        self.target = target
        self.state = LaneState.CREATED
        self.prev_version: Optional[str] = None
        self.failure_reason: Optional[str] = None
        self.parked = False
        self.k_beats = k_beats
        self.window_ms = window_ms
        self._beats: Deque[int] = deque()
        self.epoch = 0  # bumped on every transition, guards stale timers

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def advance(self, event: LaneEvent) -> LaneState:
        if self.terminal:
            raise IllegalTransition(f"{self.target}: {self.state.value} is terminal")
        kind = event.kind
        if kind is LaneEventKind.FAILURE:
            self.failure_reason = event.reason or self.failure_reason or "failure"
            if self.state is not LaneState.ROLLING_BACK:
                self._move(LaneState.ROLLING_BACK)
            return self.state
        if self.state is LaneState.ROLLING_BACK:
            if kind is LaneEventKind.ROLLBACK_DONE:
                self._move(LaneState.ROLLED_BACK)
                return self.state
            raise IllegalTransition(f"{self.target}: {kind.value} in ROLLING_BACK")
        if self.parked:
            if kind is LaneEventKind.PRECHECK_OK:
                self.parked = False
                self._move(LaneState.PRECHECKED)
                return self.state
            if kind is LaneEventKind.PRECHECK_UNHEALTHY:
                return self.state
            raise IllegalTransition(f"{self.target}: {kind.value} while parked")
        if kind is LaneEventKind.PRECHECK_UNHEALTHY:
            if self.state is not LaneState.CHANNEL_READY:
                raise IllegalTransition(f"{self.target}: precheck in {self.state.value}")
            self.parked = True
            self.failure_reason = event.reason or "precheck-unhealthy"
            self.epoch += 1
            return self.state
        if kind is LaneEventKind.HEARTBEAT:
            if self.state is not LaneState.VALIDATING:
                raise IllegalTransition(f"{self.target}: heartbeat in {self.state.value}")
            if not event.healthy:
                self.failure_reason = event.reason or "heartbeat-unhealthy"
                self._move(LaneState.ROLLING_BACK)
                return self.state
            self._beats.append(event.at_ms)
            if len(self._beats) == self.k_beats:
                if self._beats[-1] - self._beats[0] <= self.window_ms:
                    self._move(LaneState.COMMITTED)
                else:
                    self._beats.popleft()
            return self.state
        nxt = _FORWARD.get((self.state, kind))
        if nxt is None:
            raise IllegalTransition(f"{self.target}: {kind.value} in {self.state.value}")
        if kind is LaneEventKind.APPLY_START:
            if event.prev_version is None:
                raise IllegalTransition(f"{self.target}: apply without recorded previous version")
            self.prev_version = event.prev_version
        self._move(nxt)
        return self.state

    def _move(self, state: LaneState) -> None:
        self.state = state
        self.epoch += 1
        if state is not LaneState.VALIDATING:
            self._beats.clear()


class UpdateJob:
    def __init__(self, manifest: Manifest, targets: List[Tuple[str, int]]):
        self.manifest = manifest
        self.lanes: Dict[str, Lane] = {
            key: Lane(key, manifest.k_beats, manifest.window_ms) for key, _ in targets
        }
        self.target_nodes: Dict[str, int] = dict(targets)

    @property
    def done(self) -> bool:
        return all(lane.terminal for lane in self.lanes.values())

    def outcome(self) -> Dict[str, str]:
        return {key: lane.state.value for key, lane in sorted(self.lanes.items())}


def advance_job(job: UpdateJob, target: str, event: LaneEvent) -> LaneState:
    return job.lanes[target].advance(event)


# ------------------------------------------------------------- vehicle side

@dataclass
class EcuPort:
    """ECU update entry point: an actuator domain plus the actuator id."""
    domain: ControlDomain
    actuator: str


class OtaAgent:
    """Vehicle-side update agent: local image store, running versions,
    channel tokens, and a health flag polled during validation."""

    def __init__(self, node: int, secret: bytes):
        self.node = node
        self.secret = secret
        self.healthy = True
        self.running: Dict[str, str] = {}
        self.images: Dict[Tuple[str, str], bytes] = {}
        self.tokens: Dict[str, bytes] = {}
        self.ecu_ports: Dict[str, EcuPort] = {}

    def set_health(self, healthy: bool) -> None:
        self.healthy = healthy

    def install(self, name: str, version: str, data: bytes) -> None:
        self.images[(name, version)] = bytes(data)
        self.running[name] = version

    def register_ecu(self, name: str, port: EcuPort) -> None:
        self.ecu_ports[name] = port

    def current_version(self, name: str) -> Optional[str]:
        return self.running.get(name)

    def check_token(self, job_id: str, token_hex: str) -> bool:
        want = self.tokens.get(job_id)
        return want is not None and want.hex() == token_hex

    def apply_update(self, job_id: str, kind: TargetKind, name: str, version: str) -> Tuple[bool, str]:
        """Swap to `version`; (ok, reason). Old image bytes are retained."""
        if kind is TargetKind.CONTAINER_APP:
            if (name, version) not in self.images:
                return False, "transfer-failed"
            self.running[name] = version
            return True, "applied"
        port = self.ecu_ports.get(name)
        if port is None:
            return False, "ecu-rejected"
        try:
            results = control_fanout(
                port.domain,
                properties_value({"image": name, "version": version}),
                targets=[port.actuator],
            )
        except Exception:
            return False, "ecu-rejected"
        res = results[0]
        if not res.ok or res.detail in (False, "reject"):
            return False, "ecu-rejected"
        self.running[name] = version
        return True, "applied"

    def rollback(self, name: str, version: Optional[str]) -> None:
        if version is None:
            self.running.pop(name, None)
        else:
            self.running[name] = version


# -------------------------------------------------------------- coordinator

def _pair_secret(edge: int, node: int) -> bytes:
    return hashlib.blake2b(f"psk:{edge}:{node}".encode(), digest_size=16).digest()


class OtaCoordinator:
    """Edge-side controller: resolves targets from the fleet registry,
    distributes images, co-derives channel tokens, prechecks, applies,
    validates with heartbeats, and rolls back on any failure."""

    def __init__(self, fabric: Fabric, edge_node: int, repo: ImageRepo, *, beat_ms: int = DEFAULT_BEAT_MS):
        self.fabric = fabric
        self.sim = fabric.sim
        self.edge = edge_node
        self.repo = repo
        self.beat_ms = beat_ms
        self.jobs: Dict[str, UpdateJob] = {}
        self.agents: Dict[int, OtaAgent] = {}
        self._edge_nonces: Dict[Tuple[str, str], bytes] = {}
        self._tokens: Dict[Tuple[str, str], bytes] = {}
        self._prev: Dict[Tuple[str, str], Optional[str]] = {}
        self.ws = fabric.open_workspace(edge_node)
        self.registry = self.ws.register_storage("/fleet/**")
        fabric.set_channel_handler(edge_node, OTA_CHANNEL, self._on_edge_msg)

    # ------------------------------------------------------------- plumbing

    def attach_agent(self, fleet_key: str, node: int) -> OtaAgent:
        agent = OtaAgent(node, _pair_secret(self.edge, node))
        self.agents[node] = agent
        self.fabric.set_channel_handler(node, OTA_CHANNEL, lambda d: self._on_agent_msg(agent, d))
        self.ws.put(fleet_key, f"node={node}")
        return agent

    def _send(self, dst: int, obj: dict) -> int:
        return self.sim.send_reliable(self.edge, dst, OTA_CHANNEL, json.dumps(obj, sort_keys=True).encode())

    def _reply(self, agent: OtaAgent, obj: dict) -> int:
        return self.sim.send_reliable(agent.node, self.edge, OTA_CHANNEL, json.dumps(obj, sort_keys=True).encode())

    def _trace(self, job_id: str, lane: str, old: LaneState, new: LaneState, reason: str) -> None:
        self.sim.record(f"OTA {self.sim.now} {job_id} {lane} {old.value} -> {new.value} {reason}")

    def _advance(self, job: UpdateJob, lane_key: str, event: LaneEvent, reason: str) -> LaneState:
        lane = job.lanes[lane_key]
        old = lane.state
        new = lane.advance(event)
        if new is not old or event.kind is LaneEventKind.PRECHECK_UNHEALTHY:
            self._trace(job.manifest.job_id, lane_key, old, new, reason)
        return new

    # ------------------------------------------------------------ job start

    def start_update_job(self, manifest: Manifest) -> UpdateJob:
        if manifest.job_id in self.jobs:
            raise DuplicateJob(manifest.job_id)
        if not self.repo.has_image(manifest.artifact.name, manifest.artifact.version):
            raise OtaError(f"image {manifest.artifact.name}:{manifest.artifact.version} not published")
        targets = []
        for key_text in sorted(self.registry.table):
            if key_matches(manifest.target_selector, parse_key_expr(key_text)):
                props = dict(p.split("=", 1) for p in self.registry.table[key_text].value.payload.decode().split(";"))
                targets.append((key_text, int(props["node"])))
        if not targets:
            raise NoMatchingTargets(manifest.target_selector.text)
        job = UpdateJob(manifest, targets)
        self.jobs[manifest.job_id] = job
        return job

    def run_job(self, job: UpdateJob) -> None:
        """Kick off distribution on every lane; the rest is event-driven."""
        art = job.manifest.artifact
        data = self.repo.image(art.name, art.version)
        for lane_key in sorted(job.lanes):
            node = job.target_nodes[lane_key]
            self._send(node, {
                "t": "dist", "job": job.manifest.job_id, "lane": lane_key,
                "name": art.name, "version": art.version,
                "bytes": data.hex(), "digest": art.digest,
            })

    def inject_failure(self, job: UpdateJob, lane_key: str, reason: str = "injected") -> None:
        lane = job.lanes[lane_key]
        if lane.terminal:
            return
        self._advance(job, lane_key, LaneEvent(LaneEventKind.FAILURE, reason=reason), reason)
        self._start_rollback(job, lane_key)

    # ---------------------------------------------------------- edge events

    # lane state each reply kind is valid in; anything else is stale
    _EXPECTS = {
        "dist_ok": LaneState.CREATED,
        "dist_fail": LaneState.CREATED,
        "chan_ok": LaneState.DISTRIBUTED,
        "precheck_res": LaneState.CHANNEL_READY,
        "apply_ok": LaneState.UPDATING,
        "apply_fail": LaneState.UPDATING,
        "hb": LaneState.VALIDATING,
        "rollback_ok": LaneState.ROLLING_BACK,
    }

    def _on_edge_msg(self, delivery: Delivery) -> None:
        msg = json.loads(delivery.payload.decode())
        job = self.jobs.get(msg.get("job", ""))
        if job is None:
            return
        lane_key = msg["lane"]
        lane = job.lanes.get(lane_key)
        if lane is None or lane.terminal:
            return
        kind = msg["t"]
        if lane.state is not self._EXPECTS.get(kind):
            return
        if kind == "dist_ok":
            self._advance(job, lane_key, LaneEvent(LaneEventKind.DISTRIBUTE), "image-delivered")
            nonce = self.sim.rng.getrandbits(64).to_bytes(8, "big")
            self._edge_nonces[(job.manifest.job_id, lane_key)] = nonce
            self._send(delivery.src, {
                "t": "chan", "job": job.manifest.job_id, "lane": lane_key, "edge_nonce": nonce.hex(),
            })
        elif kind == "dist_fail":
            self._fail(job, lane_key, msg.get("reason", "transfer-failed"))
        elif kind == "chan_ok":
            agent_nonce = bytes.fromhex(msg["agent_nonce"])
            edge_nonce = self._edge_nonces[(job.manifest.job_id, lane_key)]
            secret = _pair_secret(self.edge, delivery.src)
            token = derive_token(secret, edge_nonce, agent_nonce)
            self._tokens[(job.manifest.job_id, lane_key)] = token
            self._advance(job, lane_key, LaneEvent(LaneEventKind.ESTABLISH), "token-derived")
            self._send(delivery.src, {
                "t": "precheck", "job": job.manifest.job_id, "lane": lane_key, "token": token.hex(),
            })
        elif kind == "precheck_res":
            if msg["healthy"]:
                self._prev[(job.manifest.job_id, lane_key)] = msg.get("current")
                self._advance(job, lane_key, LaneEvent(LaneEventKind.PRECHECK_OK), "precheck-healthy")
                self._start_apply(job, lane_key, delivery.src)
            else:
                self._advance(
                    job, lane_key,
                    LaneEvent(LaneEventKind.PRECHECK_UNHEALTHY, reason="precheck-unhealthy"),
                    "parked-precheck-unhealthy",
                )
        elif kind == "apply_ok":
            self._advance(job, lane_key, LaneEvent(LaneEventKind.APPLY_DONE), "apply-done")
            self._schedule_validation(job, lane_key, delivery.src)
        elif kind == "apply_fail":
            self._fail(job, lane_key, msg.get("reason", "apply-failed"))
        elif kind == "hb":
            healthy = bool(msg["healthy"])
            new = self._advance(
                job, lane_key,
                LaneEvent(LaneEventKind.HEARTBEAT, healthy=healthy, at_ms=self.sim.now),
                f"beats-{len(lane._beats) + 1}" if healthy else "heartbeat-unhealthy",
            )
            if new is LaneState.ROLLING_BACK:
                self._start_rollback(job, lane_key)
        elif kind == "rollback_ok":
            self._advance(job, lane_key, LaneEvent(LaneEventKind.ROLLBACK_DONE), "rollback-complete")

    def _fail(self, job: UpdateJob, lane_key: str, reason: str) -> None:
        self._advance(job, lane_key, LaneEvent(LaneEventKind.FAILURE, reason=reason), reason)
        self._start_rollback(job, lane_key)

    def _start_apply(self, job: UpdateJob, lane_key: str, node: int) -> None:
        art = job.manifest.artifact
        prev = self._prev.get((job.manifest.job_id, lane_key))
        self._advance(
            job, lane_key,
            LaneEvent(LaneEventKind.APPLY_START, prev_version=prev if prev is not None else ""),
            "apply-started",
        )
        token = self._tokens[(job.manifest.job_id, lane_key)]
        self._send(node, {
            "t": "apply", "job": job.manifest.job_id, "lane": lane_key,
            "token": token.hex(), "kind": job.manifest.target_kind.value,
            "name": art.name, "version": art.version,
        })

    def _schedule_validation(self, job: UpdateJob, lane_key: str, node: int) -> None:
        lane = job.lanes[lane_key]
        epoch = lane.epoch
        job_id = job.manifest.job_id
        token = self._tokens[(job_id, lane_key)].hex()

        def poll():
            if lane.epoch != epoch or lane.state is not LaneState.VALIDATING:
                return
            self._send(node, {"t": "hb_req", "job": job_id, "lane": lane_key, "token": token})
            self.sim.call_at(self.sim.now + self.beat_ms, poll)

        def deadline():
            if lane.epoch != epoch or lane.state is not LaneState.VALIDATING:
                return
            self._fail(job, lane_key, "heartbeat-miss")

        self.sim.call_at(self.sim.now + self.beat_ms, poll)
        self.sim.call_at(self.sim.now + job.manifest.window_ms + 2 * self.beat_ms, deadline)

    def _start_rollback(self, job: UpdateJob, lane_key: str) -> None:
        lane = job.lanes[lane_key]
        node = job.target_nodes[lane_key]
        token = self._tokens.get((job.manifest.job_id, lane_key))
        if token is None or lane.prev_version is None:
            # nothing was applied; restoring is a no-op
            self._advance(job, lane_key, LaneEvent(LaneEventKind.ROLLBACK_DONE), "rollback-noop")
            return
        self._send(node, {
            "t": "rollback", "job": job.manifest.job_id, "lane": lane_key,
            "token": token.hex(), "name": job.manifest.artifact.name,
            "prev": lane.prev_version,
        })

    # --------------------------------------------------------- agent events

    def _on_agent_msg(self, agent: OtaAgent, delivery: Delivery) -> None:
        msg = json.loads(delivery.payload.decode())
        kind = msg["t"]
        job_id, lane_key = msg.get("job", ""), msg.get("lane", "")
        base = {"job": job_id, "lane": lane_key}
        if kind == "dist":
            data = bytes.fromhex(msg["bytes"])
            if digest64(data) != msg["digest"]:
                self._reply(agent, {"t": "dist_fail", "reason": "digest-mismatch", **base})
                return
            agent.images[(msg["name"], msg["version"])] = data
            self._reply(agent, {"t": "dist_ok", **base})
        elif kind == "chan":
            nonce = self.sim.rng.getrandbits(64).to_bytes(8, "big")
            edge_nonce = bytes.fromhex(msg["edge_nonce"])
            agent.tokens[job_id] = derive_token(agent.secret, edge_nonce, nonce)
            self._reply(agent, {"t": "chan_ok", "agent_nonce": nonce.hex(), **base})
        elif kind == "precheck":
            if not agent.check_token(job_id, msg["token"]):
                return
            name = self.jobs[job_id].manifest.artifact.name if job_id in self.jobs else ""
            self._reply(agent, {
                "t": "precheck_res", "healthy": agent.healthy,
                "current": agent.current_version(name), **base,
            })
        elif kind == "apply":
            if not agent.check_token(job_id, msg["token"]):
                self._reply(agent, {"t": "apply_fail", "reason": "bad-token", **base})
                return
            ok, reason = agent.apply_update(job_id, TargetKind(msg["kind"]), msg["name"], msg["version"])
            if ok:
                self._reply(agent, {"t": "apply_ok", **base})
            else:
                self._reply(agent, {"t": "apply_fail", "reason": reason, **base})
        elif kind == "hb_req":
            if not agent.check_token(job_id, msg["token"]):
                return
            self._reply(agent, {"t": "hb", "healthy": agent.healthy, **base})
        elif kind == "rollback":
            if not agent.check_token(job_id, msg["token"]):
                return
            agent.rollback(msg["name"], msg["prev"] or None)
            self._reply(agent, {"t": "rollback_ok", **base})


def start_update_job(coordinator: OtaCoordinator, manifest: Manifest) -> UpdateJob:
    return coordinator.start_update_job(manifest)


def apply_target_update(agent: OtaAgent, manifest: Manifest, token_hex: str) -> str:
    """Direct-call apply for a single target; raises instead of replying.

    BadToken leaves the agent untouched; TransferFailed means the image
    never arrived; EcuRejected surfaces the ECU handler's refusal.
    """
    if not agent.check_token(manifest.job_id, token_hex):
        raise BadToken(manifest.job_id)
    art = manifest.artifact
    ok, reason = agent.apply_update(manifest.job_id, manifest.target_kind, art.name, art.version)
    if not ok:
        if reason == "transfer-failed":
            raise TransferFailed(art.name)
        raise EcuRejected(art.name)
    return art.version
