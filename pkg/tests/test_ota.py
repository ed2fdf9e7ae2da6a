"""Update-lane state machine, image repo, channel tokens, and the
coordinator driving full update jobs over the simulated network."""

import random

import pytest

from fleetmesh.codec import properties_value
from fleetmesh.fabric import Fabric
from fleetmesh.infomodel import Actuator, ControlDomain, Field, FieldKind, Schema
from fleetmesh.keyspace import parse_key_expr
from fleetmesh.netsim import NodeMode, Sim
from fleetmesh.ota import (
    Artifact,
    BadToken,
    DigestMismatch,
    DuplicateJob,
    EcuPort,
    EcuRejected,
    IllegalTransition,
    ImageRepo,
    ImmutableEntry,
    Lane,
    LaneEvent,
    LaneEventKind,
    LaneState,
    Manifest,
    NoMatchingTargets,
    OtaCoordinator,
    OtaError,
    TargetKind,
    TransferFailed,
    apply_target_update,
    derive_token,
    digest64,
    publish_manifest,
)

E = LaneEventKind


def ev(kind, **kw):
    return LaneEvent(kind, **kw)


def walk(lane, *kinds):
    for k in kinds:
        if k is E.APPLY_START:
            lane.advance(ev(k, prev_version="1.0"))
        else:
            lane.advance(ev(k))
    return lane


def to_state(state, k_beats=3, window_ms=5000):
    """A fresh lane advanced along the happy path to `state`."""
    lane = Lane("t", k_beats, window_ms)
    path = [E.DISTRIBUTE, E.ESTABLISH, E.PRECHECK_OK, E.APPLY_START, E.APPLY_DONE]
    order = [
        LaneState.CREATED, LaneState.DISTRIBUTED, LaneState.CHANNEL_READY,
        LaneState.PRECHECKED, LaneState.UPDATING, LaneState.VALIDATING,
    ]
    for nxt, evk in zip(order[1:] + [LaneState.VALIDATING], path):
        if lane.state is state:
            return lane
        walk(lane, evk)
    if lane.state is state:
        return lane
    if state is LaneState.ROLLING_BACK:
        lane.advance(ev(E.FAILURE, reason="forced"))
        return lane
    if state is LaneState.COMMITTED:
        for t in (0, 100, 200):
            lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=t))
        return lane
    if state is LaneState.ROLLED_BACK:
        lane.advance(ev(E.FAILURE, reason="forced"))
        lane.advance(ev(E.ROLLBACK_DONE))
        return lane
    raise AssertionError(f"cannot build {state}")


# ------------------------------------------------------------ lane machine

def test_happy_path_commits():
    lane = to_state(LaneState.VALIDATING)
    assert lane.prev_version == "1.0"
    lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=1000))
    lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=2000))
    assert lane.state is LaneState.VALIDATING
    lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=3000))
    assert lane.state is LaneState.COMMITTED


def test_sparse_beats_slide_window():
    lane = to_state(LaneState.VALIDATING, k_beats=3, window_ms=5000)
    for t in (0, 4000, 8000):  # span 8000 > 5000, no commit
        lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=t))
    assert lane.state is LaneState.VALIDATING
    lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=9500))  # 4000..9500 still wide
    assert lane.state is LaneState.VALIDATING
    lane.advance(ev(E.HEARTBEAT, healthy=True, at_ms=9800))  # 8000..9800 fits
    assert lane.state is LaneState.COMMITTED


def test_unhealthy_beat_rolls_back():
    lane = to_state(LaneState.VALIDATING)
    lane.advance(ev(E.HEARTBEAT, healthy=False))
    assert lane.state is LaneState.ROLLING_BACK
    lane.advance(ev(E.ROLLBACK_DONE))
    assert lane.state is LaneState.ROLLED_BACK
    assert lane.failure_reason == "heartbeat-unhealthy"


def test_failure_everywhere_nonterminal_reaches_rolled_back():
    reachable = [
        LaneState.CREATED, LaneState.DISTRIBUTED, LaneState.CHANNEL_READY,
        LaneState.PRECHECKED, LaneState.UPDATING, LaneState.VALIDATING,
        LaneState.ROLLING_BACK,
    ]
    for state in reachable:
        lane = to_state(state)
        lane.advance(ev(E.FAILURE, reason="injected"))
        assert lane.state is LaneState.ROLLING_BACK
        lane.advance(ev(E.ROLLBACK_DONE))
        assert lane.state is LaneState.ROLLED_BACK
        assert lane.terminal


def test_apply_requires_recorded_prev_version():
    lane = to_state(LaneState.PRECHECKED)
    with pytest.raises(IllegalTransition):
        lane.advance(ev(E.APPLY_START))
    lane.advance(ev(E.APPLY_START, prev_version="0.9"))
    assert lane.prev_version == "0.9"


def test_parked_lane_never_updates():
    lane = to_state(LaneState.CHANNEL_READY)
    lane.advance(ev(E.PRECHECK_UNHEALTHY))
    assert lane.parked and lane.state is LaneState.CHANNEL_READY
    assert lane.failure_reason == "precheck-unhealthy"
    with pytest.raises(IllegalTransition):
        lane.advance(ev(E.APPLY_START, prev_version="1.0"))
    lane.advance(ev(E.PRECHECK_UNHEALTHY))  # still parked, no error
    lane.advance(ev(E.PRECHECK_OK))
    assert not lane.parked and lane.state is LaneState.PRECHECKED


def test_terminal_states_accept_nothing():
    for state in (LaneState.COMMITTED, LaneState.ROLLED_BACK):
        lane = to_state(state)
        for kind in E:
            with pytest.raises(IllegalTransition):
                lane.advance(ev(kind))


def test_illegal_jumps_rejected():
    lane = Lane("t")
    for kind in (E.ESTABLISH, E.PRECHECK_OK, E.APPLY_DONE, E.HEARTBEAT, E.ROLLBACK_DONE):
        with pytest.raises(IllegalTransition):
            lane.advance(ev(kind, prev_version="x"))


def test_no_cycles_random_event_storm():
    rng = random.Random(92001)
    order = list(LaneState)
    rank = {s: i for i, s in enumerate(order)}
    for _ in range(300):
        lane = Lane("t", k_beats=2, window_ms=100)
        seen = [lane.state]
        for _ in range(30):
            kind = rng.choice(list(E))
            try:
                lane.advance(ev(
                    kind,
                    healthy=rng.random() < 0.7,
                    at_ms=rng.randrange(0, 200),
                    prev_version="1.0",
                ))
            except IllegalTransition:
                continue
            seen.append(lane.state)
            if lane.terminal:
                break
        non_rb = [s for s in seen if s is not LaneState.ROLLING_BACK]
        ranks = [rank[s] for s in non_rb]
        assert ranks == sorted(ranks)  # forward-only outside rollback
        assert seen.count(LaneState.ROLLING_BACK) == 0 or (
            LaneState.ROLLED_BACK in seen or not lane.terminal
        )


# ------------------------------------------------------------- repo, tokens

def test_repo_immutability():
    repo = ImageRepo()
    d1 = repo.put_image("app", "1.0", b"alpha")
    assert repo.put_image("app", "1.0", b"alpha") == d1  # idempotent
    with pytest.raises(ImmutableEntry):
        repo.put_image("app", "1.0", b"beta")
    assert repo.image("app", "1.0") == b"alpha"


def test_publish_manifest_checks_digest():
    repo = ImageRepo()
    data = b"image-bytes-v2"
    manifest = Manifest("job-1", "/fleet/**", TargetKind.CONTAINER_APP,
                        Artifact("app", "2.0", digest64(data)))
    publish_manifest(repo, manifest, data)
    assert repo.manifest("job-1") is manifest
    bad = Manifest("job-2", "/fleet/**", TargetKind.CONTAINER_APP,
                   Artifact("app", "3.0", digest64(b"other")))
    with pytest.raises(DigestMismatch):
        publish_manifest(repo, bad, b"corrupted")


def test_manifest_health_policy_validated():
    with pytest.raises(OtaError):
        Manifest("j", "/f/**", TargetKind.CONTAINER_APP, Artifact("a", "1", 0), k_beats=0)
    with pytest.raises(OtaError):
        Manifest("j", "/f/**", TargetKind.CONTAINER_APP, Artifact("a", "1", 0), window_ms=0)


def test_digest_is_64_bit_and_stable():
    d = digest64(b"payload")
    assert d == digest64(b"payload")
    assert 0 <= d < 2 ** 64
    assert d != digest64(b"payloae")


def test_token_derivation():
    t1 = derive_token(b"secret", b"edge", b"agent")
    assert len(t1) == 8
    assert t1 == derive_token(b"secret", b"edge", b"agent")
    assert t1 != derive_token(b"secret2", b"edge", b"agent")
    assert t1 != derive_token(b"secret", b"edge2", b"agent")
    assert t1 != derive_token(b"secret", b"edge", b"agent2")


# ------------------------------------------------------------- coordinator

def fleet_rig(n_vehicles=3, seed=21, beat_ms=1000):
    sim = Sim(seed)
    hub = sim.add_node(NodeMode.ROUTER)
    edge = sim.add_node(NodeMode.CLIENT)
    sim.add_link(hub, edge, 5)
    vnodes = []
    for _ in range(n_vehicles):
        v = sim.add_node(NodeMode.CLIENT)
        sim.add_link(hub, v, 10)
        vnodes.append(v)
    sim.settle()
    fabric = Fabric(sim)
    repo = ImageRepo()
    coord = OtaCoordinator(fabric, edge, repo, beat_ms=beat_ms)
    agents = {}
    for i, v in enumerate(vnodes, 1):
        agent = coord.attach_agent(f"/fleet/city/veh-{i}", v)
        agent.install("app", "1.0", b"old-image-bytes")
        agents[i] = agent
    sim.settle()
    data = b"new-image-bytes-2.0"
    manifest = Manifest("job-1", "/fleet/city/**", TargetKind.CONTAINER_APP,
                        Artifact("app", "2.0", digest64(data)))
    publish_manifest(repo, manifest, data)
    return sim, coord, agents, manifest


def run_until(sim, pred, limit_ms=60000):
    while not pred():
        t = sim.next_event_time()
        if t is None or t > limit_ms:
            break
        sim.step_until(t)


def test_full_job_commits_all_lanes():
    sim, coord, agents, manifest = fleet_rig()
    job = coord.start_update_job(manifest)
    assert sorted(job.lanes) == [f"/fleet/city/veh-{i}" for i in (1, 2, 3)]
    coord.run_job(job)
    sim.settle()
    assert job.done
    assert set(job.outcome().values()) == {"COMMITTED"}
    for agent in agents.values():
        assert agent.current_version("app") == "2.0"
        assert agent.images[("app", "1.0")] == b"old-image-bytes"  # retained
    ota_lines = [l for l in sim.trace_lines if l.startswith("OTA ")]
    assert any("-> COMMITTED" in l for l in ota_lines)


def test_validation_failure_rolls_back_one_lane():
    sim, coord, agents, manifest = fleet_rig()
    victim = agents[2]
    orig = victim.apply_update

    def tampered(*a, **kw):
        res = orig(*a, **kw)
        victim.healthy = False
        return res

    victim.apply_update = tampered
    job = coord.start_update_job(manifest)
    coord.run_job(job)
    sim.settle()
    assert job.outcome() == {
        "/fleet/city/veh-1": "COMMITTED",
        "/fleet/city/veh-2": "ROLLED_BACK",
        "/fleet/city/veh-3": "COMMITTED",
    }
    assert victim.current_version("app") == "1.0"
    assert victim.images[("app", "1.0")] == b"old-image-bytes"
    assert agents[1].current_version("app") == "2.0"


def test_precheck_unhealthy_parks_lane_no_updating():
    sim, coord, agents, manifest = fleet_rig(n_vehicles=1)
    agents[1].set_health(False)
    job = coord.start_update_job(manifest)
    coord.run_job(job)
    sim.settle()
    lane = job.lanes["/fleet/city/veh-1"]
    assert lane.parked and lane.state is LaneState.CHANNEL_READY
    assert agents[1].current_version("app") == "1.0"
    for line in sim.trace_lines:
        assert "UPDATING" not in line


def test_exhaustive_failure_injection_over_sim():
    observable = {
        LaneState.CREATED, LaneState.DISTRIBUTED, LaneState.CHANNEL_READY,
        LaneState.UPDATING, LaneState.VALIDATING,
    }
    for state in sorted(observable, key=lambda s: s.value):
        sim, coord, agents, manifest = fleet_rig(n_vehicles=1, seed=31)
        job = coord.start_update_job(manifest)
        lane_key = "/fleet/city/veh-1"
        lane = job.lanes[lane_key]
        coord.run_job(job)
        run_until(sim, lambda: lane.state is state)
        assert lane.state is state, f"never observed {state}"
        coord.inject_failure(job, lane_key, reason="chaos")
        sim.settle()
        assert lane.state is LaneState.ROLLED_BACK, state
        assert agents[1].current_version("app") == "1.0"
        assert agents[1].images[("app", "1.0")] == b"old-image-bytes"


def test_target_resolution_and_job_errors():
    sim, coord, agents, manifest = fleet_rig()
    with pytest.raises(NoMatchingTargets):
        coord.start_update_job(Manifest("job-x", "/fleet/countryside/**",
                                        TargetKind.CONTAINER_APP, manifest.artifact))
    coord.start_update_job(manifest)
    with pytest.raises(DuplicateJob):
        coord.start_update_job(manifest)
    unpublished = Manifest("job-y", "/fleet/city/**", TargetKind.CONTAINER_APP,
                           Artifact("ghost", "9.9", 1))
    with pytest.raises(OtaError):
        coord.start_update_job(unpublished)


def test_forged_token_fuzzing_never_applies():
    rng = random.Random(92002)
    sim, coord, agents, manifest = fleet_rig(n_vehicles=1)
    agent = agents[1]
    agent.tokens["job-1"] = derive_token(agent.secret, b"e" * 8, b"a" * 8)
    real = agent.tokens["job-1"].hex()
    for _ in range(1000):
        forged = rng.getrandbits(64).to_bytes(8, "big").hex()
        if forged == real:
            continue
        with pytest.raises(BadToken):
            apply_target_update(agent, manifest, forged)
        assert agent.current_version("app") == "1.0"
    agent.images[("app", "2.0")] = b"new-image-bytes-2.0"
    assert apply_target_update(agent, manifest, real) == "2.0"
    assert agent.current_version("app") == "2.0"


def test_direct_apply_error_surface():
    sim, coord, agents, manifest = fleet_rig(n_vehicles=1)
    agent = agents[1]
    agent.tokens["job-1"] = b"\x01" * 8
    tok = agent.tokens["job-1"].hex()
    with pytest.raises(TransferFailed):
        apply_target_update(agent, manifest, tok)  # image never distributed

    schema = Schema(parse_key_expr("/ecu/cmd"),
                    (Field("image", FieldKind.TEXT), Field("version", FieldKind.TEXT)))
    domain = ControlDomain("ecu-ctl", [Actuator("motor-fw", schema, lambda cmd: "reject")])
    agent.register_ecu("motor-fw", EcuPort(domain, "motor-fw"))
    ecu_manifest = Manifest("job-1", "/fleet/city/**", TargetKind.ECU_FIRMWARE,
                            Artifact("motor-fw", "2.0", 0))
    with pytest.raises(EcuRejected):
        apply_target_update(agent, ecu_manifest, tok)


def test_ecu_firmware_update_via_handler():
    sim, coord, agents, manifest_unused = fleet_rig(n_vehicles=1, seed=37)
    agent = agents[1]
    flashed = []
    schema = Schema(parse_key_expr("/ecu/cmd"),
                    (Field("image", FieldKind.TEXT), Field("version", FieldKind.TEXT)))
    domain = ControlDomain("ecu-ctl", [
        Actuator("motor-fw", schema, lambda cmd: flashed.append(cmd) or "ok"),
    ])
    agent.register_ecu("motor-fw", EcuPort(domain, "motor-fw"))
    agent.install("motor-fw", "1.0", b"fw-1")
    data = b"fw-2"
    manifest = Manifest("job-fw", "/fleet/city/**", TargetKind.ECU_FIRMWARE,
                        Artifact("motor-fw", "2.0", digest64(data)))
    publish_manifest(coord.repo, manifest, data)
    job = coord.start_update_job(manifest)
    coord.run_job(job)
    sim.settle()
    assert job.outcome() == {"/fleet/city/veh-1": "COMMITTED"}
    assert agent.current_version("motor-fw") == "2.0"
    assert len(flashed) == 1


def test_ota_trace_deterministic():
    def trace_of(seed):
        sim, coord, agents, manifest = fleet_rig(seed=seed)
        job = coord.start_update_job(manifest)
        coord.run_job(job)
        sim.settle()
        return [l for l in sim.trace_lines if l.startswith("OTA ")]

    assert trace_of(55) == trace_of(55)
    assert trace_of(55)  # non-empty
