"""Workspace semantics: pub/sub delivery, storage LWW tables, eval
queries, consolidation, and clock ordering, all checked against the
sequential replay oracles."""

import random

import pytest

from fleetmesh.codec import EncodingTag, Value, as_properties, as_text, properties_value, text_value
from fleetmesh.fabric import (
    Fabric,
    GetResult,
    InvalidDepth,
    NonConcreteKey,
    Reply,
    ReplyOrigin,
    SampleKind,
    Timestamp,
    consolidate_replies,
    open_workspace,
)
from fleetmesh.keyspace import parse_key_expr
from fleetmesh.netsim import LinkStatus, NodeMode, Sim, UnknownNode
from oracles import consolidate, replay_storage


def star_fabric(seed=5, leaves=3):
    """One router with `leaves` client nodes hanging off it."""
    sim = Sim(seed)
    hub = sim.add_node(NodeMode.ROUTER)
    nodes = []
    for _ in range(leaves):
        n = sim.add_node(NodeMode.CLIENT)
        sim.add_link(hub, n, 5)
        nodes.append(n)
    sim.settle()
    return sim, Fabric(sim), hub, nodes


# ------------------------------------------------------------- workspaces

def test_open_workspace_validates_node():
    sim, fabric, hub, nodes = star_fabric()
    ws = fabric.open_workspace(nodes[0])
    assert ws.subscriptions == []
    with pytest.raises(UnknownNode):
        fabric.open_workspace(99)
    assert open_workspace(fabric, hub).node == hub


def test_two_workspaces_have_independent_subscriptions():
    sim, fabric, hub, nodes = star_fabric()
    w1 = fabric.open_workspace(nodes[0])
    w2 = fabric.open_workspace(nodes[0])
    s1 = w1.subscribe("/a/**")
    w2.subscribe("/b/**")
    w2.subscribe("/c/**")
    assert len(w1.subscriptions) == 1
    assert len(w2.subscriptions) == 2
    w1.unsubscribe(s1)
    assert w1.subscriptions == []
    assert len(w2.subscriptions) == 2


# ------------------------------------------------------------ pub/sub

def test_put_reaches_matching_subscriber():
    sim, fabric, hub, nodes = star_fabric()
    pub = fabric.open_workspace(nodes[0])
    sub_ws = fabric.open_workspace(nodes[1])
    sub = sub_ws.subscribe("/city/road/*")
    sim.settle()
    pub.put("/city/road/traffic_light", "Red")
    sim.settle()
    assert len(sub.queue) == 1
    sample = sub.queue[0]
    assert sample.key.text == "/city/road/traffic_light"
    assert as_text(sample.value) == "Red"
    assert sample.kind is SampleKind.PUT


def test_put_with_no_match_is_silent():
    sim, fabric, hub, nodes = star_fabric()
    pub = fabric.open_workspace(nodes[0])
    other = fabric.open_workspace(nodes[1])
    sub = other.subscribe("/elsewhere/**")
    sim.settle()
    pub.put("/demo/hello", "Hello world")
    sim.settle()
    assert sub.queue == []


def test_put_rejects_wildcard_key():
    sim, fabric, hub, nodes = star_fabric()
    ws = fabric.open_workspace(nodes[0])
    with pytest.raises(NonConcreteKey):
        ws.put("/demo/*", "x")


def test_subscribe_after_put_sees_nothing():
    sim, fabric, hub, nodes = star_fabric()
    pub = fabric.open_workspace(nodes[0])
    pub.put("/demo/hello", "early")
    sim.settle()
    late = fabric.open_workspace(nodes[1]).subscribe("/demo/**")
    sim.settle()
    assert late.queue == []


def test_overlapping_subscriptions_each_get_a_copy():
    sim, fabric, hub, nodes = star_fabric()
    pub = fabric.open_workspace(nodes[0])
    ws = fabric.open_workspace(nodes[1])
    s1 = ws.subscribe("/demo/**")
    s2 = ws.subscribe("/demo/hello")
    local = pub.subscribe("/demo/*")  # same node as the publisher
    sim.settle()
    pub.put("/demo/hello", "Hello world")
    sim.settle()
    assert len(s1.queue) == len(s2.queue) == len(local.queue) == 1


def test_unsubscribe_stops_delivery():
    sim, fabric, hub, nodes = star_fabric()
    pub = fabric.open_workspace(nodes[0])
    ws = fabric.open_workspace(nodes[1])
    sub = ws.subscribe("/demo/**")
    sim.settle()
    pub.put("/demo/a", "1")
    sim.settle()
    ws.unsubscribe(sub)
    sim.settle()
    pub.put("/demo/b", "2")
    sim.settle()
    assert [s.key.text for s in sub.queue] == ["/demo/a"]


def test_sink_callback_and_per_publisher_order():
    sim, fabric, hub, nodes = star_fabric(seed=9)
    pub_a = fabric.open_workspace(nodes[0])
    pub_b = fabric.open_workspace(nodes[1])
    seen = []
    fabric.open_workspace(nodes[2]).subscribe("/t/**", sink=lambda s: seen.append(s))
    sim.settle()
    for i in range(20):
        pub_a.put("/t/a", f"a{i}")
        pub_b.put("/t/b", f"b{i}")
        sim.step_until(sim.now + 1)
    sim.settle()
    per_pub = {}
    for s in seen:
        per_pub.setdefault(s.ts.node, []).append(s)
    assert sorted(per_pub) == sorted({nodes[0], nodes[1]})
    for samples in per_pub.values():
        assert len(samples) == 20
        assert samples == sorted(samples, key=lambda s: s.ts)


def test_timestamps_are_monotonic_per_node():
    sim, fabric, hub, nodes = star_fabric()
    ws = fabric.open_workspace(nodes[0])
    stamps = [ws.put("/k/a", str(i)) for i in range(50)]
    assert stamps == sorted(stamps)
    assert len(set(stamps)) == 50


# ------------------------------------------------------------- storages

def test_storage_depth_validation():
    sim, fabric, hub, nodes = star_fabric()
    ws = fabric.open_workspace(nodes[0])
    with pytest.raises(InvalidDepth):
        ws.register_storage("/s/**", history_depth=0)


def test_storage_absorbs_matching_puts_lww():
    rng = random.Random(61001)
    sim, fabric, hub, nodes = star_fabric(seed=61)
    store_ws = fabric.open_workspace(nodes[0])
    storage = store_ws.register_storage("/s/**", history_depth=3)
    pubs = [fabric.open_workspace(n) for n in (nodes[1], nodes[2])]
    sim.settle()
    journal = []
    for i in range(100):
        pub = pubs[rng.randrange(2)]
        key = f"/s/{rng.choice('abcd')}/{rng.choice('xy')}"
        if rng.random() < 0.15:
            ts = pub.delete(key)
            journal.append((key, (ts.physical_ms, ts.logical, ts.node), "DELETE", b""))
        else:
            payload = f"v{i}".encode()
            ts = pub.put(key, Value(EncodingTag.RAW, payload))
            journal.append((key, (ts.physical_ms, ts.logical, ts.node), "PUT", payload))
        if rng.random() < 0.3:
            sim.step_until(sim.now + rng.randrange(1, 4))
    sim.settle()
    want = replay_storage(journal)
    got = {k: ((s.ts.physical_ms, s.ts.logical, s.ts.node), s.value.payload) for k, s in storage.table.items()}
    assert got == want


def test_intersecting_storages_both_absorb():
    sim, fabric, hub, nodes = star_fabric()
    s1 = fabric.open_workspace(nodes[0]).register_storage("/f/**")
    s2 = fabric.open_workspace(nodes[1]).register_storage("/f/v1/**")
    sim.settle()
    fabric.open_workspace(nodes[2]).put("/f/v1/speed", "80")
    sim.settle()
    assert "/f/v1/speed" in s1.table
    assert "/f/v1/speed" in s2.table


def test_history_ring_keeps_last_n():
    sim, fabric, hub, nodes = star_fabric()
    ws = fabric.open_workspace(nodes[0])
    storage = ws.register_storage("/h/**", history_depth=2)
    pub = fabric.open_workspace(nodes[1])
    sim.settle()
    for i in range(5):
        pub.put("/h/k", f"v{i}")
        sim.settle()
    hist = storage.history("/h/k")
    assert [as_text(s.value) for s in hist] == ["v3", "v4"]
    assert as_text(storage.table["/h/k"].value) == "v4"


def test_delete_tombstone_beats_older_put():
    sim, fabric, hub, nodes = star_fabric()
    storage = fabric.open_workspace(nodes[0]).register_storage("/d/**")
    pub = fabric.open_workspace(nodes[1])
    sim.settle()
    pub.put("/d/k", "live")
    sim.settle()
    pub.delete("/d/k")
    sim.settle()
    assert "/d/k" not in storage.table
    # a stale sample arriving later (older ts) must not resurrect the key
    from fleetmesh.fabric import Sample
    stale = Sample(parse_key_expr("/d/k"), text_value("zombie"), Timestamp(0, 0, 99), SampleKind.PUT)
    assert storage.absorb(stale) is False
    assert "/d/k" not in storage.table


# ---------------------------------------------------------------- queries

def test_get_returns_stored_value():
    sim, fabric, hub, nodes = star_fabric()
    store = fabric.open_workspace(nodes[0])
    store.register_storage("/demo/**")
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    ws.put("/demo/hello", "Hello world")
    sim.settle()
    result = ws.get("/demo/hello")
    assert not result.truncated
    assert len(result) == 1
    reply = result.replies[0]
    assert reply.origin is ReplyOrigin.STORAGE
    assert as_text(reply.value) == "Hello world"


def test_get_on_unmatched_expr_is_empty():
    sim, fabric, hub, nodes = star_fabric()
    fabric.open_workspace(nodes[0]).register_storage("/demo/**")
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    result = ws.get("/nothing/here")
    assert result.replies == [] and not result.truncated


def test_fleet_query_one_reply_per_vehicle():
    sim = Sim(77)
    hub = sim.add_node(NodeMode.ROUTER)
    cloud = sim.add_node(NodeMode.CLIENT)
    sim.add_link(hub, cloud, 20)
    vehicles = []
    for _ in range(5):
        v = sim.add_node(NodeMode.CLIENT)
        sim.add_link(hub, v, 5)
        vehicles.append(v)
    sim.settle()
    fabric = Fabric(sim)
    store = fabric.open_workspace(cloud).register_storage("/operator-1/fleet/**")
    sim.settle()
    for i, v in enumerate(vehicles):
        ws = fabric.open_workspace(v)
        ws.put(f"/operator-1/fleet/city/v{i}/engine/status", f"ok{i}")
    sim.settle()
    ws = fabric.open_workspace(vehicles[0])
    result = ws.get("/operator-1/fleet/city/**/engine/status")
    assert not result.truncated
    keys = [r.key.text for r in result.replies]
    assert keys == [f"/operator-1/fleet/city/v{i}/engine/status" for i in range(5)]
    want = {f"/operator-1/fleet/city/v{i}/engine/status" for i in range(5)}
    assert {r.key.text for r in result.replies} == want


def test_eval_receives_selector_properties():
    sim, fabric, hub, nodes = star_fabric()
    calls = []

    def greeter(key, props):
        calls.append((key.text, dict(props)))
        return text_value(f"Hello {props.get('name', 'anonymous')}!")

    fabric.open_workspace(nodes[0]).register_eval("/demo/hello", greeter)
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    result = ws.get("/demo/hello?(name=World)")
    assert calls == [("/demo/hello", {"name": "World"})]
    assert [as_text(r.value) for r in result.replies] == ["Hello World!"]
    assert result.replies[0].origin is ReplyOrigin.EVAL


def test_eval_wildcard_scope_gets_concrete_query_key():
    sim, fabric, hub, nodes = star_fabric()
    seen = []
    fabric.open_workspace(nodes[0]).register_eval("/a/**", lambda k, p: (seen.append((k.text, dict(p))), text_value("r"))[1])
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    result = ws.get("/a/b/c")
    assert seen == [("/a/b/c", {})]
    assert [r.key.text for r in result.replies] == ["/a/b/c"]


def test_eval_never_invoked_by_put():
    sim, fabric, hub, nodes = star_fabric()
    hits = []
    fabric.open_workspace(nodes[0]).register_eval("/e/**", lambda k, p: (hits.append(1), text_value("x"))[1])
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    ws.put("/e/k", "v")
    sim.settle()
    assert hits == []


def test_eval_beats_storage_for_same_key():
    sim, fabric, hub, nodes = star_fabric()
    ws0 = fabric.open_workspace(nodes[0])
    ws0.register_storage("/demo/**")
    fabric.open_workspace(nodes[1]).register_eval("/demo/hello", lambda k, p: text_value("fresh"))
    ws = fabric.open_workspace(nodes[2])
    sim.settle()
    ws.put("/demo/hello", "stale")
    sim.settle()
    result = ws.get("/demo/hello")
    assert len(result.replies) == 1
    assert result.replies[0].origin is ReplyOrigin.EVAL
    assert as_text(result.replies[0].value) == "fresh"


def test_get_truncates_when_responder_unreachable():
    sim = Sim(83, deadline_ms=4000)
    r = sim.add_node(NodeMode.ROUTER)
    q = sim.add_node(NodeMode.CLIENT)
    s1 = sim.add_node(NodeMode.CLIENT)
    s2 = sim.add_node(NodeMode.CLIENT)
    sim.add_link(r, q, 5)
    sim.add_link(r, s1, 5)
    cut = sim.add_link(r, s2, 5)
    sim.settle()
    fabric = Fabric(sim)
    fabric.open_workspace(s1).register_storage("/x/**")
    fabric.open_workspace(s2).register_storage("/x/**")
    ws = fabric.open_workspace(q)
    sim.settle()
    ws.put("/x/k", "v")
    sim.settle()
    sim.set_link_status(cut, LinkStatus.DOWN)
    sim.settle()
    result = ws.get("/x/k")
    assert result.truncated
    assert [as_text(r_.value) for r_ in result.replies] == ["v"]


# ----------------------------------------------------------- consolidation

def ts(p, l=0, n=0):
    return Timestamp(p, l, n)


def mk_reply(key, ts_, origin, text="x"):
    return Reply(parse_key_expr(key), text_value(text), ts_, origin)


def test_consolidate_max_ts_wins():
    old = mk_reply("/k", ts(5), ReplyOrigin.STORAGE, "old")
    new = mk_reply("/k", ts(9), ReplyOrigin.STORAGE, "new")
    out = consolidate_replies([old, new])
    assert [as_text(r.value) for r in out] == ["new"]


def test_consolidate_eval_beats_storage():
    st = mk_reply("/k", ts(9), ReplyOrigin.STORAGE, "stored")
    ev = mk_reply("/k", ts(5), ReplyOrigin.EVAL, "computed")
    out = consolidate_replies([st, ev])
    assert [r.origin for r in out] == [ReplyOrigin.EVAL]


def test_consolidate_matches_brute_force_oracle():
    rng = random.Random(61002)
    for _ in range(300):
        replies = []
        raw = []
        for _ in range(rng.randrange(0, 15)):
            key = "/k/" + rng.choice("abc")
            origin = rng.choice([ReplyOrigin.STORAGE, ReplyOrigin.EVAL])
            stamp = Timestamp(rng.randrange(5), rng.randrange(3), rng.randrange(4))
            payload = str(rng.randrange(100))
            replies.append(mk_reply(key, stamp, origin, payload))
            raw.append((key, origin.value, (stamp.physical_ms, stamp.logical, stamp.node), payload))
        got = consolidate_replies(replies)
        want = consolidate(raw)
        assert [(r.key.text, r.origin.value, (r.ts.physical_ms, r.ts.logical, r.ts.node)) for r in got] == [
            (k, o, t) for k, o, t, _ in want
        ]


def test_delete_samples_reach_subscribers():
    sim, fabric, hub, nodes = star_fabric()
    sub = fabric.open_workspace(nodes[0]).subscribe("/demo/**")
    ws = fabric.open_workspace(nodes[1])
    sim.settle()
    ws.put("/demo/k", "v")
    ws.delete("/demo/k")
    sim.settle()
    assert [s.kind for s in sub.queue] == [SampleKind.PUT, SampleKind.DELETE]
    assert sub.queue[1].value.payload == b""
