"""Distributed data workspace over the simulated WAN.

A Fabric binds to one Sim and multiplexes every node's traffic. Sessions
(workspaces) put and delete values under concrete keys, subscribe to key
expressions, register storages (last-writer-wins tables with bounded
history) and evals (pull-time computations), and issue selector queries
whose replies are consolidated per key.

Consistency and ordering:
- Every sample carries a hybrid logical clock timestamp (physical ms,
  logical counter, node id), totally ordered and per-node monotonic.
- A put sends one message per matching destination node; the receiver
  fans out to all of its matching subscriptions and storages. Transport
  ordering per (publisher, channel) plus monotonic clocks give
  per-publisher timestamp order at every subscriber.
- Storages apply last-writer-wins by timestamp with delete tombstones,
  so arrival order never changes the final table.
- get() drives the simulator until every queried responder has answered
  with a terminal marker, the responder is proven unreachable, or the
  deadline passes; partial results carry a truncated flag. Reply
  consolidation keeps one reply per key: EVAL beats STORAGE, then the
  maximum timestamp wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

from .codec import EncodingTag, Value, text_value
from .keyspace import KeyExpr, Selector, key_intersects, key_matches, parse_key_expr, parse_selector
from .netsim import DeclKind, Delivery, MsgStatus, Sim

CH_DATA = 0
CH_QUERY = 1

FABRIC_CHANNELS = (CH_DATA, CH_QUERY)


class FabricError(Exception):
    pass


class NonConcreteKey(FabricError):
    pass


class InvalidDepth(FabricError):
    pass


@dataclass(frozen=True, order=True)
class Timestamp:
    physical_ms: int
    logical: int
    node: int

    @property
    def text(self) -> str:
        return f"{self.physical_ms}.{self.logical}.{self.node}"


class SampleKind(Enum):
    PUT = "PUT"
    DELETE = "DELETE"


class ReplyOrigin(Enum):
    STORAGE = "STORAGE"
    EVAL = "EVAL"


@dataclass(frozen=True)
class Sample:
    key: KeyExpr
    value: Value
    ts: Timestamp
    kind: SampleKind


@dataclass(frozen=True)
class Reply:
    key: KeyExpr
    value: Value
    ts: Timestamp
    origin: ReplyOrigin


@dataclass
class GetResult:
    replies: list[Reply]
    truncated: bool

    def __iter__(self):
        return iter(self.replies)

    def __len__(self) -> int:
        return len(self.replies)


def consolidate_replies(replies: list[Reply]) -> list[Reply]:
    """One reply per key: EVAL beats STORAGE, then max timestamp; output
    sorted by key text."""
    groups: dict[str, list[Reply]] = {}
    for r in replies:
        groups.setdefault(r.key.text, []).append(r)
    out = []
    for key_text in sorted(groups):
        pool = groups[key_text]
        evals = [r for r in pool if r.origin is ReplyOrigin.EVAL]
        if evals:
            pool = evals
        out.append(max(pool, key=lambda r: r.ts))
    return out


class Subscription:
    """Live subscription; matching samples land in .queue and are passed
    to the sink callback when one is given."""

    def __init__(self, sub_id: int, node: int, expr: KeyExpr, sink, decl) -> None:
        self.id = sub_id
        self.node = node
        self.expr = expr
        self.sink = sink
        self.queue: list[Sample] = []
        self._decl = decl


class StorageDecl:
    """Last-writer-wins table plus a bounded per-key change history."""

    def __init__(self, node: int, scope: KeyExpr, history_depth: int, decl) -> None:
        self.node = node
        self.scope = scope
        self.history_depth = history_depth
        self.table: dict[str, Sample] = {}
        self._tombs: dict[str, Timestamp] = {}
        self._history: dict[str, list[Sample]] = {}
        self._decl = decl

    def _latest_ts(self, key_text: str) -> Optional[Timestamp]:
        live = self.table.get(key_text)
        if live is not None:
            return live.ts
        return self._tombs.get(key_text)

    def absorb(self, sample: Sample) -> bool:
        key_text = sample.key.text
        cur = self._latest_ts(key_text)
        if cur is not None and cur >= sample.ts:
            return False
        if sample.kind is SampleKind.PUT:
            self.table[key_text] = sample
            self._tombs.pop(key_text, None)
        else:
            self.table.pop(key_text, None)
            self._tombs[key_text] = sample.ts
        hist = self._history.setdefault(key_text, [])
        hist.append(sample)
        del hist[: max(0, len(hist) - self.history_depth)]
        return True

    def history(self, key_text: str) -> list[Sample]:
        return list(self._history.get(key_text, ()))


class EvalDecl:
    def __init__(self, node: int, scope: KeyExpr, handler, decl) -> None:
        self.node = node
        self.scope = scope
        self.handler = handler
        self._decl = decl


class _NodeState:
    def __init__(self) -> None:
        self.subs: list[Subscription] = []
        self.storages: list[StorageDecl] = []
        self.evals: list[EvalDecl] = []


class _GetState:
    def __init__(self, qid: int, pending: list[int]) -> None:
        self.qid = qid
        self.pending = set(pending)
        self.msg_ids: dict[int, Optional[int]] = {}
        self.replies: list[Reply] = []
        self.truncated = False


def _coerce_key(path: Union[str, KeyExpr]) -> KeyExpr:
    key = parse_key_expr(path) if isinstance(path, str) else path
    if not key.is_concrete:
        raise NonConcreteKey(f"{key.text} contains wildcards")
    return key


def _coerce_value(value) -> Value:
    if isinstance(value, Value):
        return value
    if isinstance(value, str):
        return text_value(value)
    if isinstance(value, (bytes, bytearray)):
        return Value(EncodingTag.RAW, bytes(value))
    raise TypeError(f"cannot publish {type(value).__name__}")


class Fabric:
    """One per Sim; owns every node's fabric state and dispatch."""

    def __init__(self, sim: Sim) -> None:
        self.sim = sim
        self._nodes: dict[int, _NodeState] = {}
        self._clocks: dict[int, tuple[int, int]] = {}
        self._gets: dict[int, _GetState] = {}
        self._next_sub_id = 1
        self._next_qid = 1
        self._validator: Optional[Callable[[KeyExpr, Value], None]] = None
        self._channel_handlers: dict[tuple[int, int], Callable[[Delivery], None]] = {}

    # ------------------------------------------------------------ plumbing

    def open_workspace(self, node: int) -> "Workspace":
        self.sim.node_mode(node)  # raises UnknownNode
        self._ensure_node(node)
        return Workspace(self, node)

    def set_validator(self, fn: Optional[Callable[[KeyExpr, Value], None]]) -> None:
        self._validator = fn

    def set_channel_handler(self, node: int, channel: int, fn: Callable[[Delivery], None]) -> None:
        if channel in FABRIC_CHANNELS:
            raise FabricError(f"channel {channel} is reserved")
        self._ensure_node(node)
        self._channel_handlers[(node, channel)] = fn

    def _ensure_node(self, node: int) -> _NodeState:
        state = self._nodes.get(node)
        if state is None:
            state = _NodeState()
            self._nodes[node] = state
            self.sim.set_handler(node, lambda d, n=node: self._on_delivery(n, d))
        return state

    def _on_delivery(self, node: int, delivery: Delivery) -> None:
        if delivery.channel in FABRIC_CHANNELS:
            self._dispatch(node, json.loads(delivery.payload.decode()))
            return
        handler = self._channel_handlers.get((node, delivery.channel))
        if handler is not None:
            handler(delivery)

    def _send(self, src: int, dst: int, obj: dict, channel: int) -> Optional[int]:
        if dst == src:
            self.sim.call_at(self.sim.now, lambda: self._dispatch(dst, obj))
            return None
        payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
        return self.sim.send_reliable(src, dst, channel, payload)

    def _trace(self, node: int, event: str, key_text: str, nbytes: int, ts: Timestamp) -> None:
        self.sim.record(f"FAB {self.sim.now} {node} {event} {key_text} {nbytes} {ts.text}")

    # ---------------------------------------------------------------- clock

    def stamp(self, node: int) -> Timestamp:
        """A fresh hybrid-logical timestamp for `node`, without sending."""
        return self._tick_send(node)

    def observe(self, node: int, remote: Timestamp) -> None:
        """Fold a timestamp seen out-of-band into `node`'s clock."""
        self._observe(node, remote)

    def _tick_send(self, node: int) -> Timestamp:
        p, l = self._clocks.get(node, (-1, -1))
        now = self.sim.now
        if now > p:
            p, l = now, 0
        else:
            l += 1
        self._clocks[node] = (p, l)
        return Timestamp(p, l, node)

    def _observe(self, node: int, remote: Timestamp) -> None:
        p, l = self._clocks.get(node, (-1, -1))
        now = self.sim.now
        top = max(p, remote.physical_ms, now)
        if top > p and top > remote.physical_ms:
            self._clocks[node] = (top, 0)
            return
        logical = -1
        if p == top:
            logical = max(logical, l)
        if remote.physical_ms == top:
            logical = max(logical, remote.logical)
        self._clocks[node] = (top, logical + 1)

    # ------------------------------------------------------------- dataplane

    def _data_destinations(self, node: int, key: KeyExpr) -> list[int]:
        dests = set()
        for kind, expr, origin in self.sim.interests(node):
            if origin == node:
                continue
            if kind in (DeclKind.SUB, DeclKind.STORAGE) and key_matches(parse_key_expr(expr), key):
                dests.add(origin)
        state = self._nodes.get(node)
        if state is not None:
            local = any(key_matches(s.expr, key) for s in state.subs) or any(
                key_matches(s.scope, key) for s in state.storages
            )
            if local:
                dests.add(node)
        return sorted(dests)

    def _put(self, node: int, key: KeyExpr, value: Value, kind: SampleKind) -> Timestamp:
        if self._validator is not None and kind is SampleKind.PUT:
            self._validator(key, value)
        ts = self._tick_send(node)
        self._trace(node, kind.value, key.text, len(value.payload), ts)
        obj = {
            "op": "put",
            "key": key.text,
            "kind": kind.value,
            "tag": value.tag.value,
            "data": value.payload.hex(),
            "ts": [ts.physical_ms, ts.logical, ts.node],
        }
        for dst in self._data_destinations(node, key):
            self._send(node, dst, obj, CH_DATA)
        return ts

    def _deliver_sample(self, node: int, sample: Sample) -> None:
        self._observe(node, sample.ts)
        state = self._nodes.get(node)
        if state is None:
            return
        for sub in list(state.subs):
            if key_matches(sub.expr, sample.key):
                self._trace(node, "SUB", sample.key.text, len(sample.value.payload), sample.ts)
                sub.queue.append(sample)
                if sub.sink is not None:
                    sub.sink(sample)
        for storage in state.storages:
            if key_matches(storage.scope, sample.key) and storage.absorb(sample):
                self._trace(node, "STORE", sample.key.text, len(sample.value.payload), sample.ts)

    # ------------------------------------------------------------ queryplane

    def _query_destinations(self, node: int, sel: Selector) -> list[int]:
        dests = set()
        for kind, expr, origin in self.sim.interests(node):
            if origin == node:
                continue
            if kind in (DeclKind.STORAGE, DeclKind.EVAL) and key_intersects(parse_key_expr(expr), sel.key):
                dests.add(origin)
        state = self._nodes.get(node)
        if state is not None:
            local = any(key_intersects(s.scope, sel.key) for s in state.storages) or any(
                key_intersects(e.scope, sel.key) for e in state.evals
            )
            if local:
                dests.add(node)
        return sorted(dests)

    def _answer_query(self, node: int, obj: dict) -> None:
        ts = Timestamp(*obj["ts"])
        self._observe(node, ts)
        sel_key = parse_key_expr(obj["key"])
        props = {k: v for k, v in obj["props"]}
        querier = obj["querier"]
        self._trace(node, "QUERY", obj["key"], 0, ts)
        state = self._nodes.get(node)
        replies: list[tuple[str, Value, Timestamp, ReplyOrigin]] = []
        if state is not None:
            for storage in state.storages:
                if not key_intersects(storage.scope, sel_key):
                    continue
                for key_text in sorted(storage.table):
                    sample = storage.table[key_text]
                    if key_matches(sel_key, sample.key):
                        replies.append((key_text, sample.value, sample.ts, ReplyOrigin.STORAGE))
            for ev in state.evals:
                if not key_intersects(ev.scope, sel_key):
                    continue
                if sel_key.is_concrete:
                    reply_key = sel_key
                elif ev.scope.is_concrete:
                    reply_key = ev.scope
                else:
                    continue  # nowhere concrete to hang the result on
                result = _coerce_value(ev.handler(sel_key, props))
                ev_ts = self._tick_send(node)
                self._trace(node, "EVAL", reply_key.text, len(result.payload), ev_ts)
                replies.append((reply_key.text, result, ev_ts, ReplyOrigin.EVAL))
        for key_text, value, rts, origin in replies:
            self._send(
                node,
                querier,
                {
                    "op": "reply",
                    "qid": obj["qid"],
                    "from": node,
                    "key": key_text,
                    "tag": value.tag.value,
                    "data": value.payload.hex(),
                    "ts": [rts.physical_ms, rts.logical, rts.node],
                    "origin": origin.value,
                },
                CH_QUERY,
            )
        self._send(node, querier, {"op": "final", "qid": obj["qid"], "from": node}, CH_QUERY)

    def _on_reply(self, node: int, obj: dict) -> None:
        st = self._gets.get(obj["qid"])
        if st is None:
            return
        ts = Timestamp(*obj["ts"])
        self._observe(node, ts)
        reply = Reply(
            parse_key_expr(obj["key"]),
            Value(EncodingTag(obj["tag"]), bytes.fromhex(obj["data"])),
            ts,
            ReplyOrigin(obj["origin"]),
        )
        self._trace(node, "REPLY", obj["key"], len(reply.value.payload), ts)
        st.replies.append(reply)

    def _on_final(self, node: int, obj: dict) -> None:
        st = self._gets.get(obj["qid"])
        if st is not None:
            st.pending.discard(obj["from"])

    def _dispatch(self, node: int, obj: dict) -> None:
        op = obj["op"]
        if op == "put":
            sample = Sample(
                parse_key_expr(obj["key"]),
                Value(EncodingTag(obj["tag"]), bytes.fromhex(obj["data"])),
                Timestamp(*obj["ts"]),
                SampleKind(obj["kind"]),
            )
            self._deliver_sample(node, sample)
        elif op == "query":
            self._answer_query(node, obj)
        elif op == "reply":
            self._on_reply(node, obj)
        elif op == "final":
            self._on_final(node, obj)

    def _run_get(self, node: int, sel: Selector) -> GetResult:
        sim = self.sim
        qid = self._next_qid
        self._next_qid += 1
        ts = self._tick_send(node)
        self._trace(node, "GET", sel.text, 0, ts)
        dests = self._query_destinations(node, sel)
        st = _GetState(qid, dests)
        self._gets[qid] = st
        obj = {
            "op": "query",
            "qid": qid,
            "querier": node,
            "key": sel.key.text,
            "props": [list(p) for p in sel.properties],
            "ts": [ts.physical_ms, ts.logical, ts.node],
        }
        for dst in dests:
            st.msg_ids[dst] = self._send(node, dst, obj, CH_QUERY)
        deadline = sim.now + sim.deadline_ms
        try:
            while st.pending:
                for dst in sorted(st.pending):
                    mid = st.msg_ids.get(dst)
                    if mid is not None and sim.message_status(mid) is MsgStatus.UNREACHABLE:
                        st.pending.discard(dst)
                        st.truncated = True
                if not st.pending:
                    break
                t = sim.next_event_time()
                if t is None or t > deadline:
                    if sim.now < deadline:
                        sim.step_until(deadline)
                    st.truncated = True
                    break
                sim.step_until(t)
        finally:
            del self._gets[qid]
        return GetResult(consolidate_replies(st.replies), st.truncated)


class Workspace:
    """A session bound to one node; the user-facing fabric API."""

    def __init__(self, fabric: Fabric, node: int) -> None:
        self.fabric = fabric
        self.node = node
        self.subscriptions: list[Subscription] = []

    def put(self, path: Union[str, KeyExpr], value) -> Timestamp:
        return self.fabric._put(self.node, _coerce_key(path), _coerce_value(value), SampleKind.PUT)

    def delete(self, path: Union[str, KeyExpr]) -> Timestamp:
        return self.fabric._put(
            self.node, _coerce_key(path), Value(EncodingTag.RAW, b""), SampleKind.DELETE
        )

    def subscribe(self, expr: Union[str, KeyExpr], sink=None) -> Subscription:
        key = parse_key_expr(expr) if isinstance(expr, str) else expr
        decl = self.fabric.sim.declare(self.node, DeclKind.SUB, key.text)
        sub = Subscription(self.fabric._next_sub_id, self.node, key, sink, decl)
        self.fabric._next_sub_id += 1
        self.fabric._ensure_node(self.node).subs.append(sub)
        self.subscriptions.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        state = self.fabric._ensure_node(self.node)
        if sub in state.subs:
            state.subs.remove(sub)
        if sub in self.subscriptions:
            self.subscriptions.remove(sub)
        self.fabric.sim.withdraw(sub._decl)

    def register_storage(self, scope: Union[str, KeyExpr], history_depth: int = 1) -> StorageDecl:
        if history_depth < 1:
            raise InvalidDepth(f"history_depth must be >= 1, got {history_depth}")
        key = parse_key_expr(scope) if isinstance(scope, str) else scope
        decl = self.fabric.sim.declare(self.node, DeclKind.STORAGE, key.text)
        storage = StorageDecl(self.node, key, history_depth, decl)
        self.fabric._ensure_node(self.node).storages.append(storage)
        return storage

    def register_eval(self, scope: Union[str, KeyExpr], handler) -> EvalDecl:
        key = parse_key_expr(scope) if isinstance(scope, str) else scope
        decl = self.fabric.sim.declare(self.node, DeclKind.EVAL, key.text)
        ev = EvalDecl(self.node, key, handler, decl)
        self.fabric._ensure_node(self.node).evals.append(ev)
        return ev

    def get(self, selector: Union[str, Selector]) -> GetResult:
        sel = parse_selector(selector) if isinstance(selector, str) else selector
        return self.fabric._run_get(self.node, sel)


def open_workspace(fabric: Fabric, node: int) -> Workspace:
    return fabric.open_workspace(node)
