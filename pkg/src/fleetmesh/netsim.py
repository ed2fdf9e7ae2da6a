"""Deterministic discrete-event WAN simulator.

Topology is nodes (CLIENT, PEER or ROUTER) joined by bidirectional links
with integer latency, a loss probability and an MTU. On top of that the
module provides link-state routing with equal-cost load balancing,
interest-declaration flooding, and reliable ordered message delivery with
per-hop fragmentation.

Design decisions, in brief:
- Single event queue ordered by (time, insertion sequence); all node and
  link state machines are handlers invoked by it. One seeded RNG drives
  loss draws, so identical seeds and call sequences replay identically.
- Reliability is per-hop ARQ (Go-Back-N, cumulative acks, timeout 4x the
  link latency, unbounded retries while the link is up). Every frame kind
  except ACK rides the sequenced stream.
- Messages move hop by hop under custody: each hop reassembles the full
  payload, picks the next hop from its own link-state view, re-fragments
  for that link's MTU and releases its copy only when the transfer is
  fully acknowledged. The message id never changes end to end.
- The destination resequences per (origin, channel), so delivery is
  exactly once and in send order for each (src, dst, channel).
- Forwarding eligibility: ROUTERs forward anything, a PEER forwards only
  traffic whose origin and destination are both its direct neighbors, a
  CLIENT never forwards third-party traffic. Control refloods and digest
  contents obey the same rule, so reachability knowledge never exceeds
  data-plane usability.
- A message with no usable route parks at its current custodian; any
  link-state change retries it. If it is still parked when its deadline
  passes (default 30 s of sim time) it is dropped as UNREACHABLE and its
  sequence slot is voided at the destination so later traffic flows.
- Equal-cost next hops are used round-robin per (origin, dst, channel),
  advancing once per message at each custodian.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

MIN_MTU = 64
ARQ_WINDOW = 32
DEFAULT_DEADLINE_MS = 30_000


class NetError(Exception):
    pass


class UnknownNode(NetError):
    pass


class DuplicateLink(NetError):
    pass


class BadLinkParams(NetError):
    pass


class InvalidSend(NetError):
    pass


class FragmentError(NetError):
    pass


class IncompleteFragmentSet(FragmentError):
    pass


class IndexOutOfRange(FragmentError):
    pass


class NodeMode(Enum):
    CLIENT = "CLIENT"
    PEER = "PEER"
    ROUTER = "ROUTER"


class LinkStatus(Enum):
    UP = "UP"
    DOWN = "DOWN"


class FrameKind(Enum):
    DATA = "DATA"
    ACK = "ACK"
    LSA = "LSA"
    HELLO = "HELLO"
    DIGEST = "DIGEST"


class MsgStatus(Enum):
    PENDING = "PENDING"
    DELIVERED = "DELIVERED"
    UNREACHABLE = "UNREACHABLE"


class DeclKind(Enum):
    SUB = "SUB"
    STORAGE = "STORAGE"
    EVAL = "EVAL"


@dataclass
class Link:
    link_id: int
    a: int
    b: int
    latency_ms: int
    loss_prob: float
    mtu_bytes: int
    status: LinkStatus = LinkStatus.UP
    epoch: int = 0

    def other(self, node: int) -> int:
        return self.b if node == self.a else self.a


@dataclass(frozen=True)
class Frame:
    """Wire unit. src/dst are end to end for DATA, hop endpoints for
    control. seq is the end-to-end message sequence (0 for control);
    link-level ARQ numbering travels outside the frame."""

    src: int
    dst: int
    channel: int
    seq: int
    frag: Optional[tuple[int, int, int]]  # (msg_id, index, total)
    kind: FrameKind
    payload: bytes


@dataclass(frozen=True)
class Declaration:
    kind: DeclKind
    expr: str
    origin: int
    decl_id: int


@dataclass(frozen=True)
class Delivery:
    time: int
    msg_id: int
    src: int
    dst: int
    channel: int
    payload: bytes
    status: MsgStatus


# ------------------------------------------------------------ fragmentation

def fragment_payload(
    payload: bytes,
    mtu: int,
    *,
    msg_id: int = 0,
    src: int = 0,
    dst: int = 0,
    channel: int = 0,
    seq: int = 0,
    kind: FrameKind = FrameKind.DATA,
) -> list[Frame]:
    """Slice payload into ceil(len/mtu) frames; an empty payload still
    produces one frame so sequencing has something to ride on."""
    if mtu < MIN_MTU:
        raise BadLinkParams(f"mtu {mtu} below minimum {MIN_MTU}")
    total = max(1, math.ceil(len(payload) / mtu))
    frames = []
    for i in range(total):
        piece = payload[i * mtu : (i + 1) * mtu]
        frames.append(Frame(src, dst, channel, seq, (msg_id, i, total), kind, piece))
    return frames


def reassemble(frames: list[Frame]) -> bytes:
    if not frames:
        raise IncompleteFragmentSet("no frames")
    if any(f.frag is None for f in frames):
        raise IncompleteFragmentSet("unfragmented frame in set")
    msg_ids = {f.frag[0] for f in frames}
    totals = {f.frag[2] for f in frames}
    if len(msg_ids) != 1 or len(totals) != 1:
        raise IncompleteFragmentSet("frames from more than one message")
    total = totals.pop()
    by_index: dict[int, bytes] = {}
    for f in frames:
        index = f.frag[1]
        if index < 0 or index >= total:
            raise IndexOutOfRange(f"index {index} outside 0..{total - 1}")
        if index in by_index:
            raise IncompleteFragmentSet(f"duplicate index {index}")
        by_index[index] = f.payload
    if len(by_index) != total:
        missing = sorted(set(range(total)) - set(by_index))
        raise IncompleteFragmentSet(f"missing indices {missing}")
    return b"".join(by_index[i] for i in range(total))


# ---------------------------------------------------------- link-state view

@dataclass(frozen=True)
class LsaEntry:
    seq: int
    mode: NodeMode
    neighbors: tuple[tuple[int, int], ...]  # (neighbor, latency), sorted


class LinkStateDB:
    """Per-node view of the topology, merged from flooded LSAs."""

    def __init__(self) -> None:
        self.entries: dict[int, LsaEntry] = {}

    def update(self, origin: int, entry: LsaEntry) -> bool:
        cur = self.entries.get(origin)
        if cur is not None and cur.seq >= entry.seq:
            return False
        self.entries[origin] = entry
        return True

    def adjacency(self) -> dict[int, list[tuple[int, int]]]:
        # two-way check: the edge exists only if both endpoints list it
        adj: dict[int, list[tuple[int, int]]] = {}
        for origin, entry in self.entries.items():
            for nbr, lat in entry.neighbors:
                other = self.entries.get(nbr)
                if other is not None and any(n == origin for n, _ in other.neighbors):
                    adj.setdefault(origin, []).append((nbr, lat))
        for lst in adj.values():
            lst.sort()
        return adj

    def modes(self) -> dict[int, NodeMode]:
        return {origin: e.mode for origin, e in self.entries.items()}


class RoutingTable:
    """Shortest-path next hops derived from one LinkStateDB.

    Transit eligibility depends on the traffic's (origin, dst) pair, so
    distance maps are computed per pair: ROUTERs always transit, PEERs
    only between two direct neighbors, CLIENTs never.
    """

    def __init__(self, db: LinkStateDB) -> None:
        self._adj = db.adjacency()
        self._modes = db.modes()
        self._dist: dict[tuple[int, int], dict[int, int]] = {}

    def _allowed(self, x: int, origin: int, dst: int) -> bool:
        if x == origin or x == dst:
            return True
        mode = self._modes.get(x)
        if mode is NodeMode.ROUTER:
            return True
        if mode is NodeMode.PEER:
            nbrs = {n for n, _ in self._adj.get(x, ())}
            return origin in nbrs and dst in nbrs
        return False

    def _dist_to(self, origin: int, dst: int) -> dict[int, int]:
        key = (origin, dst)
        cached = self._dist.get(key)
        if cached is not None:
            return cached
        dist = {dst: 0}
        heap = [(0, dst)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, 1 << 60):
                continue
            for v, w in self._adj.get(u, ()):
                if not self._allowed(v, origin, dst):
                    continue
                nd = d + w
                if nd < dist.get(v, 1 << 60):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist[key] = dist
        return dist

    def next_hops(self, node: int, dst: int, origin: Optional[int] = None) -> tuple[int, ...]:
        if origin is None:
            origin = node
        if node == dst:
            return ()
        dist = self._dist_to(origin, dst)
        here = dist.get(node)
        if here is None:
            return ()
        hops = [
            v
            for v, w in self._adj.get(node, ())
            if self._allowed(v, origin, dst) and v in dist and w + dist[v] == here
        ]
        return tuple(sorted(hops))

    def node_table(self, node: int) -> dict[int, tuple[int, ...]]:
        table = {}
        for dst in sorted(self._modes):
            if dst == node:
                continue
            hops = self.next_hops(node, dst)
            if hops:
                table[dst] = hops
        return table


def compute_routes(db: LinkStateDB) -> RoutingTable:
    return RoutingTable(db)


# ------------------------------------------------------------- node innards

class _Reseq:
    __slots__ = ("expected", "buffer", "voids")

    def __init__(self) -> None:
        self.expected = 0
        self.buffer: dict[int, tuple[int, bytes]] = {}  # seq -> (msg_id, payload)
        self.voids: set[int] = set()


class _Node:
    def __init__(self, node_id: int, mode: NodeMode) -> None:
        self.id = node_id
        self.mode = mode
        self.neighbors: dict[int, int] = {}  # neighbor id -> link id
        self.lsdb = LinkStateDB()
        self.lsa_seq = 0
        self.routes: Optional[RoutingTable] = None
        self.decl_seq = 0
        # (origin, decl_id) -> (kind, expr, active); inactive = tombstone
        self.interest: dict[tuple[int, int], tuple[DeclKind, str, bool]] = {}
        self.custody: dict[int, Optional[int]] = {}  # msg_id -> link id or None
        self.parked: list[int] = []
        self.rr: dict[tuple[int, int, int], int] = {}
        self.reseq: dict[tuple[int, int], _Reseq] = {}
        self.send_seq: dict[tuple[int, int], int] = {}
        self.handler: Optional[Callable[[Delivery], None]] = None

    def invalidate_routes(self) -> None:
        self.routes = None

    def routing(self) -> RoutingTable:
        if self.routes is None:
            self.routes = RoutingTable(self.lsdb)
        return self.routes


class _ArqSender:
    __slots__ = ("queue", "buffer", "base", "next_seq", "timer_gen", "timer_armed")

    def __init__(self) -> None:
        self.queue: deque[tuple[Frame, Optional[int], bool]] = deque()
        self.buffer: "OrderedDict[int, tuple[Frame, Optional[int], bool]]" = OrderedDict()
        self.base = 0
        self.next_seq = 0
        self.timer_gen = 0
        self.timer_armed = False


class _ArqRecv:
    __slots__ = ("expected", "acc")

    def __init__(self) -> None:
        self.expected = 0
        self.acc: list[Frame] = []


@dataclass
class _MsgRec:
    msg_id: int
    src: int
    dst: int
    channel: int
    seq: int
    payload: bytes
    deadline: int
    status: MsgStatus = MsgStatus.PENDING
    parked_at: Optional[int] = None
    path: list[int] = field(default_factory=list)


# -------------------------------------------------------------------- sim

class Sim:
    """The simulator; owns every node, link and pending event."""

    def __init__(
        self,
        seed: int,
        *,
        deadline_ms: int = DEFAULT_DEADLINE_MS,
        window: int = ARQ_WINDOW,
        tracing: bool = True,
    ) -> None:
        self.rng = random.Random(seed)
        self.deadline_ms = deadline_ms
        self.window = window
        self.tracing = tracing
        self.trace_lines: list[str] = []
        self.delivered: list[Delivery] = []
        self._now = 0
        self._eventq: list[tuple[int, int, Callable[[], None]]] = []
        self._eseq = 0
        self._nodes: dict[int, _Node] = {}
        self._links: dict[int, Link] = {}
        self._pairs: dict[frozenset[int], int] = {}
        self._senders: dict[tuple[int, int], _ArqSender] = {}
        self._receivers: dict[tuple[int, int], _ArqRecv] = {}
        self._registry: dict[int, _MsgRec] = {}
        self._next_msg_id = 1

    # ------------------------------------------------------------- plumbing

    @property
    def now(self) -> int:
        return self._now

    def next_event_time(self) -> Optional[int]:
        return self._eventq[0][0] if self._eventq else None

    def record(self, line: str) -> None:
        if self.tracing:
            self.trace_lines.append(line)

    def _schedule(self, t: int, fn: Callable[[], None]) -> None:
        self._eseq += 1
        heapq.heappush(self._eventq, (t, self._eseq, fn))

    def call_at(self, t_ms: int, fn: Callable[[], None]) -> None:
        """Schedule an upper-layer callback inside the event order."""
        if t_ms < self._now:
            raise ValueError(f"cannot schedule at {t_ms}, now is {self._now}")
        self._schedule(t_ms, fn)

    def step_until(self, t_ms: int) -> list[Delivery]:
        if t_ms < self._now:
            raise ValueError(f"time runs forward: {t_ms} < {self._now}")
        start = len(self.delivered)
        while self._eventq and self._eventq[0][0] <= t_ms:
            t, _, fn = heapq.heappop(self._eventq)
            self._now = t
            fn()
        self._now = t_ms
        return self.delivered[start:]

    def settle(self, limit_ms: Optional[int] = None) -> list[Delivery]:
        """Drain the event queue (up to limit_ms if given)."""
        start = len(self.delivered)
        while self._eventq:
            t = self._eventq[0][0]
            if limit_ms is not None and t > limit_ms:
                break
            t, _, fn = heapq.heappop(self._eventq)
            self._now = t
            fn()
        if limit_ms is not None and limit_ms > self._now:
            self._now = limit_ms
        return self.delivered[start:]

    # ------------------------------------------------------------- topology

    def add_node(self, mode: NodeMode = NodeMode.ROUTER) -> int:
        node_id = len(self._nodes)
        self._nodes[node_id] = _Node(node_id, mode)
        return node_id

    def _node(self, node_id: int) -> _Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node {node_id}") from None

    def node_mode(self, node_id: int) -> NodeMode:
        return self._node(node_id).mode

    def add_link(
        self,
        a: int,
        b: int,
        latency_ms: int,
        loss_prob: float = 0.0,
        mtu_bytes: int = 1500,
    ) -> int:
        self._node(a)
        self._node(b)
        if a == b:
            raise BadLinkParams("link endpoints must differ")
        if frozenset((a, b)) in self._pairs:
            raise DuplicateLink(f"link {a}-{b} already exists")
        if latency_ms <= 0:
            raise BadLinkParams(f"latency must be positive, got {latency_ms}")
        if not (0.0 <= loss_prob < 1.0):
            raise BadLinkParams(f"loss_prob must be in [0,1), got {loss_prob}")
        if mtu_bytes < MIN_MTU:
            raise BadLinkParams(f"mtu {mtu_bytes} below minimum {MIN_MTU}")
        link_id = len(self._links)
        link = Link(link_id, a, b, latency_ms, loss_prob, mtu_bytes)
        self._links[link_id] = link
        self._pairs[frozenset((a, b))] = link_id
        self._nodes[a].neighbors[b] = link_id
        self._nodes[b].neighbors[a] = link_id
        self._schedule(self._now, lambda: self._after_link_change(link_id, {}, came_up=True))
        return link_id

    def link(self, link_id: int) -> Link:
        return self._links[link_id]

    def set_link_status(self, link_id: int, status: LinkStatus) -> None:
        link = self._links[link_id]
        if link.status == status:
            return
        link.status = status
        link.epoch += 1
        orphans: dict[int, list[int]] = {}
        for node_id in (link.a, link.b):
            st = self._senders.pop((link_id, node_id), None)
            if st is not None:
                mids: list[int] = []
                for _, mid, _ in list(st.buffer.values()) + list(st.queue):
                    if mid is not None and mid not in mids:
                        mids.append(mid)
                orphans[node_id] = mids
            self._receivers.pop((link_id, node_id), None)
        self._schedule(self._now, lambda: self._after_link_change(link_id, orphans, came_up=(status is LinkStatus.UP)))

    def _after_link_change(self, link_id: int, orphans: dict[int, list[int]], came_up: bool) -> None:
        link = self._links[link_id]
        for node_id in sorted((link.a, link.b)):
            self._originate_lsa(self._nodes[node_id])
        if came_up and link.status is LinkStatus.UP:
            for node_id in sorted((link.a, link.b)):
                self._send_control(node_id, link.other(node_id), FrameKind.HELLO, {"t": "hello"})
        for node_id in sorted(orphans):
            node = self._nodes[node_id]
            for mid in orphans[node_id]:
                rec = self._registry.get(mid)
                if rec is not None and rec.status is MsgStatus.PENDING and mid in node.custody:
                    self._route_custody(node, mid)

    def discover(self, node_id: int) -> None:
        """Re-run the HELLO/DIGEST exchange with every live neighbor."""
        node = self._node(node_id)
        def go() -> None:
            for nbr in sorted(node.neighbors):
                if self._links[node.neighbors[nbr]].status is LinkStatus.UP:
                    self._send_control(node.id, nbr, FrameKind.HELLO, {"t": "hello"})
        self._schedule(self._now, go)

    # ---------------------------------------------------------- link state

    def _originate_lsa(self, node: _Node) -> None:
        node.lsa_seq += 1
        nbrs = tuple(
            sorted(
                (nbr, self._links[lid].latency_ms)
                for nbr, lid in node.neighbors.items()
                if self._links[lid].status is LinkStatus.UP
            )
        )
        entry = LsaEntry(node.lsa_seq, node.mode, nbrs)
        node.lsdb.update(node.id, entry)
        node.invalidate_routes()
        self._flood_lsa(node, node.id, exclude=None)
        self._retry_parked(node)

    def _lsa_obj(self, node: _Node, origin: int) -> dict:
        entry = node.lsdb.entries[origin]
        return {
            "t": "lsa",
            "origin": origin,
            "seq": entry.seq,
            "mode": entry.mode.value,
            "nbrs": [list(p) for p in entry.neighbors],
        }

    def _may_reflood(self, node: _Node, origin: int) -> bool:
        if origin == node.id:
            return True
        if node.mode is NodeMode.ROUTER:
            return True
        if node.mode is NodeMode.PEER:
            return origin in node.neighbors
        return False

    def _up_neighbors(self, node: _Node) -> list[int]:
        return sorted(
            nbr for nbr, lid in node.neighbors.items() if self._links[lid].status is LinkStatus.UP
        )

    def _flood_lsa(self, node: _Node, origin: int, exclude: Optional[int]) -> None:
        if not self._may_reflood(node, origin):
            return
        obj = self._lsa_obj(node, origin)
        for nbr in self._up_neighbors(node):
            if nbr != exclude:
                self._send_control(node.id, nbr, FrameKind.LSA, obj)

    def _on_lsa(self, node: _Node, from_node: int, obj: dict) -> None:
        entry = LsaEntry(
            obj["seq"],
            NodeMode(obj["mode"]),
            tuple((n, l) for n, l in obj["nbrs"]),
        )
        if node.lsdb.update(obj["origin"], entry):
            node.invalidate_routes()
            self._flood_lsa(node, obj["origin"], exclude=from_node)
            self._retry_parked(node)

    # ------------------------------------------------------------ interests

    def declare(self, node_id: int, kind: DeclKind, expr: str) -> Declaration:
        node = self._node(node_id)
        node.decl_seq += 1
        decl = Declaration(kind, expr, node.id, node.decl_seq)
        self._schedule(self._now, lambda: self._apply_and_flood_decl(node, decl, active=True, exclude=None))
        return decl

    def withdraw(self, declaration: Declaration) -> None:
        node = self._node(declaration.origin)
        self._schedule(self._now, lambda: self._apply_and_flood_decl(node, declaration, active=False, exclude=None))

    def propagate_interest(self, declaration: Declaration, active: bool = True) -> None:
        node = self._node(declaration.origin)
        self._schedule(self._now, lambda: self._apply_and_flood_decl(node, declaration, active=active, exclude=None))

    def _apply_decl(self, node: _Node, origin: int, decl_id: int, kind: DeclKind, expr: str, active: bool) -> bool:
        key = (origin, decl_id)
        cur = node.interest.get(key)
        if cur is not None and not cur[2]:
            return False  # tombstone wins regardless of arrival order
        if cur is not None and cur[2] == active:
            return False
        node.interest[key] = (kind, expr, active)
        return True

    def _apply_and_flood_decl(self, node: _Node, decl: Declaration, active: bool, exclude: Optional[int]) -> None:
        if not self._apply_decl(node, decl.origin, decl.decl_id, decl.kind, decl.expr, active):
            return
        if not self._may_reflood(node, decl.origin):
            return
        obj = {
            "t": "declare" if active else "withdraw",
            "origin": decl.origin,
            "decl_id": decl.decl_id,
            "kind": decl.kind.value,
            "expr": decl.expr,
        }
        for nbr in self._up_neighbors(node):
            if nbr != exclude:
                self._send_control(node.id, nbr, FrameKind.DIGEST, obj)

    def _on_decl(self, node: _Node, from_node: int, obj: dict) -> None:
        decl = Declaration(DeclKind(obj["kind"]), obj["expr"], obj["origin"], obj["decl_id"])
        self._apply_and_flood_decl(node, decl, active=(obj["t"] == "declare"), exclude=from_node)

    def interests(self, node_id: int) -> frozenset[tuple[DeclKind, str, int]]:
        node = self._node(node_id)
        return frozenset(
            (kind, expr, origin)
            for (origin, _), (kind, expr, active) in node.interest.items()
            if active
        )

    # ----------------------------------------------------- digest handshake

    def _digest_obj(self, node: _Node) -> dict:
        if node.mode is NodeMode.ROUTER:
            visible = lambda origin: True
        elif node.mode is NodeMode.PEER:
            visible = lambda origin: origin == node.id or origin in node.neighbors
        else:
            visible = lambda origin: origin == node.id
        lsas = [
            {k: v for k, v in self._lsa_obj(node, origin).items() if k != "t"}
            for origin in sorted(node.lsdb.entries)
            if visible(origin)
        ]
        decls = [
            {
                "origin": origin,
                "decl_id": decl_id,
                "kind": kind.value,
                "expr": expr,
                "active": active,
            }
            for (origin, decl_id), (kind, expr, active) in sorted(node.interest.items())
            if visible(origin)
        ]
        return {"t": "digest", "lsas": lsas, "decls": decls}

    def _on_hello(self, node: _Node, from_node: int) -> None:
        self._send_control(node.id, from_node, FrameKind.DIGEST, self._digest_obj(node))

    def _on_digest(self, node: _Node, from_node: int, obj: dict) -> None:
        changed = False
        for lsa in obj["lsas"]:
            entry = LsaEntry(lsa["seq"], NodeMode(lsa["mode"]), tuple((n, l) for n, l in lsa["nbrs"]))
            if node.lsdb.update(lsa["origin"], entry):
                changed = True
                self._flood_lsa(node, lsa["origin"], exclude=from_node)
        for d in obj["decls"]:
            decl = Declaration(DeclKind(d["kind"]), d["expr"], d["origin"], d["decl_id"])
            self._apply_and_flood_decl(node, decl, active=d["active"], exclude=from_node)
        if changed:
            node.invalidate_routes()
            self._retry_parked(node)

    # ------------------------------------------------------------- messages

    def send_reliable(self, src: int, dst: int, channel: int, payload: bytes) -> int:
        node = self._node(src)
        self._node(dst)
        if src == dst:
            raise InvalidSend("src and dst must differ")
        msg_id = self._next_msg_id
        self._next_msg_id += 1
        key = (dst, channel)
        seq = node.send_seq.get(key, 0)
        node.send_seq[key] = seq + 1
        rec = _MsgRec(msg_id, src, dst, channel, seq, bytes(payload), self._now + self.deadline_ms)
        self._registry[msg_id] = rec
        self._schedule(self._now, lambda: self._originate_msg(node, msg_id))
        self._schedule(rec.deadline, lambda: self._deadline_check(msg_id))
        return msg_id

    def message_status(self, msg_id: int) -> MsgStatus:
        return self._registry[msg_id].status

    def message_path(self, msg_id: int) -> tuple[int, ...]:
        return tuple(self._registry[msg_id].path)

    def set_handler(self, node_id: int, fn: Optional[Callable[[Delivery], None]]) -> None:
        self._node(node_id).handler = fn

    def _originate_msg(self, node: _Node, msg_id: int) -> None:
        rec = self._registry[msg_id]
        rec.path.append(node.id)
        node.custody[msg_id] = None
        self._route_custody(node, msg_id)

    def _take_custody(self, node: _Node, frame0: Frame, msg_id: int, payload: bytes) -> None:
        rec = self._registry.get(msg_id)
        if rec is None or rec.status is not MsgStatus.PENDING:
            return
        if node.id == rec.dst:
            rec.path.append(node.id)
            self._arrive_at_dst(node, rec, payload)
            return
        if msg_id in node.custody:
            return  # duplicate copy of an in-flight message
        rec.path.append(node.id)
        node.custody[msg_id] = None
        self._route_custody(node, msg_id)

    def _route_custody(self, node: _Node, msg_id: int) -> None:
        rec = self._registry[msg_id]
        hops = node.routing().next_hops(node.id, rec.dst, rec.src)
        if not hops:
            if self._now >= rec.deadline:
                rec.parked_at = node.id
                self._mark_unreachable(rec)
                return
            node.custody[msg_id] = None
            if msg_id not in node.parked:
                node.parked.append(msg_id)
            rec.parked_at = node.id
            return
        rr_key = (rec.src, rec.dst, rec.channel)
        idx = node.rr.get(rr_key, 0)
        node.rr[rr_key] = idx + 1
        nbr = hops[idx % len(hops)]
        link = self._links[node.neighbors[nbr]]
        node.custody[msg_id] = link.link_id
        rec.parked_at = None
        frames = fragment_payload(
            rec.payload,
            link.mtu_bytes,
            msg_id=msg_id,
            src=rec.src,
            dst=rec.dst,
            channel=rec.channel,
            seq=rec.seq,
        )
        self._enqueue_hop(link, node.id, frames, msg_id)

    def _retry_parked(self, node: _Node) -> None:
        if not node.parked:
            return
        pending = node.parked
        node.parked = []
        for mid in pending:
            if mid in node.custody and self._registry[mid].status is MsgStatus.PENDING:
                self._route_custody(node, mid)

    def _release_custody(self, node: _Node, msg_id: int) -> None:
        node.custody.pop(msg_id, None)

    def _deadline_check(self, msg_id: int) -> None:
        rec = self._registry[msg_id]
        if rec.status is MsgStatus.PENDING and rec.parked_at is not None:
            self._mark_unreachable(rec)

    def _mark_unreachable(self, rec: _MsgRec) -> None:
        rec.status = MsgStatus.UNREACHABLE
        if rec.parked_at is not None:
            holder = self._nodes[rec.parked_at]
            holder.custody.pop(rec.msg_id, None)
            if rec.msg_id in holder.parked:
                holder.parked.remove(rec.msg_id)
            rec.parked_at = None
        self.delivered.append(
            Delivery(self._now, rec.msg_id, rec.src, rec.dst, rec.channel, b"", MsgStatus.UNREACHABLE)
        )
        dst = self._nodes[rec.dst]
        rs = dst.reseq.setdefault((rec.src, rec.channel), _Reseq())
        rs.voids.add(rec.seq)
        self._flush_reseq(dst, rec.src, rec.channel)

    def _arrive_at_dst(self, node: _Node, rec: _MsgRec, payload: bytes) -> None:
        rs = node.reseq.setdefault((rec.src, rec.channel), _Reseq())
        if rec.seq < rs.expected or rec.seq in rs.buffer or rec.seq in rs.voids:
            return
        rs.buffer[rec.seq] = (rec.msg_id, payload)
        self._flush_reseq(node, rec.src, rec.channel)

    def _flush_reseq(self, node: _Node, src: int, channel: int) -> None:
        rs = node.reseq[(src, channel)]
        while True:
            if rs.expected in rs.voids:
                rs.voids.discard(rs.expected)
                rs.expected += 1
                continue
            if rs.expected in rs.buffer:
                msg_id, payload = rs.buffer.pop(rs.expected)
                rs.expected += 1
                rec = self._registry[msg_id]
                rec.status = MsgStatus.DELIVERED
                delivery = Delivery(self._now, msg_id, rec.src, rec.dst, rec.channel, payload, MsgStatus.DELIVERED)
                self.delivered.append(delivery)
                if node.handler is not None:
                    node.handler(delivery)
                continue
            break

    # ------------------------------------------------------------ hop layer

    def _send_control(self, src: int, dst: int, kind: FrameKind, obj: dict) -> None:
        link = self._links[self._nodes[src].neighbors[dst]]
        if link.status is not LinkStatus.UP:
            return
        payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
        msg_id = self._next_msg_id
        self._next_msg_id += 1
        frames = fragment_payload(payload, link.mtu_bytes, msg_id=msg_id, src=src, dst=dst, kind=kind)
        if len(frames) == 1:
            frames = [Frame(src, dst, 0, 0, None, kind, payload)]
        self._enqueue_hop(link, src, frames, None)

    def _enqueue_hop(self, link: Link, sender: int, frames: list[Frame], msg_id: Optional[int]) -> None:
        st = self._senders.setdefault((link.link_id, sender), _ArqSender())
        last = len(frames) - 1
        for i, frame in enumerate(frames):
            st.queue.append((frame, msg_id, i == last))
        self._admit(link, sender)

    def _admit(self, link: Link, sender: int) -> None:
        st = self._senders.get((link.link_id, sender))
        if st is None:
            return
        sent = False
        while st.queue and len(st.buffer) < self.window:
            item = st.queue.popleft()
            seq = st.next_seq
            st.next_seq += 1
            st.buffer[seq] = item
            self._transmit(link, sender, item[0], seq)
            sent = True
        if sent and not st.timer_armed:
            self._arm_timer(link, sender)

    def _arm_timer(self, link: Link, sender: int) -> None:
        st = self._senders.get((link.link_id, sender))
        if st is None:
            return
        st.timer_gen += 1
        st.timer_armed = True
        gen = st.timer_gen
        epoch = link.epoch
        self._schedule(self._now + 4 * link.latency_ms, lambda: self._on_timer(link.link_id, sender, gen, epoch))

    def _on_timer(self, link_id: int, sender: int, gen: int, epoch: int) -> None:
        link = self._links[link_id]
        st = self._senders.get((link_id, sender))
        if st is None or not st.timer_armed or st.timer_gen != gen:
            return
        if link.epoch != epoch or link.status is not LinkStatus.UP:
            return
        for seq, (frame, _, _) in st.buffer.items():
            self._transmit(link, sender, frame, seq)
        self._arm_timer(link, sender)

    def _transmit(self, link: Link, sender: int, frame: Frame, link_seq: Optional[int]) -> None:
        self.record(
            f"NET {self._now} {frame.src} {frame.dst} {frame.kind.value} "
            f"{frame.channel} {frame.seq} {len(frame.payload)}"
        )
        if self.rng.random() < link.loss_prob:
            return
        receiver = link.other(sender)
        epoch = link.epoch
        self._schedule(
            self._now + link.latency_ms,
            lambda: self._on_frame(link.link_id, epoch, sender, receiver, frame, link_seq),
        )

    def _send_ack(self, link: Link, sender: int, ack: int) -> None:
        frame = Frame(sender, link.other(sender), 0, ack, None, FrameKind.ACK, b"")
        self._transmit(link, sender, frame, None)

    def _on_frame(
        self,
        link_id: int,
        epoch: int,
        sender: int,
        receiver: int,
        frame: Frame,
        link_seq: Optional[int],
    ) -> None:
        link = self._links[link_id]
        if link.epoch != epoch or link.status is not LinkStatus.UP:
            return
        if frame.kind is FrameKind.ACK:
            self._on_ack(link, receiver, frame.seq)
            return
        rs = self._receivers.setdefault((link_id, receiver), _ArqRecv())
        if link_seq == rs.expected:
            rs.expected += 1
            self._send_ack(link, receiver, rs.expected - 1)
            self._accept_frame(self._nodes[receiver], sender, link, frame)
        else:
            self._send_ack(link, receiver, rs.expected - 1)

    def _on_ack(self, link: Link, node_id: int, ack: int) -> None:
        st = self._senders.get((link.link_id, node_id))
        if st is None or ack + 1 <= st.base:
            return
        node = self._nodes[node_id]
        while st.buffer:
            seq = next(iter(st.buffer))
            if seq > ack:
                break
            _, msg_id, is_last = st.buffer.pop(seq)
            if is_last and msg_id is not None:
                self._release_custody(node, msg_id)
        st.base = ack + 1
        self._admit(link, node_id)
        if st.buffer:
            self._arm_timer(link, node_id)
        else:
            st.timer_gen += 1
            st.timer_armed = False

    def _accept_frame(self, node: _Node, from_node: int, link: Link, frame: Frame) -> None:
        if frame.frag is None:
            self._dispatch_hop(node, from_node, frame, frame.payload, None)
            return
        rs = self._receivers[(link.link_id, node.id)]
        msg_id, index, total = frame.frag
        if rs.acc and rs.acc[0].frag[0] != msg_id:
            rs.acc = []
        if index != len(rs.acc):
            rs.acc = []
            if index != 0:
                return
        rs.acc.append(frame)
        if len(rs.acc) == total:
            frames = rs.acc
            rs.acc = []
            self._dispatch_hop(node, from_node, frames[0], reassemble(frames), msg_id)

    def _dispatch_hop(self, node: _Node, from_node: int, frame0: Frame, payload: bytes, msg_id: Optional[int]) -> None:
        if frame0.kind is FrameKind.DATA:
            if msg_id is None:
                return
            self._take_custody(node, frame0, msg_id, payload)
            return
        obj = json.loads(payload.decode())
        t = obj["t"]
        if t == "hello":
            self._on_hello(node, from_node)
        elif t == "digest":
            self._on_digest(node, from_node, obj)
        elif t == "lsa":
            self._on_lsa(node, from_node, obj)
        elif t in ("declare", "withdraw"):
            self._on_decl(node, from_node, obj)

    # ----------------------------------------------------------- inspection

    def routes(self, node_id: int) -> RoutingTable:
        return self._node(node_id).routing()

    def lsdb(self, node_id: int) -> LinkStateDB:
        return self._node(node_id).lsdb


def build_sim(seed: int, **kwargs) -> Sim:
    return Sim(seed, **kwargs)
