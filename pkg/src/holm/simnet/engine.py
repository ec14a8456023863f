"""Discrete-event core: integer-millisecond clock, event heap, links, routing and the trace."""

from __future__ import annotations

import heapq
import itertools
import json
import random
from dataclasses import dataclass
from typing import Callable, Optional

import networkx as nx

from holm.core import Locator, Proto
from holm.errors import TimeLimitExceeded


class Timer:
    """Handle for a scheduled callback. Cancelled entries stay in the heap and are skipped."""

    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


def _fmt(value) -> str:
    text = str(value)
    if not text or any(c in text for c in ' "=\n'):
        return json.dumps(text)
    return text


@dataclass(frozen=True)
class TraceRecord:
    ts: int
    seq: int
    node: str
    kind: str
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default=None):
        for k, v in self.fields:
            if k == key:
                return v
        return default

    @property
    def detail(self) -> str:
        return " ".join(f"{k}={_fmt(v)}" for k, v in self.fields)

    def to_line(self) -> str:
        head = f"t={self.ts} node={self.node} kind={self.kind}"
        return f"{head} {self.detail}" if self.fields else head

    def to_dict(self) -> dict:
        return {"t": self.ts, "seq": self.seq, "node": self.node, "kind": self.kind, "fields": dict(self.fields)}


class Trace:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def add(self, ts: int, node: str, kind: str, fields: dict) -> TraceRecord:
        rec = TraceRecord(ts, len(self.records), node, kind, tuple((k, str(v)) for k, v in fields.items()))
        self.records.append(rec)
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def select(self, kind: Optional[str] = None, node: Optional[str] = None, **match) -> list[TraceRecord]:
        out = []
        for r in self.records:
            if kind is not None and r.kind != kind:
                continue
            if node is not None and r.node != node:
                continue
            if all(r.get(k) == str(v) for k, v in match.items()):
                out.append(r)
        return out

    def first(self, kind: str, node: Optional[str] = None, **match) -> Optional[TraceRecord]:
        found = self.select(kind, node, **match)
        return found[0] if found else None

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    def to_json(self) -> str:
        return json.dumps({"records": [r.to_dict() for r in self.records]}, indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Trace":
        trace = cls()
        for d in json.loads(text)["records"]:
            trace.records.append(TraceRecord(d["t"], d["seq"], d["node"], d["kind"], tuple(d["fields"].items())))
        return trace


class Simulator:
    def __init__(self, seed: int = 0, time_limit_ms: Optional[int] = None):
        self.now = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self.time_limit_ms = time_limit_ms
        self.trace = Trace()
        self._heap: list = []
        self._seq = itertools.count()

    def at(self, ts: int, fn: Callable[[], None]) -> Timer:
        if ts < self.now:
            raise ValueError(f"cannot schedule in the past ({ts} < {self.now})")
        timer = Timer()
        heapq.heappush(self._heap, (ts, next(self._seq), timer, fn))
        return timer

    def schedule(self, delay_ms: int, fn: Callable[[], None]) -> Timer:
        if delay_ms < 0:
            raise ValueError("negative delay")
        return self.at(self.now + delay_ms, fn)

    def record(self, node: str, kind: str, **fields) -> TraceRecord:
        return self.trace.add(self.now, node, kind, fields)

    @property
    def pending(self) -> int:
        return sum(1 for e in self._heap if not e[2].cancelled)

    def run(self, until: Optional[int] = None) -> None:
        """Process events in (ts, insertion) order until the heap empties or ``until`` is passed."""
        while self._heap:
            ts, _, timer, fn = self._heap[0]
            if until is not None and ts > until:
                return
            heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            if self.time_limit_ms is not None and ts > self.time_limit_ms:
                raise TimeLimitExceeded(f"event at t={ts} beyond the {self.time_limit_ms} ms limit")
            self.now = ts
            fn()


@dataclass(frozen=True)
class Packet:
    app: str  # RTP, SIP, STM, TRIGGER, CTX_READY, CAP, FEATURE, SERVICE
    src: Locator
    dst: Locator
    payload: bytes = b""
    proto: Proto = Proto.UDP
    flow: str = ""
    seq: int = 0

    @property
    def five_tuple(self):
        return (self.proto, self.src, self.dst)

    def text(self) -> str:
        return self.payload.decode("utf-8")


@dataclass
class Link:
    a: str
    b: str
    latency_ms: int
    drop_pattern: frozenset[int] = frozenset()
    loss_rate: float = 0.0
    up: bool = True
    sent: int = 0

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.a, self.b))

    @property
    def name(self) -> str:
        return f"{self.a}-{self.b}"


class Network:
    """Nodes, links and address ownership; routes packets hop by hop over up links."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.nodes: dict = {}
        self.links: dict[frozenset[str], Link] = {}
        self._owners: dict[tuple, str] = {}
        self._graph = nx.Graph()
        self._routes: dict[tuple[str, str], Optional[str]] = {}

    def add_node(self, node) -> None:
        self.nodes[node.id] = node
        self._graph.add_node(node.id)

    def add_link(self, link: Link) -> None:
        self.links[link.key] = link
        if link.up:
            self._graph.add_edge(link.a, link.b, latency=link.latency_ms)
        self._routes.clear()

    def link(self, a: str, b: str) -> Optional[Link]:
        return self.links.get(frozenset((a, b)))

    def set_link_up(self, a: str, b: str, up: bool) -> None:
        link = self.links[frozenset((a, b))]
        link.up = up
        if up:
            self._graph.add_edge(link.a, link.b, latency=link.latency_ms)
        elif self._graph.has_edge(a, b):
            self._graph.remove_edge(a, b)
        self._routes.clear()

    @staticmethod
    def _host_key(loc: Locator) -> tuple:
        return (loc.family, loc.address)

    def assign(self, loc: Locator, node_id: str) -> None:
        self._owners[self._host_key(loc)] = node_id

    def owner(self, loc: Locator) -> Optional[str]:
        return self._owners.get(self._host_key(loc))

    def next_hop(self, at: str, dst: str) -> Optional[str]:
        key = (at, dst)
        if key not in self._routes:
            try:
                path = nx.shortest_path(self._graph, at, dst, weight="latency")
                self._routes[key] = path[1]
            except (nx.NetworkXNoPath, nx.NodeNotFound):
                self._routes[key] = None
        return self._routes[key]

    def send(self, origin: str, packet: Packet) -> None:
        self._forward(origin, packet)

    def _arrive(self, at: str, packet: Packet) -> None:
        node = self.nodes[at]
        if self.owner(packet.dst) == at:
            node.deliver(packet)
            return
        if node.transit(packet):
            self._forward(at, packet)

    def _forward(self, at: str, packet: Packet) -> None:
        dst = self.owner(packet.dst)
        if dst == at:
            self.nodes[at].deliver(packet)
            return
        hop = None if dst is None else self.next_hop(at, dst)
        if hop is None:
            self.sim.record(at, "DROP", reason="NO_ROUTE", **packet_fields(packet))
            return
        self.transmit(self.links[frozenset((at, hop))], at, hop, packet)

    def transmit(self, link: Link, frm: str, to: str, packet: Packet) -> None:
        """Put ``packet`` on ``link``: arrival at now + latency, unless the link drops it."""
        index = link.sent
        link.sent += 1
        lost = index in link.drop_pattern or (link.loss_rate > 0 and self.sim.rng.random() < link.loss_rate)
        if lost:
            self.sim.record(frm, "DROP", reason="LINK_LOSS", link=link.name, index=index, **packet_fields(packet))
            return
        self.sim.schedule(link.latency_ms, lambda: self._arrive(to, packet))


def packet_fields(packet: Packet) -> dict:
    fields = {"app": packet.app, "src": packet.src, "dst": packet.dst}
    if packet.flow:
        fields["flow"] = packet.flow
        fields["seq"] = packet.seq
    return fields

