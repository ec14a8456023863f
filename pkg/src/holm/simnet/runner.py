"""Build a simulated world from a scenario, run it, and derive metrics from the trace."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

from holm.core import PinholeRule, Proto
from holm.errors import ParseError, ScenarioErrors
from holm.simnet.engine import Link, Simulator, Trace
from holm.simnet.hosts import (
    NODE_CLASSES,
    CorrespondentNode,
    Firewall,
    HolmNetwork,
    MobileNode,
    RtpSource,
    attach_stm,
)
from holm.simnet.scenario import NodeKind, ScenarioScript


@dataclass(frozen=True)
class Metrics:
    rtp_sent: int = 0
    rtp_dropped_total: int = 0
    rtp_dropped_after_install: int = 0
    restore_time_ms: int = 0
    stm_messages: int = 0

    def summary(self) -> str:
        return (
            f"rtp_sent={self.rtp_sent} rtp_dropped_total={self.rtp_dropped_total} "
            f"rtp_dropped_after_install={self.rtp_dropped_after_install} "
            f"restore_time_ms={self.restore_time_ms} stm_messages={self.stm_messages}"
        )


def compute_metrics(trace: Trace) -> Metrics:
    """Every metric is a pure function of the trace.

    * rtp_dropped_after_install: FW_BLOCK drops of RTP at a firewall at or after
      that firewall's first PINHOLES_INSTALLED following the first handover.
    * restore_time_ms: over flows still sending after the first handover, the
      largest delay from the handover to the flow's next RTP_RX; 0 without a
      handover, -1 if some flow never recovers.
    """
    records = trace.records
    rtp_sent = sum(1 for r in records if r.kind == "RTP_TX")
    rtp_drops = [r for r in records if r.kind == "DROP" and r.get("app") == "RTP"]
    stm_messages = sum(1 for r in records if r.kind == "STM_TX")
    handover = next((r for r in records if r.kind == "HANDOVER"), None)
    if handover is None:
        return Metrics(rtp_sent, len(rtp_drops), 0, 0, stm_messages)
    t0 = handover.ts
    installed: dict[str, int] = {}
    for r in records:
        if r.kind == "PINHOLES_INSTALLED" and r.ts >= t0:
            installed.setdefault(r.node, r.ts)
    after = sum(
        1
        for r in rtp_drops
        if r.get("reason") == "FW_BLOCK" and r.node in installed and r.ts >= installed[r.node]
    )
    live_flows = []
    for r in records:
        if r.kind == "RTP_TX" and r.ts >= t0 and r.get("flow") not in live_flows:
            live_flows.append(r.get("flow"))
    restore = 0
    for flow in live_flows:
        rx = next((r for r in records if r.kind == "RTP_RX" and r.ts >= t0 and r.get("flow") == flow), None)
        if rx is None:
            restore = -1
            break
        restore = max(restore, rx.ts - t0)
    return Metrics(rtp_sent, len(rtp_drops), after, restore, stm_messages)


@dataclass
class RunResult:
    trace: Trace
    metrics: Metrics
    failures: list[str] = field(default_factory=list)
    world: Optional["World"] = None


class World:
    """All hosts of one run, wired to a simulator."""

    def __init__(self, script: ScenarioScript, seed: int = 0, stm: Optional[bool] = None):
        self.script = script
        self.stm_enabled = script.sim.stm_enabled if stm is None else stm
        self.sim = Simulator(seed, script.sim.time_limit_ms)
        self.net = HolmNetwork(self.sim)
        self.nodes = {}
        for spec in script.nodes.values():
            node = NODE_CLASSES[spec.kind](self.net, spec, script)
            self.nodes[spec.id] = node
            self.net.add_node(node)
            if spec.kind is not NodeKind.MOBILE:
                for loc in spec.addresses.values():
                    self.net.assign(loc, spec.id)
        for ls in script.links:
            self.net.add_link(Link(ls.a, ls.b, ls.latency_ms, ls.drop, ls.loss_rate))
        for node in self.nodes.values():
            if isinstance(node, MobileNode):
                node.setup()
        self._setup_stm()
        self._setup_flows()
        self._setup_events()

    def _setup_stm(self) -> None:
        if not self.stm_enabled:
            return
        hosts = []
        for name, cfg in self.script.stm.items():
            node = self.nodes[name]
            if isinstance(node, Firewall):
                node.enable_stm(cfg)
            else:
                attach_stm(node, cfg)
            hosts.append(node)
        for a in hosts:
            for b in hosts:
                if a is b:
                    continue
                sa = frozenset((a.id, b.id)) in self.script.security_assocs
                a.stm.add_peer(b.node_id, b.stm.locator, security_assoc=sa, serves=b.spec.guards)
        for node in self.nodes.values():
            if isinstance(node, MobileNode):
                node.wait_for_context = bool(hosts) and any(
                    self.net.guard_of(ran) is not None and self.net.guard_of(ran).stm is not None
                    for ran in node.spec.addresses
                )

    def _setup_flows(self) -> None:
        errors = []
        for fs in self.script.flows:
            src = self.nodes[fs.src]
            if not isinstance(src, CorrespondentNode):
                errors.append(ParseError(f"flow {fs.name}: source {fs.src} is not a CORRESPONDENT", fs.line))
                continue
            dst = self.nodes[fs.dst]
            source = RtpSource(src, fs, dst.address)
            src.flows[fs.name] = source
            # pinholes the guarding firewall already holds for the established session
            if isinstance(dst, MobileNode):
                fw = self.net.guard_of(dst.attached)
                if fw is not None:
                    rule = PinholeRule(Proto.UDP, src.address.with_port(0), dst.address.with_port(fs.port))
                    fw.install_rules([rule], "setup")
            source.start()
        if errors:
            raise ScenarioErrors(errors)

    def _setup_events(self) -> None:
        for ev in self.script.events:
            node = self.nodes[ev.node]
            if not isinstance(node, MobileNode):
                raise ScenarioErrors([ParseError(f"{ev.kind} event needs a MOBILE node, got {ev.node}", ev.line)])
            if ev.kind == "handover":
                action = (lambda n=node, e=ev: n.handover(e.source, e.target))
            elif ev.kind == "negotiate":
                action = (lambda n=node, e=ev: n.negotiate(e.target))
            elif ev.kind == "features":
                action = (lambda n=node, e=ev: n.request_features(e.target))
            else:
                action = (lambda n=node, e=ev: n.query_services(e.target))
            self.sim.at(ev.ts, action)

    def run(self) -> RunResult:
        self.sim.run()
        trace = self.sim.trace
        return RunResult(trace, compute_metrics(trace), list(self.net.failures), self)


def run(script: ScenarioScript, seed: int = 0, stm: Optional[bool] = None) -> tuple[Trace, Metrics]:
    result = World(script, seed, stm).run()
    return result.trace, result.metrics


def run_full(script: ScenarioScript, seed: int = 0, stm: Optional[bool] = None) -> RunResult:
    return World(script, seed, stm).run()


def with_link_drops(script: ScenarioScript, a: str, b: str, indices) -> ScenarioScript:
    """Copy of ``script`` whose a-b link drops the given per-link message indices."""
    out = copy.deepcopy(script)
    for link in out.links:
        if {link.a, link.b} == {a, b}:
            link.drop = frozenset(indices)
            return out
    raise KeyError(f"no link {a} - {b}")
