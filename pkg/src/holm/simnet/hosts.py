"""Simulated hosts. Each node hosts a toolbox; firewalls may also host an STM."""

from __future__ import annotations

from typing import Optional

from holm.core import (
    COMMON,
    MANDATORY,
    Channel,
    ContextBlock,
    ContextType,
    FeatureId,
    Kind,
    Locator,
    NodeId,
    PinholeRule,
    Proto,
    ToolName,
    Trigger,
    decode_kv,
    encode_kv,
    parse_locator,
    pinhole_matches,
)
from holm.errors import MandatoryFeatureUnavailable, NoCommonTool
from holm.profiles import format_profile, parse_descriptor, parse_profile, parse_stacks
from holm.selection import (
    CapabilityProfile,
    negotiate_peer_protocol,
    negotiate_provider_features,
    plan_access_tools,
)
from holm.simnet.engine import Network, Packet, Timer, packet_fields
from holm.simnet.scenario import FlowSpec, NodeKind, NodeSpec, ScenarioScript
from holm.stm import ContextEndpoint, Stm, StmConfig
from holm.toolbox import ModeCommand, Notification, StubTool, ToolEndpoint, Toolbox

SIP_PORT = 5060


class HolmNetwork(Network):
    """The network plus the lookups hosts need: guarding firewalls, the SIP server, failure log."""

    def __init__(self, sim):
        super().__init__(sim)
        self.failures: list[str] = []

    def guard_of(self, ran: str) -> Optional["Firewall"]:
        for node in self.nodes.values():
            if node.kind is NodeKind.FIREWALL and ran in node.spec.guards:
                return node
        return None

    def sip_server(self) -> Optional["SipServer"]:
        for node in self.nodes.values():
            if node.kind is NodeKind.SIP_SERVER:
                return node
        return None


class SimNode:
    kind: NodeKind

    def __init__(self, net: Network, spec: NodeSpec, script: ScenarioScript):
        self.net = net
        self.sim = net.sim
        self.spec = spec
        self.script = script
        self.id = spec.id
        self.node_id = NodeId(spec.id)
        self.stacks = parse_stacks(spec.stacks)
        self.toolbox = Toolbox(self.id, clock=lambda: self.sim.now, on_record=self._toolbox_record)
        self.ports: dict[int, object] = {}
        self.stm: Optional[Stm] = None
        for tok in spec.tools:
            desc = parse_descriptor(tok, self.stacks)
            reg = self.toolbox.register_tool(desc, self.make_tool(desc))
            self.toolbox.set_mode(reg.handle, ModeCommand.INIT)
            self.toolbox.set_mode(reg.handle, ModeCommand.RUN)

    def make_tool(self, desc) -> ToolEndpoint:
        return StubTool()

    @property
    def address(self) -> Locator:
        return self.spec.address

    def owns(self, loc: Locator) -> bool:
        return self.net.owner(loc) == self.id

    def profile(self) -> CapabilityProfile:
        tools = frozenset(r.descriptor for r in self.toolbox.registrations if r.descriptor.tool is not ToolName.STM)
        return CapabilityProfile(self.node_id, tools, self.stacks)

    def record(self, kind: str, **fields):
        return self.sim.record(self.id, kind, **fields)

    def _toolbox_record(self, rec) -> None:
        if rec.kind == "PUBLISH":
            self.record("TRIGGER", channel=rec.fields["channel"], trigger=rec.fields["kind"])
        elif rec.kind.startswith("WARN"):
            self.record(rec.kind, **rec.fields)

    def send(self, packet: Packet) -> None:
        self.net.send(self.id, packet)

    def send_app(self, app: str, dst: Locator, payload: bytes, port: int = 0) -> None:
        self.send(Packet(app, self.address.with_port(port), dst.with_port(port), payload))

    def transit(self, packet: Packet) -> bool:
        return True

    def deliver(self, packet: Packet) -> None:
        handler = getattr(self, "on_" + packet.app.lower(), None)
        if packet.app == "STM" and packet.dst.port in self.ports:
            self.ports[packet.dst.port](packet.payload, packet.src)
        elif handler is not None:
            handler(packet)
        else:
            self.record("DROP", reason="NO_LISTENER", **packet_fields(packet))

    # capability exchange, shared by every node kind

    def on_cap(self, packet: Packet) -> None:
        kind, _, body = packet.payload.partition(b"\n")
        remote = parse_profile(body.decode("utf-8"))
        if kind == b"OFFER":
            self.record("CAP_OFFER_RX", peer=remote.node)
            self.send_app("CAP", packet.src, b"ANSWER\n" + format_profile(self.profile()).encode())
        else:
            self.on_cap_answer(remote)

    def on_cap_answer(self, remote: CapabilityProfile) -> None:
        self.record("DROP", reason="UNSOLICITED", app="CAP")


# ---- STM transport binding ---------------------------------------------------


class NodeTransport:
    """Carries STM datagrams as simulated packets from one node."""

    def __init__(self, node: SimNode):
        self.node = node

    def now(self) -> int:
        return self.node.sim.now

    def send(self, src: Locator, dst: Locator, data: bytes) -> None:
        self.node.send(Packet("STM", src, dst, data))

    def call_later(self, delay_ms: int, fn) -> Timer:
        return self.node.sim.schedule(delay_ms, fn)

    def listen(self, port: int, handler) -> None:
        self.node.ports[port] = handler

    def close(self, port: int) -> None:
        self.node.ports.pop(port, None)


def attach_stm(node: SimNode, config: StmConfig) -> Stm:
    stm = Stm(node.node_id, node.toolbox, NodeTransport(node), node.address)
    stm.trace = lambda kind, **f: node.record(kind, **f)
    stm.init(config)
    node.toolbox.set_mode(stm.registration.handle, ModeCommand.RUN)
    node.stm = stm
    return stm


# ---- mobile node ---------------------------------------------------------------


class SipTool(ToolEndpoint):
    """SIP-lite user agent on the mobile: re-invites every correspondent, then registers."""

    def __init__(self, mobile: "MobileNode"):
        super().__init__()
        self.mobile = mobile
        self.pending: Optional[Locator] = None
        self.fallback: Optional[Timer] = None

    def on_trigger(self, trigger: Trigger) -> None:
        m = self.mobile
        if trigger.kind == Kind.HANDOVER_DONE:
            new = m.address
            if m.wait_for_context:
                self.pending = new
                self.fallback = m.sim.schedule(m.script.sim.reinvite_fallback_ms, self._fallback)
            else:
                m.signal(new)
        elif trigger.kind == Kind.CONTEXT_READY and self.pending is not None:
            self.fallback.cancel()
            new, self.pending = self.pending, None
            m.signal(new)

    def _fallback(self) -> None:
        if self.pending is not None:
            new, self.pending = self.pending, None
            self.mobile.record("SIP_FALLBACK")
            self.mobile.signal(new)

    def on_query(self, key):
        if key == "pending":
            return int(self.pending is not None)
        return super().on_query(key)


class MobileNode(SimNode):
    kind = NodeKind.MOBILE

    def __init__(self, net, spec, script):
        self.attached = spec.attach
        super().__init__(net, spec, script)
        self.wait_for_context = False

    def make_tool(self, desc):
        if desc.tool is ToolName.SIP:
            return SipTool(self)
        return StubTool()

    @property
    def address(self) -> Locator:
        return self.spec.addresses[self.attached]

    def setup(self) -> None:
        for ran in self.spec.addresses:
            link = self.net.link(self.id, ran)
            if link is not None and ran != self.attached:
                self.net.set_link_up(self.id, ran, False)
        self.net.assign(self.address, self.id)

    def handover(self, old_ran: str, new_ran: str) -> None:
        old = self.spec.addresses[old_ran]
        new = self.spec.addresses[new_ran]
        self.net.set_link_up(self.id, old_ran, False)
        self.net.set_link_up(self.id, new_ran, True)
        self.attached = new_ran
        self.net.assign(new, self.id)
        self.net.assign(old, old_ran)
        self.net.nodes[old_ran].stale.add(old)
        self.record("HANDOVER", old=old_ran, new=new_ran, prev=old, addr=new)
        info = {"mn": self.id, "prev": old, "new": new, "prev_ran": old_ran, "new_ran": new_ran}
        self.toolbox.publish_trigger(Trigger(COMMON, Kind.HANDOVER_DONE, encode_kv(info), self.sim.now))
        if self.wait_for_context:
            fw = self.net.guard_of(new_ran)
            self.record("TRIGGER_TX", dst=fw.id, trigger="HANDOVER_DONE")
            self.send_app("TRIGGER", fw.address, encode_kv(info))

    def deliver(self, packet: Packet) -> None:
        if not self.owns(packet.dst):
            self.record("DROP", reason="DETACHED", **packet_fields(packet))
            return
        super().deliver(packet)

    def on_rtp(self, packet: Packet) -> None:
        self.record("RTP_RX", flow=packet.flow, seq=packet.seq, src=packet.src)

    def on_ctx_ready(self, packet: Packet) -> None:
        self.record("CONTEXT_READY", src=packet.src)
        self.toolbox.publish_trigger(Trigger(COMMON, Kind.CONTEXT_READY, packet.payload, self.sim.now))

    def signal(self, new: Locator) -> None:
        """Re-invite each correspondent (flow order), then register, ``sip_gap_ms`` apart."""
        gap = self.script.sim.sip_gap_ms
        steps = []
        for flow in self.script.flows:
            if flow.dst == self.id:
                steps.append(("REINVITE", flow))
        steps.append(("REGISTER", None))
        for i, (method, flow) in enumerate(steps):
            self.sim.schedule(i * gap, lambda m=method, f=flow: self._sip(m, f, new))

    def _sip(self, method: str, flow: Optional[FlowSpec], new: Locator) -> None:
        if method == "REINVITE":
            peer = self.net.nodes[flow.src]
            body = encode_kv({"method": method, "call": flow.name, "addr": new.with_port(flow.port)})
            self.record("SIP_REINVITE", peer=peer.id, call=flow.name, addr=new.with_port(flow.port))
        else:
            peer = self.net.sip_server()
            if peer is None:
                return
            body = encode_kv({"method": method, "user": self.id, "addr": new})
            self.record("SIP_REGISTER", peer=peer.id, addr=new)
        self.send(Packet("SIP", new.with_port(SIP_PORT), peer.address.with_port(SIP_PORT), body))

    # selection exchanges

    def negotiate(self, peer: str) -> None:
        self.record("CAP_OFFER", peer=peer)
        body = b"OFFER\n" + format_profile(self.profile()).encode()
        self.send_app("CAP", self.net.nodes[peer].address, body)

    def on_cap_answer(self, remote: CapabilityProfile) -> None:
        try:
            result = negotiate_peer_protocol(self.profile(), remote, self.script.policy)
        except NoCommonTool as exc:
            self.record("NEGOTIATION_FAILED", peer=remote.node, error=exc.code)
            self.net.failures.append(exc.code)
            return
        chosen = result.chosen
        self.record(
            "NEGOTIATED",
            peer=remote.node,
            chosen=chosen.tool.value,
            version=f"{chosen.version[0]}.{chosen.version[1]}",
            features="+".join(sorted(f.value for f in chosen.features)) or "-",
            rationale="; ".join(f"{c}:{n}" for c, n in result.rationale),
        )

    def request_features(self, peer: str) -> None:
        body = encode_kv({f.value: h.value for f, h in self.script.requests})
        self.record("FEATURE_REQUEST", peer=peer, requested="+".join(f.value for f, _ in self.script.requests) or "-")
        self.send_app("FEATURE", self.net.nodes[peer].address, b"REQUEST\n" + body)

    def on_feature(self, packet: Packet) -> None:
        kind, _, body = packet.payload.partition(b"\n")
        offered = [FeatureId.parse(f) for f in body.decode().split("+") if f]
        try:
            agreement = negotiate_provider_features(self.script.requests, offered)
        except MandatoryFeatureUnavailable as exc:
            self.record("FEATURES_FAILED", error=exc.code, missing="+".join(sorted(f.value for f in exc.missing)))
            self.net.failures.append(exc.code)
            return
        self.record(
            "FEATURES_AGREED",
            agreed="+".join(sorted(f.value for f in agreement.agreed)) or "-",
            rejected="+".join(sorted(f"{f.value}:{r.value}" for f, r in agreement.rejected)) or "-",
        )

    def query_services(self, peer: str) -> None:
        self.record("SERVICE_QUERY", peer=peer)
        self.send_app("SERVICE", self.net.nodes[peer].address, b"QUERY\n")

    def on_service(self, packet: Packet) -> None:
        kind, _, body = packet.payload.partition(b"\n")
        advertised = []
        for line in body.decode().splitlines():
            feat, _, params = line.partition(" ")
            advertised.append((FeatureId.parse(feat), decode_kv(params.encode()) if params else {}))
        tools = [r.descriptor.tool for r in self.toolbox.registrations]
        plan = plan_access_tools(self.script.needs, advertised, tools)
        for act in plan.activations:
            self.record("ACTIVATE", service=act.service.value, **dict(act.parameters))
        if plan.unmet:
            self.record("UNMET", features="+".join(sorted(f.value for f in plan.unmet)))


# ---- correspondent -------------------------------------------------------------


class RtpSource:
    def __init__(self, node: "CorrespondentNode", spec: FlowSpec, dst: Locator):
        self.node = node
        self.spec = spec
        self.dst = dst.with_port(spec.port)
        self.seq = 0
        stop = spec.stop_ms if spec.stop_ms is not None else node.script.sim.duration_ms
        self.stop = min(stop, node.script.sim.duration_ms)

    def start(self) -> None:
        if self.spec.start_ms < self.stop:
            self.node.sim.at(self.spec.start_ms, self.emit)

    def emit(self) -> None:
        n = self.node
        pkt = Packet("RTP", n.address.with_port(self.spec.port), self.dst, b"", Proto.UDP, self.spec.name, self.seq)
        n.record("RTP_TX", flow=self.spec.name, seq=self.seq, dst=self.dst)
        self.seq += 1
        n.send(pkt)
        if n.sim.now + self.spec.interval_ms < self.stop:
            n.sim.schedule(self.spec.interval_ms, self.emit)


class CorrespondentNode(SimNode):
    kind = NodeKind.CORRESPONDENT

    def __init__(self, net, spec, script):
        super().__init__(net, spec, script)
        self.flows: dict[str, RtpSource] = {}

    def on_sip(self, packet: Packet) -> None:
        v = decode_kv(packet.payload)
        self.record("SIP_RX", method=v.get("method"), call=v.get("call", "-"), src=packet.src)
        flow = self.flows.get(v.get("call", ""))
        if v.get("method") == "REINVITE" and flow is not None:
            addr = parse_locator(v["addr"])
            self.sim.schedule(self.script.sim.sip_proc_ms, lambda: self._redirect(flow, addr))

    def _redirect(self, flow: RtpSource, addr: Locator) -> None:
        flow.dst = addr
        self.record("FLOW_REDIRECT", flow=flow.spec.name, dst=addr)


class SipServer(SimNode):
    kind = NodeKind.SIP_SERVER

    def on_sip(self, packet: Packet) -> None:
        v = decode_kv(packet.payload)
        self.record("SIP_REGISTERED", user=v.get("user", "-"), addr=v.get("addr", "-"))


class HomeAgent(SimNode):
    kind = NodeKind.HOME_AGENT

    def on_feature(self, packet: Packet) -> None:
        self.record("FEATURE_OFFER", offered="+".join(f.value for f in self.spec.offers) or "-")
        body = "+".join(f.value for f in self.spec.offers).encode()
        self.send_app("FEATURE", packet.src, b"OFFER\n" + body)


class AccessRouter(SimNode):
    kind = NodeKind.ACCESS_ROUTER

    def __init__(self, net, spec, script):
        super().__init__(net, spec, script)
        self.stale: set[Locator] = set()

    def deliver(self, packet: Packet) -> None:
        if packet.dst.with_port(0) in self.stale:
            self.record("DROP", reason="DETACHED", **packet_fields(packet))
            return
        super().deliver(packet)

    def on_service(self, packet: Packet) -> None:
        lines = [f"{f.value} {encode_kv(dict(p)).decode()}".strip() for f, p in self.spec.advertise]
        self.record("SERVICE_ADVERT", services="+".join(f.value for f, _ in self.spec.advertise) or "-")
        self.send_app("SERVICE", packet.src, ("ADVERT\n" + "\n".join(lines)).encode())


# ---- firewall --------------------------------------------------------------------


class Firewall(SimNode):
    """Stateful filter for RTP. Optional ALG learns pinholes from SIP re-invites after a delay."""

    kind = NodeKind.FIREWALL

    def __init__(self, net, spec, script):
        super().__init__(net, spec, script)
        self.rules: list[PinholeRule] = []
        self.by_session: dict[int, list[PinholeRule]] = {}

    def install_rules(self, rules, via: str) -> int:
        new = [r for r in rules if r not in self.rules]
        self.rules.extend(new)
        if new:
            self.record("PINHOLES_INSTALLED", via=via, count=len(new), rules=",".join(str(r.dst) for r in new))
        return len(new)

    def remove_rules(self, rules, via: str) -> None:
        gone = [r for r in rules if r in self.rules]
        self.rules = [r for r in self.rules if r not in gone]
        if gone:
            self.record("PINHOLES_REMOVED", via=via, count=len(gone))

    def transit(self, packet: Packet) -> bool:
        if packet.app == "RTP":
            now = self.sim.now
            self.rules = [r for r in self.rules if not r.expired(now)]
            if any(pinhole_matches(r, packet.five_tuple) for r in self.rules):
                return True
            self.record("DROP", reason="FW_BLOCK", **packet_fields(packet))
            return False
        if packet.app == "SIP" and self.spec.alg_delay_ms is not None:
            v = decode_kv(packet.payload)
            if v.get("method") == "REINVITE":
                media = parse_locator(v["addr"])
                rule = PinholeRule(Proto.UDP, packet.dst.with_port(0), media)
                self.record("ALG_SEEN", call=v.get("call", "-"), dst=media)
                self.sim.schedule(self.spec.alg_delay_ms, lambda: self.install_rules([rule], "alg"))
        return True

    # STM candidate service: firewall state

    def provide(self, session) -> Optional[ContextBlock]:
        prev = session.prev_locator
        rules = [r for r in self.rules if prev is None or r.dst.same_host(prev)]
        if not rules:
            return None
        return ContextBlock(ContextType.FIREWALL_STATE, PinholeRule.encode_list(rules), MANDATORY)

    def consume(self, block: ContextBlock, session) -> bool:
        rules = block.pinholes()
        new = session.mobile_locator
        if new is not None:
            rules = [PinholeRule(r.proto, r.src, r.dst.with_address(new), r.expiry) for r in rules]
        self.by_session[session.id] = [r for r in rules if r not in self.rules]
        self.install_rules(rules, "stm")
        return True

    def unconsume(self, block: ContextBlock, session) -> None:
        self.remove_rules(self.by_session.pop(session.id, []), "rollback")

    def enable_stm(self, config: StmConfig) -> Stm:
        stm = attach_stm(self, config)
        stm.register_context_endpoint(
            ContextEndpoint(ContextType.FIREWALL_STATE, self.provide, self.consume, self.unconsume)
        )
        self.toolbox.add_report_listener(self._on_report)
        return stm

    def on_trigger(self, packet: Packet) -> None:
        self.toolbox.publish_trigger(
            Trigger(Channel.for_tool(ToolName.STM), Kind.HANDOVER_DONE, packet.payload, self.sim.now)
        )

    def _on_report(self, reg, n: Notification) -> None:
        if n.kind != Kind.STM_INSTALLED:
            return
        session = self.stm.sessions.get(int(n.values()["id"]))
        if session is None or session.mobile_locator is None:
            return
        self.record("CONTEXT_READY_TX", dst=session.mobile_locator)
        self.send_app("CTX_READY", session.mobile_locator, encode_kv({"id": session.id}))


NODE_CLASSES = {
    NodeKind.MOBILE: MobileNode,
    NodeKind.CORRESPONDENT: CorrespondentNode,
    NodeKind.FIREWALL: Firewall,
    NodeKind.ACCESS_ROUTER: AccessRouter,
    NodeKind.SIP_SERVER: SipServer,
    NodeKind.HOME_AGENT: HomeAgent,
}
