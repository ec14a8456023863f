"""The state transfer module: session table, transition handlers and the toolbox binding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from holm.core import (
    ContextBlock,
    FeatureId,
    Kind,
    Locator,
    NodeId,
    ToolDescriptor,
    ToolName,
    Trigger,
    check_ctype,
    decode_kv,
    parse_locator,
    parse_node_id,
)
from holm.errors import (
    AlreadyInitialized,
    BadConfig,
    BadState,
    DuplicateCtype,
    EmptyTypes,
    Malformed,
    NoProvider,
    NoSecurityAssoc,
    NotInitialized,
    RejectedTypes,
    UnknownTransfer,
    WireError,
)
from holm.stm.session import (
    TERMINAL,
    TRANSITIONS,
    ContextEndpoint,
    Event,
    PeerInfo,
    Role,
    StmConfig,
    StmState,
    TransferDirection,
    TransferSession,
    TransportMode,
    make_transfer_id,
)
from holm.stm.wire import (
    ControlOp,
    ErrorCode,
    Flag,
    MsgType,
    StmWireMessage,
    StreamDecoder,
    parse_message,
    serialize_message,
    tlv_block,
    tlv_control,
    tlv_error,
    tlv_fragment,
    tlv_locator,
    tlv_mask,
    tlv_mobile,
    tlv_priority,
    tlv_types,
)
from holm.toolbox import ModeCommand, Notification, ToolEndpoint, Toolbox, ToolMode

log = logging.getLogger(__name__)

MAX_TYPES = 32


class TimerHandle(Protocol):
    def cancel(self) -> None: ...


class StmTransport(Protocol):
    """What the STM needs from its environment (the simulator, or a test harness)."""

    def now(self) -> int: ...

    def send(self, src: Locator, dst: Locator, data: bytes) -> None: ...

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> TimerHandle: ...

    def listen(self, port: int, handler: Callable[[bytes, Locator], None]) -> None: ...

    def close(self, port: int) -> None: ...


@dataclass
class Effects:
    """What one inbound wire message did."""

    transfer_id: int
    event: Optional[Event]
    before: Optional[StmState] = None
    after: Optional[StmState] = None
    sent: list[StmWireMessage] = field(default_factory=list)
    reports: list[Notification] = field(default_factory=list)
    error: Optional[str] = None


_CONTROL_EVENTS = {
    ControlOp.PAUSE: Event.CTRL_PAUSE,
    ControlOp.RESUME: Event.CTRL_RESUME,
    ControlOp.ABORT: Event.CTRL_ABORT,
    ControlOp.START: Event.CTRL_START,
}

_MSG_EVENTS = {
    MsgType.CTX_REQUEST: Event.CTX_REQUEST,
    MsgType.CTX_RESPONSE: Event.CTX_RESPONSE,
    MsgType.CTX_DATA: Event.CTX_DATA,
    MsgType.INSTALL_ACK: Event.INSTALL_ACK,
    MsgType.ERROR: Event.ERROR,
}


def wire_event(msg: StmWireMessage) -> Event:
    if msg.msg_type is MsgType.CONTROL:
        ctl = msg.control()
        if ctl is None:
            raise Malformed("CONTROL message without a control TLV")
        return _CONTROL_EVENTS[ctl[0]]
    return _MSG_EVENTS[msg.msg_type]


class StmTool(ToolEndpoint):
    """The STM as seen by the mobility toolbox."""

    def __init__(self, stm: "Stm"):
        super().__init__()
        self.stm = stm

    def on_notification(self, n: Notification) -> None:
        v = n.values()
        stm = self.stm
        if n.kind in (Kind.STM_PUSH, Kind.STM_PULL):
            types = [int(t) for t in v.get("types", "").split(",") if t]
            kwargs = dict(
                priority=int(v.get("priority", 0)),
                mobile=parse_node_id(v["mobile"]) if "mobile" in v else None,
                prev_locator=parse_locator(v["prev"]) if "prev" in v else None,
            )
            peer = parse_node_id(v["peer"])
            if n.kind == Kind.STM_PUSH:
                stm.begin_push(peer, types, **kwargs)
            else:
                stm.begin_pull(peer, types, expedited=v.get("expedited") == "1", **kwargs)
            return
        actions = {
            Kind.STM_START: stm.start,
            Kind.STM_ABORT: stm.abort,
            Kind.STM_PAUSE: stm.pause,
            Kind.STM_CONT: stm.resume,
        }
        if n.kind in actions:
            actions[n.kind](int(v["id"]))

    def on_trigger(self, trigger: Trigger) -> None:
        if trigger.kind != Kind.HANDOVER_DONE:
            return
        try:
            v = decode_kv(trigger.payload)
        except Malformed:
            return
        if "prev_ran" in v:
            self.stm.pull_for_handover(v)

    def on_mode(self, command: ModeCommand, mode: ToolMode) -> None:
        if command is ModeCommand.TERMINATE:
            self.stm._shutdown()

    def on_query(self, key: str):
        if key == "sessions":
            return len(self.stm.sessions)
        if key == "active_sessions":
            return sum(1 for s in self.stm.sessions.values() if s.live)
        return super().on_query(key)


class Stm:
    """One node's state transfer module.

    The module is inert until :meth:`init`. Sessions live in ``sessions`` keyed
    by transfer id; each event runs through :meth:`_dispatch`, which consults
    ``TRANSITIONS`` before and after the handler.
    """

    def __init__(self, node: NodeId, toolbox: Toolbox, transport: StmTransport, address: Locator):
        self.node = node
        self.toolbox = toolbox
        self.transport = transport
        self.address = address
        self.config: Optional[StmConfig] = None
        self.locator: Optional[Locator] = None
        self.registration = None
        self.endpoints: dict[int, ContextEndpoint] = {}
        self.peers: dict[NodeId, PeerInfo] = {}
        self.sessions: dict[int, TransferSession] = {}
        self.trace: Callable[..., None] = lambda kind, **fields: None
        self._seq = 0
        self._terminated = False
        self._decoders: dict[Locator, StreamDecoder] = {}
        self._effects: Optional[Effects] = None
        self._events: list[Event] = []

    # ---- lifecycle -------------------------------------------------------

    @property
    def mode(self) -> ToolMode:
        if self._terminated:
            return ToolMode.TERMINATED
        if self.registration is None:
            return ToolMode.UNINITIALIZED
        return self.registration.mode

    def init(self, config: StmConfig = None) -> "Stm":
        if self._terminated:
            raise NotInitialized("STM was terminated")
        if self.registration is not None:
            raise AlreadyInitialized(f"STM on {self.node} already initialized")
        config = config or StmConfig()
        config.validate()
        desc = ToolDescriptor(ToolName.STM, (1, 0), {self.address.family}, {FeatureId.STATE_TRANSFER})
        self.config = config
        self.locator = self.address.with_port(config.listen_port)
        self.registration = self.toolbox.register_tool(desc, StmTool(self))
        self.toolbox.set_mode(self.registration.handle, ModeCommand.INIT)
        self.transport.listen(config.listen_port, self.receive)
        return self

    def terminate(self) -> None:
        if self._terminated or self.registration is None:
            if self.registration is None and not self._terminated:
                raise NotInitialized("STM was never initialized")
            return
        reg = self.registration
        if reg.live and reg.mode is not ToolMode.TERMINATED:
            self.toolbox.set_mode(reg.handle, ModeCommand.TERMINATE)
        else:
            self._shutdown()

    def _shutdown(self) -> None:
        if self._terminated:
            return
        for session in list(self.sessions.values()):
            if session.live:
                self._dispatch(session, Event.ABORT)
        self._terminated = True
        self.transport.close(self.config.listen_port)
        self.trace("STM_TERMINATED")

    def _require_ready(self) -> None:
        mode = self.mode
        if mode in (ToolMode.UNINITIALIZED, ToolMode.TERMINATED):
            raise NotInitialized(f"STM on {self.node} is {mode.value}")
        if mode not in (ToolMode.READY, ToolMode.RUNNING):
            raise BadState(f"STM on {self.node} is {mode.value}")

    # ---- directory -------------------------------------------------------

    def register_context_endpoint(self, endpoint: ContextEndpoint) -> None:
        check_ctype(endpoint.ctype)
        if endpoint.ctype in self.endpoints:
            raise DuplicateCtype(f"context type {endpoint.ctype} already has an endpoint")
        self.endpoints[endpoint.ctype] = endpoint

    def add_peer(self, node: NodeId, locator: Locator, security_assoc: bool = True, serves=()) -> PeerInfo:
        info = PeerInfo(node, locator, security_assoc, frozenset(serves))
        self.peers[node] = info
        return info

    def peer_at(self, locator: Locator) -> Optional[PeerInfo]:
        for p in self.peers.values():
            if p.locator == locator:
                return p
        return None

    def peer_serving(self, access: str) -> Optional[PeerInfo]:
        for node in sorted(self.peers):
            if access in self.peers[node].serves:
                return self.peers[node]
        return None

    def consumer_types(self) -> list[int]:
        return sorted(t for t, ep in self.endpoints.items() if ep.install is not None)

    # ---- toolbox-facing API ----------------------------------------------

    def _new_session(self, peer, types, direction, priority, expedited, mobile, prev_locator, mobile_locator):
        self._require_ready()
        types = [check_ctype(t) for t in types]
        if not types:
            raise EmptyTypes("the context type list is empty")
        if len(types) > MAX_TYPES:
            raise BadConfig(f"at most {MAX_TYPES} context types per transfer")
        if not 0 <= priority <= 7:
            raise BadConfig("priority must be 0..7")
        info = peer if isinstance(peer, PeerInfo) else self.peers.get(peer)
        if info is None or not info.security_assoc:
            raise NoSecurityAssoc(f"no security association with {getattr(peer, 'node', peer)}")
        if direction is TransferDirection.PUSH:
            missing = [t for t in types if t not in self.endpoints or self.endpoints[t].provider is None]
            if missing:
                raise NoProvider(f"no provider for context types {missing}")
        self._seq += 1
        session = TransferSession(
            id=make_transfer_id(self.node, self._seq),
            role=Role.INITIATOR,
            direction=direction,
            peer=info,
            requested=types,
            priority=priority,
            expedited=expedited,
            security_assoc=True,
            mobile=mobile,
            prev_locator=prev_locator,
            mobile_locator=mobile_locator,
        )
        session.history.append(session.state)
        self.sessions[session.id] = session
        self._dispatch(session, Event.PUSH if direction is TransferDirection.PUSH else Event.PULL)
        return session.id

    def begin_push(self, peer, types, priority=0, mobile=None, prev_locator=None) -> int:
        return self._new_session(peer, types, TransferDirection.PUSH, priority, False, mobile, prev_locator, None)

    def begin_pull(
        self, peer, types, expedited=False, priority=0, mobile=None, prev_locator=None, mobile_locator=None
    ) -> int:
        return self._new_session(
            peer, types, TransferDirection.PULL, priority, expedited, mobile, prev_locator, mobile_locator
        )

    def pull_for_handover(self, info: dict[str, str]) -> Optional[int]:
        """Expedited pull of every locally installable context type from the peer serving ``prev_ran``."""
        peer = self.peer_serving(info["prev_ran"])
        types = self.consumer_types()
        if peer is None or not types:
            self.trace("STM_NO_PEER", prev_ran=info["prev_ran"])
            return None
        return self.begin_pull(
            peer,
            types,
            expedited=True,
            mobile=parse_node_id(info["mn"]) if "mn" in info else None,
            prev_locator=parse_locator(info["prev"]) if "prev" in info else None,
            mobile_locator=parse_locator(info["new"]) if "new" in info else None,
        )

    def _session(self, tid: int) -> TransferSession:
        self._require_alive()
        try:
            return self.sessions[tid]
        except KeyError:
            raise UnknownTransfer(f"no session 0x{tid:016x}") from None

    def _require_alive(self) -> None:
        if self._terminated or self.registration is None:
            raise NotInitialized(f"STM on {self.node} is {self.mode.value}")

    def start(self, tid: int) -> None:
        self._dispatch(self._session(tid), Event.START)

    def pause(self, tid: int) -> None:
        self._dispatch(self._session(tid), Event.PAUSE)

    def resume(self, tid: int) -> None:
        self._dispatch(self._session(tid), Event.RESUME)

    def abort(self, tid: int) -> None:
        self._dispatch(self._session(tid), Event.ABORT)

    # ---- wire input --------------------------------------------------------

    def receive(self, data: bytes, src: Locator) -> None:
        """Transport callback: decode and handle; undecodable input is dropped with a trace record."""
        if self._terminated:
            return
        try:
            if self.config.transport is TransportMode.STREAM:
                msgs = self._decoders.setdefault(src, StreamDecoder()).feed(data)
            else:
                msgs = [parse_message(data)]
        except WireError as exc:
            self.trace("STM_RX_ERROR", src=src, error=exc.code, offset=exc.offset)
            self._decoders.pop(src, None)
            return
        for msg in msgs:
            self.handle_wire(msg, src)

    def handle_wire(self, msg: StmWireMessage, src: Locator) -> Effects:
        self._require_alive()
        try:
            event = wire_event(msg)
        except Malformed:
            event = None
        eff = Effects(msg.transfer_id, event)
        outer, self._effects = self._effects, eff
        try:
            self.trace("STM_RX", src=src, msg=msg.msg_type.name, id=f"0x{msg.transfer_id:016x}")
            if event is None:
                eff.error = "MALFORMED"
                return eff
            session = self.sessions.get(msg.transfer_id)
            if session is None:
                self._handle_orphan(msg, event, src, eff)
                return eff
            eff.before = session.state
            if src != session.peer.locator:
                eff.error = "BAD_STATE"
                if event is not Event.ERROR:
                    self._send_error(src, msg.transfer_id, ErrorCode.BAD_STATE, "transfer id owned by another peer")
                return eff
            try:
                self._dispatch(session, event, msg)
            except BadState as exc:
                eff.error = "BAD_STATE"
                if event is not Event.ERROR:
                    self._send_error(src, msg.transfer_id, ErrorCode.BAD_STATE, str(exc))
            except Malformed as exc:
                eff.error = "MALFORMED"
                self.trace("STM_RX_ERROR", src=src, error="MALFORMED", detail=str(exc))
            eff.after = session.state
            return eff
        finally:
            self._effects = outer

    def _handle_orphan(self, msg, event, src, eff) -> None:
        if event is Event.ERROR:
            return
        if event is not Event.CTX_REQUEST:
            eff.error = "UNKNOWN_TRANSFER"
            self._send_error(src, msg.transfer_id, ErrorCode.UNKNOWN_TRANSFER, "unknown transfer")
            return
        peer = self.peer_at(src)
        if peer is None or not peer.security_assoc:
            eff.error = "NO_SECURITY_ASSOC"
            self._send_error(src, msg.transfer_id, ErrorCode.NO_SECURITY_ASSOC, "no security association")
            return
        if self.mode not in (ToolMode.READY, ToolMode.RUNNING):
            eff.error = "BAD_STATE"
            self._send_error(src, msg.transfer_id, ErrorCode.BAD_STATE, f"STM is {self.mode.value}")
            return
        try:
            types = msg.ctx_types()[:MAX_TYPES]
            session = TransferSession(
                id=msg.transfer_id,
                role=Role.RESPONDER,
                direction=TransferDirection.PULL if msg.pull else TransferDirection.PUSH,
                peer=peer,
                requested=types,
                priority=msg.priority() or 0,
                expedited=msg.expedited,
                security_assoc=True,
                mobile=msg.mobile_node(),
                prev_locator=msg.prev_locator(),
            )
        except Malformed as exc:
            eff.error = "MALFORMED"
            self.trace("STM_RX_ERROR", src=src, error="MALFORMED", detail=str(exc))
            return
        session.history.append(session.state)
        self.sessions[session.id] = session
        eff.before = session.state
        self._dispatch(session, event, msg)
        eff.after = session.state

    # ---- dispatch ----------------------------------------------------------

    def _dispatch(self, session: TransferSession, event: Event, msg: StmWireMessage = None) -> None:
        allowed = TRANSITIONS.get((session.state, event))
        if allowed is None:
            raise BadState(f"{event.value} not valid in {session.state.value}")
        before = session.state
        self._events.append(event)
        try:
            getattr(self, "_on_" + event.value.lower())(session, msg)
        finally:
            self._events.pop()
        assert session.state in allowed, (before, event, session.state)
        if session.state in TERMINAL:
            self._cancel_timers(session)

    def _timer(self, session: TransferSession, event: Event):
        def fire():
            if self._terminated or self.sessions.get(session.id) is not session:
                return
            if (session.state, event) in TRANSITIONS:
                try:
                    self._dispatch(session, event)
                except BadState as exc:
                    self.trace("STM_TIMER_IGNORED", id=f"0x{session.id:016x}", event=event.value, detail=str(exc))

        return fire

    def _role(self, session: TransferSession, *, sender: Optional[bool] = None, role: Optional[Role] = None):
        if sender is not None and session.is_sender != sender:
            raise BadState(f"event not valid for the {'sending' if session.is_sender else 'receiving'} side")
        if role is not None and session.role is not role:
            raise BadState(f"event not valid for the {session.role.value.lower()}")

    def _set(self, session: TransferSession, state: StmState) -> None:
        if state is session.state:
            return
        old, session.state = session.state, state
        session.history.append(state)
        self.trace(
            "STM_STATE",
            id=f"0x{session.id:016x}",
            event=self._events[-1].value if self._events else "-",
            old=old.value,
            new=state.value,
        )

    # ---- output helpers ----------------------------------------------------

    def _send(self, dst: Locator, msg: StmWireMessage) -> bytes:
        data = serialize_message(msg)
        if self._effects is not None:
            self._effects.sent.append(msg)
        self.trace("STM_TX", dst=dst, msg=msg.msg_type.name, id=f"0x{msg.transfer_id:016x}", len=len(data))
        self.transport.send(self.locator, dst, data)
        return data

    def _send_raw(self, dst: Locator, data: bytes) -> None:
        msg = parse_message(data)
        self._send(dst, msg)

    def _send_error(self, dst, tid, code: ErrorCode, text: str = "", control=None) -> None:
        tlvs = [tlv_error(code, text)]
        if control is not None:
            tlvs.append(tlv_control(*control))
        self._send(dst, StmWireMessage(MsgType.ERROR, tid, tlvs))

    def _control(self, session: TransferSession, op: ControlOp, offset: int = 0) -> None:
        self._send(session.peer.locator, StmWireMessage(MsgType.CONTROL, session.id, [tlv_control(op, offset)]))

    def _report(self, kind: Kind, session: TransferSession, **values) -> None:
        values = {"id": session.id, **values}
        n = Notification.to_toolbox(ToolName.STM.value, kind, self.transport.now(), **values)
        if self._effects is not None:
            self._effects.reports.append(n)
        self.trace("STM_REPORT", report=Kind(kind).name, id=f"0x{session.id:016x}")
        reg = self.registration
        if reg is not None and reg.live:
            self.toolbox.report_change(reg.handle, n)

    def _fail(self, session: TransferSession, code: int, text: str, notify_peer: bool = False) -> None:
        self._set(session, StmState.FAILED)
        self._cancel_timers(session)
        if notify_peer:
            self._send_error(session.peer.locator, session.id, code, text)
        self._report(Kind.STM_ERROR, session, code=int(code), reason=text)

    # ---- timers ------------------------------------------------------------

    def _cancel(self, session: TransferSession, attr: str) -> None:
        handle = getattr(session, attr)
        if handle is not None:
            handle.cancel()
            setattr(session, attr, None)

    def _cancel_timers(self, session: TransferSession) -> None:
        for attr in ("retx_timer", "install_timer", "tick_timer"):
            self._cancel(session, attr)

    def _arm(self, session: TransferSession, attr: str, delay: int, event: Event) -> None:
        self._cancel(session, attr)
        setattr(session, attr, self.transport.call_later(delay, self._timer(session, event)))

    def _arm_retx(self, session):
        self._arm(session, "retx_timer", self.config.retransmit_timeout_ms, Event.RETRANSMIT_TIMEOUT)

    def _arm_install(self, session):
        self._arm(session, "install_timer", self.config.install_timeout_ms, Event.INSTALL_TIMEOUT)

    # ---- API events ----------------------------------------------------------

    def _request(self, session: TransferSession, msg=None) -> None:
        tlvs = []
        if session.mobile is not None:
            tlvs.append(tlv_mobile(session.mobile))
        if session.prev_locator is not None:
            tlvs.append(tlv_locator(session.prev_locator))
        tlvs.append(tlv_types(session.requested))
        if session.priority:
            tlvs.append(tlv_priority(session.priority))
        flags = 0
        if session.direction is TransferDirection.PULL:
            flags |= Flag.PULL
        if session.expedited:
            flags |= Flag.EXPEDITED
        session.last_request = self._send(
            session.peer.locator, StmWireMessage(MsgType.CTX_REQUEST, session.id, tlvs, int(flags))
        )
        self._set(session, StmState.PROPOSED)
        self._arm_retx(session)

    _on_push = _request
    _on_pull = _request

    def _on_start(self, session, msg) -> None:
        self._role(session, role=Role.INITIATOR)
        if session.accepted == 0:
            raise RejectedTypes("the peer accepted none of the requested context types")
        session.retries = 0
        if session.direction is TransferDirection.PUSH:
            session.blocks = [self._provide(session, t) for t in session.accepted_types]
            self._begin_stream(session)
        else:
            self._set(session, StmState.TRANSFERRING)
            self._control(session, ControlOp.START)
            self._arm_retx(session)

    def _on_pause(self, session, msg) -> None:
        self._cancel_timers(session)
        offset = session.offset if session.is_sender else session.received
        self._set(session, StmState.PAUSED)
        self._control(session, ControlOp.PAUSE, offset)

    def _on_resume(self, session, msg) -> None:
        if session.is_sender:
            self._control(session, ControlOp.RESUME, session.offset)
            self._set(session, StmState.TRANSFERRING)
            self._send_next(session)
        else:
            self._control(session, ControlOp.RESUME, session.received)
            self._set(session, StmState.TRANSFERRING)
            self._receiver_progress(session)

    def _on_abort(self, session, msg) -> None:
        was_idle = session.state is StmState.IDLE
        self._cancel_timers(session)
        self._discard(session)
        self._set(session, StmState.ABORTED)
        if not was_idle:
            self._control(session, ControlOp.ABORT)

    # ---- sender side ---------------------------------------------------------

    def _provide(self, session: TransferSession, ctype: int) -> ContextBlock:
        ep = self.endpoints.get(ctype)
        block = ep.provider(session) if ep is not None and ep.provider is not None else None
        if block is None:
            raise NoProvider(f"provider for context type {ctype} returned nothing")
        return block

    def _begin_stream(self, session: TransferSession) -> None:
        session.stream = b"".join(b.encode() for b in session.blocks)
        session.total = len(session.stream)
        session.offset = 0
        self._set(session, StmState.TRANSFERRING)
        self._send_next(session)

    def _data_message(self, session: TransferSession, offset: int) -> StmWireMessage:
        chunk = session.stream[offset : offset + self.config.fragment_size]
        final = offset + len(chunk) >= session.total
        flags = Flag.FINAL_FRAGMENT if final else 0
        return StmWireMessage(MsgType.CTX_DATA, session.id, [tlv_fragment(offset, session.total, chunk)], int(flags))

    def _send_next(self, session: TransferSession) -> None:
        if session.offset >= session.total:
            session.offset = session.total
            self._await_ack(session, resend_final=True)
            return
        msg = self._data_message(session, session.offset)
        self._send(session.peer.locator, msg)
        session.offset = min(session.total, session.offset + self.config.fragment_size)
        if msg.final:
            self._await_ack(session)
        else:
            self._arm(session, "tick_timer", self.config.fragment_interval_ms, Event.SEND_TICK)

    def _await_ack(self, session: TransferSession, resend_final: bool = False) -> None:
        if resend_final:
            last = max(0, (session.total - 1) // self.config.fragment_size * self.config.fragment_size)
            self._send(session.peer.locator, self._data_message(session, last))
        self._cancel(session, "tick_timer")
        self._set(session, StmState.AWAIT_INSTALL_ACK)
        self._arm_install(session)

    def _on_send_tick(self, session, msg) -> None:
        session.tick_timer = None
        self._role(session, sender=True)
        self._send_next(session)

    def _on_install_timeout(self, session, msg) -> None:
        session.install_timer = None
        session.retries += 1
        if session.retries > self.config.max_retries:
            self._fail(session, ErrorCode.INSTALL_FAILED, "no install acknowledgement")
            return
        if session.last_response:
            self._send_raw(session.peer.locator, session.last_response)
        else:
            last = (session.total - 1) // self.config.fragment_size * self.config.fragment_size
            self._send(session.peer.locator, self._data_message(session, max(0, last)))
        self._arm_install(session)

    def _on_install_ack(self, session, msg) -> None:
        if session.state is StmState.COMPLETED:
            return
        self._role(session, sender=True)
        self._set(session, StmState.COMPLETED)
        self._report(Kind.STM_ACK, session)

    def _on_ctrl_start(self, session, msg) -> None:
        if session.state is not StmState.ACCEPTED:
            return  # duplicate START
        self._role(session, role=Role.RESPONDER, sender=True)
        self._begin_stream(session)

    # ---- responder: request handling -----------------------------------------

    def _on_ctx_request(self, session, msg) -> None:
        self._role(session, role=Role.RESPONDER)
        if session.state is not StmState.IDLE:
            if session.state in (StmState.ACCEPTED, StmState.AWAIT_INSTALL_ACK) and session.last_response:
                self._send_raw(session.peer.locator, session.last_response)
            return
        mask = 0
        if session.direction is TransferDirection.PUSH:
            for i, t in enumerate(session.requested):
                ep = self.endpoints.get(t)
                if ep is not None and ep.install is not None:
                    mask |= 1 << i
        else:
            for i, t in enumerate(session.requested):
                ep = self.endpoints.get(t)
                if ep is None or ep.provider is None:
                    continue
                block = ep.provider(session)
                if block is not None:
                    mask |= 1 << i
                    session.blocks.append(block)
        session.accepted = mask
        tlvs = [tlv_mask(mask)]
        flags = int(Flag.PULL) if session.direction is TransferDirection.PULL else 0
        inline = (
            session.direction is TransferDirection.PULL
            and session.expedited
            and mask
            and all(len(b.encode()) <= 0xFFFF for b in session.blocks)
        )
        if inline:
            tlvs += [tlv_block(b) for b in session.blocks]
            flags |= Flag.EXPEDITED | Flag.FINAL_FRAGMENT
        session.last_response = self._send(
            session.peer.locator, StmWireMessage(MsgType.CTX_RESPONSE, session.id, tlvs, flags)
        )
        if inline:
            session.stream = b"".join(b.encode() for b in session.blocks)
            session.total = session.offset = len(session.stream)
            self._set(session, StmState.AWAIT_INSTALL_ACK)
            self._arm_install(session)
        else:
            self._set(session, StmState.ACCEPTED)

    # ---- initiator: response handling ----------------------------------------

    def _on_ctx_response(self, session, msg) -> None:
        self._role(session, role=Role.INITIATOR)
        if session.state is StmState.COMPLETED:
            if msg.blocks():
                self._send(session.peer.locator, StmWireMessage(MsgType.INSTALL_ACK, session.id))
            return
        if session.state is not StmState.PROPOSED:
            return  # duplicate response
        mask = (msg.mask() or 0) & ((1 << len(session.requested)) - 1)
        blocks = msg.blocks()
        self._cancel(session, "retx_timer")
        session.accepted = mask
        session.retries = 0
        self._set(session, StmState.ACCEPTED)
        self._report(
            Kind.STM_ACCEPT,
            session,
            mask=mask,
            types=",".join(str(t) for t in session.accepted_types),
        )
        if not session.expedited or not mask or session.direction is not TransferDirection.PULL:
            return
        if blocks:
            self._set(session, StmState.TRANSFERRING)
            self._install(session, blocks)
        else:
            # the responder could not inline the blocks; fall back to a streamed pull
            self._on_start(session, None)

    def _on_retransmit_timeout(self, session, msg) -> None:
        session.retx_timer = None
        if session.role is not Role.INITIATOR or (session.state is StmState.TRANSFERRING and session.is_sender):
            raise BadState("no retransmission pending")
        session.retries += 1
        if session.retries > self.config.max_retries:
            self._fail(session, ErrorCode.RETRANSMIT, "retransmissions exhausted")
            return
        if session.state is StmState.PROPOSED:
            self._send_raw(session.peer.locator, session.last_request)
        else:
            self._control(session, ControlOp.START)
        self._arm_retx(session)

    # ---- receiver side ---------------------------------------------------------

    def _discard(self, session: TransferSession) -> None:
        session.rx = bytearray()
        session.rx_have = bytearray()

    def _on_ctx_data(self, session, msg) -> None:
        self._role(session, sender=False)
        frag = msg.fragment()
        if frag is None:
            raise Malformed("CTX_DATA without a fragment TLV")
        offset, total, data = frag
        if session.state is StmState.COMPLETED:
            if msg.final:
                self._send(session.peer.locator, StmWireMessage(MsgType.INSTALL_ACK, session.id))
            return
        if session.state is StmState.ACCEPTED and session.role is Role.INITIATOR:
            raise BadState("data before START")
        if not session.rx_have:
            session.total = total
            session.rx = bytearray(total)
            session.rx_have = bytearray(total)
        elif total != session.total:
            raise BadState("fragment disagrees on the transfer length")
        session.rx[offset : offset + len(data)] = data
        session.rx_have[offset : offset + len(data)] = b"\x01" * len(data)
        if session.state is StmState.PAUSED:
            return
        self._cancel(session, "retx_timer")
        self._set(session, StmState.TRANSFERRING)
        if msg.final and not session.rx_complete:
            gap = session.received
            self._send_error(
                session.peer.locator,
                session.id,
                ErrorCode.RETRANSMIT,
                "missing fragments",
                control=(ControlOp.RESUME, gap),
            )
            return
        self._receiver_progress(session)

    def _receiver_progress(self, session: TransferSession) -> None:
        if not session.rx_complete:
            return
        try:
            blocks = ContextBlock.decode_stream(bytes(session.rx))
        except Malformed as exc:
            self._fail(session, ErrorCode.INSTALL_FAILED, f"undecodable context: {exc}", notify_peer=True)
            return
        self._install(session, blocks)

    def _install(self, session: TransferSession, blocks: list[ContextBlock]) -> None:
        if sorted(b.ctype for b in blocks) != sorted(session.accepted_types):
            self._fail(session, ErrorCode.INSTALL_FAILED, "blocks do not match the accepted types", notify_peer=True)
            return
        done = []
        for block in blocks:
            ep = self.endpoints.get(block.ctype)
            ok = False
            if ep is not None and ep.install is not None:
                try:
                    ok = bool(ep.install(block, session))
                except Exception as exc:  # a faulty consumer must not wedge the session
                    log.warning("consumer for ctype %d raised %r", block.ctype, exc)
                    ok = False
            if not ok:
                for prev in reversed(done):
                    ep_prev = self.endpoints[prev.ctype]
                    if ep_prev.uninstall is not None:
                        ep_prev.uninstall(prev, session)
                self._discard(session)
                self._fail(session, ErrorCode.INSTALL_FAILED, f"install of ctype {block.ctype} failed", notify_peer=True)
                return
            done.append(block)
        session.installed = done
        self._discard(session)
        session.offset = session.total
        self._set(session, StmState.COMPLETED)
        self._send(session.peer.locator, StmWireMessage(MsgType.INSTALL_ACK, session.id))
        self._report(Kind.STM_INSTALLED, session, types=",".join(str(b.ctype) for b in done))

    # ---- control and errors ---------------------------------------------------

    def _on_ctrl_pause(self, session, msg) -> None:
        if session.state is StmState.TRANSFERRING:
            self._cancel(session, "tick_timer")
            self._cancel(session, "retx_timer")
            self._set(session, StmState.PAUSED)
        elif session.state is StmState.AWAIT_INSTALL_ACK:
            self._cancel(session, "install_timer")
            session.peer_paused = True

    def _on_ctrl_resume(self, session, msg) -> None:
        _, offset = msg.control()
        state = session.state
        if state in (StmState.ACCEPTED, StmState.TRANSFERRING):
            return
        if session.is_sender:
            session.peer_paused = False
            if state is StmState.AWAIT_INSTALL_ACK and offset >= session.total:
                self._arm_install(session)
                return
            session.offset = min(offset, session.total)
            session.last_response = b""
            self._set(session, StmState.TRANSFERRING)
            self._send_next(session)
        elif state is StmState.PAUSED:
            self._set(session, StmState.TRANSFERRING)
            self._receiver_progress(session)

    def _on_ctrl_abort(self, session, msg) -> None:
        if session.state in TERMINAL:
            return
        self._cancel_timers(session)
        self._discard(session)
        self._set(session, StmState.ABORTED)
        self._report(Kind.STM_ERROR, session, reason="aborted by peer")

    def _on_error(self, session, msg) -> None:
        if session.state in TERMINAL:
            return
        err = msg.error()
        code = err[0] if err else 0
        text = err[1] if err else ""
        if code == ErrorCode.RETRANSMIT:
            if not session.is_sender or session.state not in (
                StmState.TRANSFERRING,
                StmState.AWAIT_INSTALL_ACK,
                StmState.PAUSED,
            ):
                return
            ctl = msg.control()
            session.retries += 1
            if session.retries > self.config.max_retries:
                self._fail(session, ErrorCode.RETRANSMIT, "retransmissions exhausted", notify_peer=True)
                return
            offset = ctl[1] if ctl else 0
            session.offset = min(offset, session.total)
            if session.state is StmState.AWAIT_INSTALL_ACK:
                self._cancel(session, "install_timer")
                self._set(session, StmState.TRANSFERRING)
                self._send_next(session)
            return
        self._fail(session, code, text or "peer reported an error")
