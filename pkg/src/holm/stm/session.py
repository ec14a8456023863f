"""Session records, configuration and the (state, event) transition table of the STM."""

from __future__ import annotations

import binascii
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from holm.core import ContextBlock, Locator, NodeId
from holm.errors import BadConfig


class StmState(enum.Enum):
    IDLE = "IDLE"
    PROPOSED = "PROPOSED"
    ACCEPTED = "ACCEPTED"
    TRANSFERRING = "TRANSFERRING"
    AWAIT_INSTALL_ACK = "AWAIT_INSTALL_ACK"
    COMPLETED = "COMPLETED"
    PAUSED = "PAUSED"
    ABORTED = "ABORTED"
    FAILED = "FAILED"


TERMINAL = frozenset({StmState.COMPLETED, StmState.ABORTED, StmState.FAILED})


class Role(enum.Enum):
    INITIATOR = "INITIATOR"
    RESPONDER = "RESPONDER"


class TransferDirection(enum.Enum):
    PUSH = "PUSH"
    PULL = "PULL"


class TransportMode(enum.Enum):
    DATAGRAM = "DATAGRAM"
    STREAM = "STREAM"


class Event(enum.Enum):
    # toolbox / API
    PUSH = "PUSH"
    PULL = "PULL"
    START = "START"
    PAUSE = "PAUSE"
    RESUME = "RESUME"
    ABORT = "ABORT"
    # wire
    CTX_REQUEST = "CTX_REQUEST"
    CTX_RESPONSE = "CTX_RESPONSE"
    CTX_DATA = "CTX_DATA"
    INSTALL_ACK = "INSTALL_ACK"
    ERROR = "ERROR"
    CTRL_PAUSE = "CTRL_PAUSE"
    CTRL_RESUME = "CTRL_RESUME"
    CTRL_ABORT = "CTRL_ABORT"
    CTRL_START = "CTRL_START"
    # timers
    RETRANSMIT_TIMEOUT = "RETRANSMIT_TIMEOUT"
    INSTALL_TIMEOUT = "INSTALL_TIMEOUT"
    SEND_TICK = "SEND_TICK"


API_EVENTS = (Event.PUSH, Event.PULL, Event.START, Event.PAUSE, Event.RESUME, Event.ABORT)
WIRE_EVENTS = (
    Event.CTX_REQUEST,
    Event.CTX_RESPONSE,
    Event.CTX_DATA,
    Event.INSTALL_ACK,
    Event.ERROR,
    Event.CTRL_PAUSE,
    Event.CTRL_RESUME,
    Event.CTRL_ABORT,
    Event.CTRL_START,
)
TIMER_EVENTS = (Event.RETRANSMIT_TIMEOUT, Event.INSTALL_TIMEOUT, Event.SEND_TICK)

S, E = StmState, Event


def _t(*states):
    return frozenset(states)


# Every (state, event) pair not listed here is BAD_STATE. Values are the states
# the handler may leave the session in; handlers also reject a listed pair
# with BAD_STATE when the session's role does not fit the event.
TRANSITIONS: dict[tuple[StmState, Event], frozenset[StmState]] = {
    (S.IDLE, E.PUSH): _t(S.PROPOSED),
    (S.IDLE, E.PULL): _t(S.PROPOSED),
    (S.IDLE, E.CTX_REQUEST): _t(S.ACCEPTED, S.AWAIT_INSTALL_ACK),
    (S.IDLE, E.ABORT): _t(S.ABORTED),
    (S.PROPOSED, E.CTX_RESPONSE): _t(S.ACCEPTED, S.TRANSFERRING, S.COMPLETED, S.FAILED),
    (S.PROPOSED, E.RETRANSMIT_TIMEOUT): _t(S.PROPOSED, S.FAILED),
    (S.PROPOSED, E.ERROR): _t(S.PROPOSED, S.FAILED),
    (S.PROPOSED, E.ABORT): _t(S.ABORTED),
    (S.PROPOSED, E.CTRL_ABORT): _t(S.ABORTED),
    (S.ACCEPTED, E.START): _t(S.TRANSFERRING, S.AWAIT_INSTALL_ACK),
    (S.ACCEPTED, E.CTRL_START): _t(S.TRANSFERRING, S.AWAIT_INSTALL_ACK),
    (S.ACCEPTED, E.CTX_DATA): _t(S.TRANSFERRING, S.COMPLETED, S.FAILED),
    (S.ACCEPTED, E.CTX_REQUEST): _t(S.ACCEPTED),
    (S.ACCEPTED, E.CTX_RESPONSE): _t(S.ACCEPTED),
    (S.ACCEPTED, E.CTRL_PAUSE): _t(S.ACCEPTED),
    (S.ACCEPTED, E.CTRL_RESUME): _t(S.ACCEPTED),
    (S.ACCEPTED, E.ERROR): _t(S.ACCEPTED, S.FAILED),
    (S.ACCEPTED, E.ABORT): _t(S.ABORTED),
    (S.ACCEPTED, E.CTRL_ABORT): _t(S.ABORTED),
    (S.TRANSFERRING, E.PAUSE): _t(S.PAUSED),
    (S.TRANSFERRING, E.CTRL_PAUSE): _t(S.PAUSED),
    (S.TRANSFERRING, E.CTRL_RESUME): _t(S.TRANSFERRING),
    (S.TRANSFERRING, E.CTRL_START): _t(S.TRANSFERRING),
    (S.TRANSFERRING, E.CTX_DATA): _t(S.TRANSFERRING, S.COMPLETED, S.FAILED),
    (S.TRANSFERRING, E.CTX_REQUEST): _t(S.TRANSFERRING),
    (S.TRANSFERRING, E.CTX_RESPONSE): _t(S.TRANSFERRING),
    (S.TRANSFERRING, E.SEND_TICK): _t(S.TRANSFERRING, S.AWAIT_INSTALL_ACK),
    (S.TRANSFERRING, E.RETRANSMIT_TIMEOUT): _t(S.TRANSFERRING, S.FAILED),
    (S.TRANSFERRING, E.ERROR): _t(S.TRANSFERRING, S.FAILED),
    (S.TRANSFERRING, E.ABORT): _t(S.ABORTED),
    (S.TRANSFERRING, E.CTRL_ABORT): _t(S.ABORTED),
    (S.PAUSED, E.RESUME): _t(S.TRANSFERRING, S.AWAIT_INSTALL_ACK, S.COMPLETED, S.FAILED),
    (S.PAUSED, E.CTRL_RESUME): _t(S.TRANSFERRING, S.AWAIT_INSTALL_ACK, S.COMPLETED, S.FAILED),
    (S.PAUSED, E.CTRL_PAUSE): _t(S.PAUSED),
    (S.PAUSED, E.CTX_DATA): _t(S.PAUSED),
    (S.PAUSED, E.CTX_REQUEST): _t(S.PAUSED),
    (S.PAUSED, E.CTX_RESPONSE): _t(S.PAUSED),
    (S.PAUSED, E.ERROR): _t(S.PAUSED, S.FAILED),
    (S.PAUSED, E.ABORT): _t(S.ABORTED),
    (S.PAUSED, E.CTRL_ABORT): _t(S.ABORTED),
    (S.AWAIT_INSTALL_ACK, E.INSTALL_ACK): _t(S.COMPLETED),
    (S.AWAIT_INSTALL_ACK, E.INSTALL_TIMEOUT): _t(S.AWAIT_INSTALL_ACK, S.FAILED),
    (S.AWAIT_INSTALL_ACK, E.ERROR): _t(S.AWAIT_INSTALL_ACK, S.TRANSFERRING, S.FAILED),
    (S.AWAIT_INSTALL_ACK, E.CTX_REQUEST): _t(S.AWAIT_INSTALL_ACK),
    (S.AWAIT_INSTALL_ACK, E.CTRL_PAUSE): _t(S.AWAIT_INSTALL_ACK),
    (S.AWAIT_INSTALL_ACK, E.CTRL_RESUME): _t(S.AWAIT_INSTALL_ACK, S.TRANSFERRING),
    (S.AWAIT_INSTALL_ACK, E.CTRL_START): _t(S.AWAIT_INSTALL_ACK),
    (S.AWAIT_INSTALL_ACK, E.ABORT): _t(S.ABORTED),
    (S.AWAIT_INSTALL_ACK, E.CTRL_ABORT): _t(S.ABORTED),
    (S.COMPLETED, E.CTX_REQUEST): _t(S.COMPLETED),
    (S.COMPLETED, E.CTX_RESPONSE): _t(S.COMPLETED),
    (S.COMPLETED, E.CTX_DATA): _t(S.COMPLETED),
    (S.COMPLETED, E.INSTALL_ACK): _t(S.COMPLETED),
    (S.COMPLETED, E.CTRL_START): _t(S.COMPLETED),
    (S.COMPLETED, E.ERROR): _t(S.COMPLETED),
    (S.ABORTED, E.ERROR): _t(S.ABORTED),
    (S.ABORTED, E.CTRL_ABORT): _t(S.ABORTED),
    (S.FAILED, E.ERROR): _t(S.FAILED),
    (S.FAILED, E.CTRL_ABORT): _t(S.FAILED),
}

del S, E


@dataclass
class StmConfig:
    listen_port: int = 7000
    retransmit_timeout_ms: int = 500
    max_retries: int = 3
    install_timeout_ms: int = 2000
    transport: TransportMode = TransportMode.DATAGRAM
    fragment_size: int = 1024
    fragment_interval_ms: int = 1

    def validate(self) -> None:
        if not 1 <= self.listen_port <= 0xFFFF:
            raise BadConfig(f"listen_port must be 1..65535, got {self.listen_port}")
        if self.retransmit_timeout_ms < 1:
            raise BadConfig("retransmit_timeout_ms must be >= 1")
        if self.install_timeout_ms < 1:
            raise BadConfig("install_timeout_ms must be >= 1")
        if self.max_retries < 0:
            raise BadConfig("max_retries must be >= 0")
        if not 1 <= self.fragment_size <= 0xFFFF - 16:
            raise BadConfig("fragment_size must be 1..65519")
        if self.fragment_interval_ms < 0:
            raise BadConfig("fragment_interval_ms must be >= 0")
        if not isinstance(self.transport, TransportMode):
            raise BadConfig(f"unknown transport {self.transport!r}")


def node_tag(node: NodeId) -> int:
    return binascii.crc_hqx(node.encode(), 0)


def make_transfer_id(node: NodeId, seq: int) -> int:
    if not 1 <= seq < 1 << 48:
        raise ValueError("sequence number must be in 1..2^48-1")
    return (node_tag(node) << 48) | seq


@dataclass
class PeerInfo:
    node: NodeId
    locator: Locator
    security_assoc: bool = False
    serves: frozenset[str] = frozenset()


@dataclass
class ContextEndpoint:
    """Plug-in point for a state transfer candidate service (firewall, header compression, ...).

    ``provider(session)`` returns the block to send for ``session.mobile`` or
    None when there is no state. ``install(block, session)`` returns success;
    ``uninstall`` undoes an install during rollback.
    """

    ctype: int
    provider: Optional[Callable[["TransferSession"], Optional[ContextBlock]]] = None
    install: Optional[Callable[[ContextBlock, "TransferSession"], bool]] = None
    uninstall: Optional[Callable[[ContextBlock, "TransferSession"], None]] = None


@dataclass(eq=False)
class TransferSession:
    id: int
    role: Role
    direction: TransferDirection
    peer: PeerInfo
    requested: list[int]
    state: StmState = StmState.IDLE
    accepted: int = 0
    priority: int = 0
    offset: int = 0
    expedited: bool = False
    security_assoc: bool = False
    mobile: Optional[NodeId] = None
    prev_locator: Optional[Locator] = None
    mobile_locator: Optional[Locator] = None
    retries: int = 0
    total: int = 0
    blocks: list[ContextBlock] = field(default_factory=list)
    stream: bytes = b""
    rx: bytearray = field(default_factory=bytearray)
    rx_have: bytearray = field(default_factory=bytearray)
    installed: list[ContextBlock] = field(default_factory=list)
    last_request: bytes = b""
    last_response: bytes = b""
    retx_timer: object = None
    install_timer: object = None
    tick_timer: object = None
    peer_paused: bool = False
    history: list[StmState] = field(default_factory=list)

    @property
    def is_sender(self) -> bool:
        return (self.role is Role.INITIATOR) == (self.direction is TransferDirection.PUSH)

    @property
    def accepted_types(self) -> list[int]:
        return [t for i, t in enumerate(self.requested) if self.accepted >> i & 1]

    @property
    def live(self) -> bool:
        return self.state not in TERMINAL

    @property
    def received(self) -> int:
        """Contiguous bytes received from offset 0."""
        gap = self.rx_have.find(0)
        return len(self.rx_have) if gap < 0 else gap

    @property
    def rx_complete(self) -> bool:
        return self.total > 0 and len(self.rx_have) == self.total and self.rx_have.find(0) < 0
