"""State transfer module: wire codec, session state machine and toolbox binding."""

from holm.stm.module import Effects, Stm, StmTool, StmTransport, wire_event
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
    Tlv,
    TlvType,
    parse_message,
    serialize_message,
)

__all__ = [
    "TERMINAL",
    "TRANSITIONS",
    "ContextEndpoint",
    "ControlOp",
    "Effects",
    "ErrorCode",
    "Event",
    "Flag",
    "MsgType",
    "PeerInfo",
    "Role",
    "Stm",
    "StmConfig",
    "StmState",
    "StmTool",
    "StmTransport",
    "StmWireMessage",
    "StreamDecoder",
    "Tlv",
    "TlvType",
    "TransferDirection",
    "TransferSession",
    "TransportMode",
    "make_transfer_id",
    "parse_message",
    "serialize_message",
    "wire_event",
]
