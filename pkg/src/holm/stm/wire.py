"""STM peer wire format.

All integers are big-endian. Header (20 bytes)::

    magic "STM1" | version u8 = 1 | msg_type u8 | flags u16 | transfer_id u64 | body_len u32

followed by ``body_len`` bytes of TLVs (type u16, length u16, value). TLV
types this module does not know are kept verbatim, so a parse/serialize
round trip is byte-identical. docs/wire-format.md is the normative text.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from holm.core import ContextBlock, Locator, NodeId, ctype_name
from holm.errors import BadMagic, BadMsgType, BadVersion, Malformed, TlvOverrun, TrailingData, Truncated

MAGIC = b"STM1"
VERSION = 1
HEADER = struct.Struct("!4sBBHQI")
TLV_HEADER = struct.Struct("!HH")
MAX_TLV_VALUE = 0xFFFF


class MsgType(enum.IntEnum):
    CTX_REQUEST = 1
    CTX_RESPONSE = 2
    CTX_DATA = 3
    INSTALL_ACK = 4
    ERROR = 5
    CONTROL = 6


class Flag(enum.IntFlag):
    EXPEDITED = 0x1
    FINAL_FRAGMENT = 0x2
    PULL = 0x4


class TlvType(enum.IntEnum):
    MOBILE_NODE = 1
    PREV_LOCATOR = 2
    CTX_TYPES = 3
    CTX_BLOCK = 4
    AVAIL_MASK = 5
    ERROR = 6
    CONTROL = 7
    PRIORITY = 8
    FRAGMENT = 9


class ErrorCode(enum.IntEnum):
    RETRANSMIT = 1
    UNKNOWN_TRANSFER = 2
    BAD_STATE = 3
    NO_SECURITY_ASSOC = 4
    INSTALL_FAILED = 5


class ControlOp(enum.IntEnum):
    PAUSE = 1
    RESUME = 2
    ABORT = 3
    START = 4


@dataclass(frozen=True)
class Tlv:
    type: int
    value: bytes = b""

    def __post_init__(self):
        if not 0 <= self.type <= 0xFFFF:
            raise Malformed(f"TLV type {self.type} does not fit in 16 bits")
        if len(self.value) > MAX_TLV_VALUE:
            raise Malformed(f"TLV value of {len(self.value)} bytes exceeds 65535")

    def encode(self) -> bytes:
        return TLV_HEADER.pack(self.type, len(self.value)) + self.value


def tlv_mobile(node: NodeId) -> Tlv:
    return Tlv(TlvType.MOBILE_NODE, node.encode())


def tlv_locator(loc: Locator) -> Tlv:
    return Tlv(TlvType.PREV_LOCATOR, loc.encode())


def tlv_types(types) -> Tlv:
    types = list(types)
    return Tlv(TlvType.CTX_TYPES, struct.pack(f"!{len(types)}H", *types))


def tlv_block(block: ContextBlock) -> Tlv:
    return Tlv(TlvType.CTX_BLOCK, block.encode())


def tlv_mask(mask: int) -> Tlv:
    return Tlv(TlvType.AVAIL_MASK, struct.pack("!I", mask))


def tlv_error(code: int, text: str = "") -> Tlv:
    return Tlv(TlvType.ERROR, struct.pack("!H", code) + text.encode("utf-8"))


def tlv_control(op: ControlOp, offset: int = 0) -> Tlv:
    return Tlv(TlvType.CONTROL, struct.pack("!BQ", op, offset))


def tlv_priority(priority: int) -> Tlv:
    return Tlv(TlvType.PRIORITY, bytes([priority]))


def tlv_fragment(offset: int, total: int, data: bytes) -> Tlv:
    return Tlv(TlvType.FRAGMENT, struct.pack("!QQ", offset, total) + data)


@dataclass(frozen=True)
class StmWireMessage:
    msg_type: MsgType
    transfer_id: int
    tlvs: tuple[Tlv, ...] = ()
    flags: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tlvs", tuple(self.tlvs))
        if not 0 <= self.transfer_id < 1 << 64:
            raise Malformed("transfer id must fit in 64 bits")
        if not 0 <= self.flags <= 0xFFFF:
            raise Malformed("flags must fit in 16 bits")

    @property
    def body_len(self) -> int:
        return sum(TLV_HEADER.size + len(t.value) for t in self.tlvs)

    @property
    def expedited(self) -> bool:
        return bool(self.flags & Flag.EXPEDITED)

    @property
    def final(self) -> bool:
        return bool(self.flags & Flag.FINAL_FRAGMENT)

    @property
    def pull(self) -> bool:
        return bool(self.flags & Flag.PULL)

    def all(self, tlv_type: int) -> list[Tlv]:
        return [t for t in self.tlvs if t.type == tlv_type]

    def first(self, tlv_type: int) -> Tlv | None:
        for t in self.tlvs:
            if t.type == tlv_type:
                return t
        return None

    def _value(self, tlv_type: int) -> bytes | None:
        t = self.first(tlv_type)
        return None if t is None else t.value

    def mobile_node(self) -> NodeId | None:
        v = self._value(TlvType.MOBILE_NODE)
        return None if v is None else NodeId.decode(v)

    def prev_locator(self) -> Locator | None:
        v = self._value(TlvType.PREV_LOCATOR)
        return None if v is None else Locator.decode(v)

    def ctx_types(self) -> list[int]:
        v = self._value(TlvType.CTX_TYPES)
        if v is None:
            return []
        if len(v) % 2:
            raise Malformed("context type list has odd length")
        return list(struct.unpack(f"!{len(v) // 2}H", v))

    def blocks(self) -> list[ContextBlock]:
        return [ContextBlock.decode(t.value) for t in self.all(TlvType.CTX_BLOCK)]

    def mask(self) -> int | None:
        v = self._value(TlvType.AVAIL_MASK)
        if v is None:
            return None
        if len(v) != 4:
            raise Malformed("availability mask must be 4 bytes")
        return struct.unpack("!I", v)[0]

    def error(self) -> tuple[int, str] | None:
        v = self._value(TlvType.ERROR)
        if v is None:
            return None
        if len(v) < 2:
            raise Malformed("error TLV too short")
        return struct.unpack_from("!H", v)[0], v[2:].decode("utf-8", "replace")

    def control(self) -> tuple[ControlOp, int] | None:
        v = self._value(TlvType.CONTROL)
        if v is None:
            return None
        if len(v) != 9:
            raise Malformed("control TLV must be 9 bytes")
        op, offset = struct.unpack("!BQ", v)
        try:
            return ControlOp(op), offset
        except ValueError:
            raise Malformed(f"unknown control op {op}") from None

    def priority(self) -> int | None:
        v = self._value(TlvType.PRIORITY)
        if v is None:
            return None
        if len(v) != 1 or v[0] > 7:
            raise Malformed("priority must be one byte in 0..7")
        return v[0]

    def fragment(self) -> tuple[int, int, bytes] | None:
        v = self._value(TlvType.FRAGMENT)
        if v is None:
            return None
        if len(v) < 16:
            raise Malformed("fragment TLV too short")
        offset, total = struct.unpack_from("!QQ", v)
        data = bytes(v[16:])
        if offset + len(data) > total:
            raise Malformed("fragment extends past the transfer length")
        return offset, total, data


def serialize_message(msg: StmWireMessage) -> bytes:
    body = b"".join(t.encode() for t in msg.tlvs)
    return HEADER.pack(MAGIC, VERSION, msg.msg_type, msg.flags, msg.transfer_id, len(body)) + body


def _check_header_prefix(data: bytes) -> None:
    n = len(data)
    for i in range(min(n, 4)):
        if data[i] != MAGIC[i]:
            raise BadMagic(offset=i)
    if n > 4 and data[4] != VERSION:
        raise BadVersion(offset=4)
    if n > 5 and data[5] not in MsgType._value2member_map_:
        raise BadMsgType(offset=5)


def frame_length(data: bytes) -> int | None:
    """Total length of the message at the start of ``data``, or None if the header is incomplete."""
    _check_header_prefix(data)
    if len(data) < HEADER.size:
        return None
    return HEADER.size + HEADER.unpack_from(data)[5]


def parse_message(data: bytes) -> StmWireMessage:
    data = bytes(data)
    total = frame_length(data)
    if total is None or len(data) < total:
        raise Truncated(offset=len(data))
    if len(data) > total:
        raise TrailingData(offset=total)
    _, _, msg_type, flags, transfer_id, _ = HEADER.unpack_from(data)
    pos, tlvs = HEADER.size, []
    while pos < total:
        if total - pos < TLV_HEADER.size:
            raise TlvOverrun(offset=pos)
        t, length = TLV_HEADER.unpack_from(data, pos)
        if pos + TLV_HEADER.size + length > total:
            raise TlvOverrun(offset=pos)
        tlvs.append(Tlv(t, data[pos + TLV_HEADER.size : pos + TLV_HEADER.size + length]))
        pos += TLV_HEADER.size + length
    return StmWireMessage(MsgType(msg_type), transfer_id, tuple(tlvs), flags)


class StreamDecoder:
    """Splits a byte stream of back-to-back messages (the STREAM binding) using body_len."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[StmWireMessage]:
        self._buf += chunk
        out = []
        while True:
            total = frame_length(bytes(self._buf[: HEADER.size]))
            if total is None or len(self._buf) < total:
                return out
            out.append(parse_message(bytes(self._buf[:total])))
            del self._buf[:total]

    @property
    def pending(self) -> int:
        return len(self._buf)


def frame_stream(messages) -> bytes:
    return b"".join(serialize_message(m) for m in messages)


def describe(msg: StmWireMessage) -> list[str]:
    """Human-readable lines naming the header and every TLV."""
    flags = [f.name for f in Flag if msg.flags & f]
    lines = [
        f"msg_type={msg.msg_type.name} transfer_id=0x{msg.transfer_id:016x} "
        f"flags=0x{msg.flags:04x}{' (' + '|'.join(flags) + ')' if flags else ''} body_len={msg.body_len}"
    ]
    for tlv in msg.tlvs:
        try:
            name = TlvType(tlv.type).name
        except ValueError:
            lines.append(f"  TLV {tlv.type} UNKNOWN len={len(tlv.value)} value={tlv.value.hex()}")
            continue
        lines.append(f"  TLV {tlv.type} {name} len={len(tlv.value)} {_describe_value(tlv)}")
    return lines


def _describe_value(tlv: Tlv) -> str:
    one = StmWireMessage(MsgType.CONTROL, 0, (tlv,))
    try:
        t = tlv.type
        if t == TlvType.MOBILE_NODE:
            return f"node={one.mobile_node()}"
        if t == TlvType.PREV_LOCATOR:
            return f"locator={one.prev_locator()}"
        if t == TlvType.CTX_TYPES:
            return "types=" + ",".join(ctype_name(c) for c in one.ctx_types())
        if t == TlvType.CTX_BLOCK:
            b = one.blocks()[0]
            return f"ctype={ctype_name(b.ctype)} flags=0x{b.flags:02x} payload_len={len(b.payload)}"
        if t == TlvType.AVAIL_MASK:
            return f"mask=0b{one.mask():b}"
        if t == TlvType.ERROR:
            code, text = one.error()
            try:
                label = ErrorCode(code).name
            except ValueError:
                label = str(code)
            return f"code={label} text={text!r}"
        if t == TlvType.CONTROL:
            op, offset = one.control()
            return f"op={op.name} offset={offset}"
        if t == TlvType.PRIORITY:
            return f"priority={one.priority()}"
        offset, total, data = one.fragment()
        return f"offset={offset} total={total} data_len={len(data)}"
    except Malformed as exc:
        return f"malformed ({exc}) value={tlv.value.hex()}"
