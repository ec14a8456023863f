"""Shared domain vocabulary: identities, locators, tool capabilities, context payloads."""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple

from holm.errors import Malformed

__all__ = [
    "NodeId",
    "Family",
    "Locator",
    "ToolName",
    "FeatureId",
    "AppClass",
    "ToolDescriptor",
    "ContextType",
    "ContextBlock",
    "Proto",
    "PinholeRule",
    "Kind",
    "Channel",
    "COMMON",
    "Trigger",
    "parse_locator",
    "format_locator",
    "parse_node_id",
    "pinhole_matches",
]


@dataclass(frozen=True, order=True)
class NodeId:
    """Named node identity. ``instance`` disambiguates equal names (0 is the default)."""

    name: str
    instance: int = 0

    def __post_init__(self):
        if not self.name or not self.name.isprintable() or "#" in self.name or " " in self.name:
            raise Malformed(f"bad node name {self.name!r}")
        if not 0 <= self.instance <= 0xFFFFFFFF:
            raise Malformed(f"node instance out of range: {self.instance}")

    def __str__(self):
        return self.name if self.instance == 0 else f"{self.name}#{self.instance}"

    def encode(self) -> bytes:
        return self.name.encode("utf-8") + struct.pack("!I", self.instance)

    @classmethod
    def decode(cls, data: bytes) -> NodeId:
        if len(data) < 5:
            raise Malformed("node id too short")
        try:
            name = data[:-4].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed("node name is not utf-8") from exc
        return cls(name, struct.unpack("!I", data[-4:])[0])


def parse_node_id(text: str) -> NodeId:
    name, sep, inst = text.strip().partition("#")
    if sep:
        if not inst.isdigit():
            raise Malformed(f"bad node instance in {text!r}")
        return NodeId(name, int(inst))
    return NodeId(name)


class Family(enum.IntEnum):
    V4 = 4
    V6 = 6

    @property
    def size(self) -> int:
        return 4 if self is Family.V4 else 16


@dataclass(frozen=True, order=True)
class Locator:
    family: Family
    address: bytes
    port: int = 0

    def __post_init__(self):
        if not isinstance(self.family, Family):
            raise Malformed(f"bad family {self.family!r}")
        if len(self.address) != self.family.size:
            raise Malformed(f"{self.family.name} address must be {self.family.size} bytes")
        if not 0 <= self.port <= 0xFFFF:
            raise Malformed(f"port out of range: {self.port}")

    @classmethod
    def v4(cls, host: str, port: int = 0) -> Locator:
        return cls(Family.V4, ipaddress.IPv4Address(host).packed, port)

    @classmethod
    def v6(cls, host: str, port: int = 0) -> Locator:
        return cls(Family.V6, ipaddress.IPv6Address(host).packed, port)

    @property
    def host(self) -> str:
        cls = ipaddress.IPv4Address if self.family is Family.V4 else ipaddress.IPv6Address
        return str(cls(self.address))

    @property
    def unspecified(self) -> bool:
        return not any(self.address)

    def with_port(self, port: int) -> Locator:
        return Locator(self.family, self.address, port)

    def with_address(self, other: Locator) -> Locator:
        return Locator(other.family, other.address, self.port)

    def same_host(self, other: Locator) -> bool:
        return self.family is other.family and self.address == other.address

    def encode(self) -> bytes:
        return bytes([self.family.value]) + self.address + struct.pack("!H", self.port)

    @classmethod
    def decode_from(cls, data: bytes, pos: int = 0) -> tuple[Locator, int]:
        if pos >= len(data):
            raise Malformed("locator truncated")
        try:
            family = Family(data[pos])
        except ValueError as exc:
            raise Malformed(f"bad locator family byte {data[pos]}") from exc
        end = pos + 1 + family.size + 2
        if end > len(data):
            raise Malformed("locator truncated")
        address = bytes(data[pos + 1 : pos + 1 + family.size])
        (port,) = struct.unpack_from("!H", data, end - 2)
        return cls(family, address, port), end

    @classmethod
    def decode(cls, data: bytes) -> Locator:
        loc, end = cls.decode_from(data)
        if end != len(data):
            raise Malformed("trailing bytes after locator")
        return loc

    def __str__(self):
        return format_locator(self)


def format_locator(loc: Locator) -> str:
    return f"{'v4' if loc.family is Family.V4 else 'v6'}:{loc.host}:{loc.port}"


def parse_locator(text: str) -> Locator:
    """Parse ``v4:<dotted>:<port>`` or ``v6:<hex-groups>:<port>``."""
    text = text.strip()
    fam, sep, rest = text.partition(":")
    if not sep or fam not in ("v4", "v6"):
        raise Malformed(f"bad locator family in {text!r}")
    host, sep, port_text = rest.rpartition(":")
    if not sep or not port_text.isdigit():
        raise Malformed(f"bad locator port in {text!r}")
    port = int(port_text)
    if port > 0xFFFF:
        raise Malformed(f"port exceeds 16 bits in {text!r}")
    try:
        if fam == "v4":
            return Locator.v4(host, port)
        return Locator.v6(host, port)
    except ValueError as exc:
        raise Malformed(f"bad {fam} address in {text!r}") from exc


class ToolName(enum.Enum):
    MIPv4 = "MIPv4"
    MIPv6 = "MIPv6"
    FMIPv6 = "FMIPv6"
    HMIPv6 = "HMIPv6"
    PMIP = "PMIP"
    HIP = "HIP"
    SIP = "SIP"
    SCTP = "SCTP"
    TCP_MIGRATE = "TCP_MIGRATE"
    # the state transfer module registers itself like any other tool
    STM = "STM"


class FeatureId(enum.Enum):
    ROUTE_OPT = "ROUTE_OPT"
    IPSEC_PROT = "IPSEC_PROT"
    FW_TRAVERSAL = "FW_TRAVERSAL"
    DUAL_STACK = "DUAL_STACK"
    HA_RELIABILITY = "HA_RELIABILITY"
    MULTI_COA = "MULTI_COA"
    NEMO = "NEMO"
    DYNAMIC_HA = "DYNAMIC_HA"
    MULTIHOMING = "MULTIHOMING"
    BUILTIN_SECURITY = "BUILTIN_SECURITY"
    MAKE_BEFORE_BREAK = "MAKE_BEFORE_BREAK"
    PROXY_SIGNALING = "PROXY_SIGNALING"
    FOREIGN_AGENT = "FOREIGN_AGENT"
    MIH_SERVICES = "MIH_SERVICES"
    STATE_TRANSFER = "STATE_TRANSFER"

    @classmethod
    def parse(cls, text: str) -> FeatureId:
        try:
            return cls[text.strip()]
        except KeyError:
            raise Malformed(f"unknown feature {text!r}") from None


class AppClass(enum.Enum):
    GENERIC = "GENERIC"
    SIP_P2P = "SIP_P2P"
    REALTIME = "REALTIME"
    BULK = "BULK"


@dataclass(frozen=True)
class ToolDescriptor:
    tool: ToolName
    version: tuple[int, int] = (1, 0)
    stacks: frozenset[Family] = frozenset({Family.V4, Family.V6})
    features: frozenset[FeatureId] = frozenset()
    app_classes: frozenset[AppClass] = frozenset({AppClass.GENERIC})

    def __post_init__(self):
        object.__setattr__(self, "stacks", frozenset(self.stacks))
        object.__setattr__(self, "features", frozenset(self.features))
        object.__setattr__(self, "app_classes", frozenset(self.app_classes))
        object.__setattr__(self, "version", tuple(self.version))
        if not self.stacks:
            raise Malformed(f"{self.tool.value}: stacks must be non-empty")
        major, minor = self.version
        if major < 0 or minor < 0:
            raise Malformed("version components must be unsigned")

    @property
    def key(self) -> tuple[ToolName, tuple[int, int]]:
        return (self.tool, self.version)

    def __str__(self):
        return f"{self.tool.value}/{self.version[0]}.{self.version[1]}"


class ContextType(enum.IntEnum):
    FIREWALL_STATE = 1
    HEADER_COMPRESSION = 2
    QOS = 3
    AAA = 4


USER_CTYPE_MIN = 5
USER_CTYPE_MAX = 32767
_ctype_names: dict[int, str] = {c.value: c.name for c in ContextType}


def register_context_type(code: int, name: str) -> None:
    if not USER_CTYPE_MIN <= code <= USER_CTYPE_MAX:
        raise Malformed(f"context type {code} outside the user range")
    if _ctype_names.get(code, name) != name:
        raise Malformed(f"context type {code} already registered as {_ctype_names[code]}")
    _ctype_names[code] = name


def check_ctype(code: int) -> int:
    if not 1 <= code <= USER_CTYPE_MAX:
        raise Malformed(f"invalid context type id {code}")
    return code


def ctype_name(code: int) -> str:
    return _ctype_names.get(code, f"CTYPE_{code}")


def parse_ctype(text: str) -> int:
    text = text.strip()
    if text.isdigit():
        return check_ctype(int(text))
    for code, name in _ctype_names.items():
        if name == text:
            return code
    raise Malformed(f"unknown context type {text!r}")


MANDATORY = 0x01
_BLOCK_HEADER = struct.Struct("!HBBH")


@dataclass(frozen=True)
class ContextBlock:
    """One unit of transferable state. Wire layout: ctype u16, flags u8, 0 u8, length u16, payload."""

    ctype: int
    payload: bytes = b""
    flags: int = 0

    def __post_init__(self):
        check_ctype(self.ctype)
        if not 0 <= self.flags <= 0xFF:
            raise Malformed("flags must fit in 8 bits")
        if len(self.payload) > 0xFFFF:
            raise Malformed("payload longer than 65535 bytes")

    @property
    def mandatory(self) -> bool:
        return bool(self.flags & MANDATORY)

    def encode(self) -> bytes:
        return _BLOCK_HEADER.pack(self.ctype, self.flags, 0, len(self.payload)) + self.payload

    @classmethod
    def decode_from(cls, data: bytes, pos: int = 0) -> tuple[ContextBlock, int]:
        if pos + _BLOCK_HEADER.size > len(data):
            raise Malformed("context block header truncated")
        ctype, flags, reserved, length = _BLOCK_HEADER.unpack_from(data, pos)
        if reserved != 0:
            raise Malformed("context block reserved byte must be 0")
        start = pos + _BLOCK_HEADER.size
        if start + length > len(data):
            raise Malformed("context block payload truncated")
        return cls(ctype, bytes(data[start : start + length]), flags), start + length

    @classmethod
    def decode(cls, data: bytes) -> ContextBlock:
        block, end = cls.decode_from(data)
        if end != len(data):
            raise Malformed("trailing bytes after context block")
        return block

    @staticmethod
    def decode_stream(data: bytes) -> list[ContextBlock]:
        blocks, pos = [], 0
        while pos < len(data):
            block, pos = ContextBlock.decode_from(data, pos)
            blocks.append(block)
        return blocks

    def pinholes(self) -> list[PinholeRule]:
        if self.ctype != ContextType.FIREWALL_STATE:
            raise Malformed(f"{ctype_name(self.ctype)} payload is not a pinhole list")
        return PinholeRule.decode_list(self.payload)


class Proto(enum.IntEnum):
    TCP = 6
    UDP = 17


@dataclass(frozen=True, order=True)
class PinholeRule:
    proto: Proto
    src: Locator
    dst: Locator
    expiry: int = 0  # absolute sim-time ms; 0 never expires

    def __post_init__(self):
        if self.dst.port == 0:
            raise Malformed("pinhole destination port must be set")
        if self.expiry < 0:
            raise Malformed("negative expiry")

    def expired(self, now: int) -> bool:
        return self.expiry != 0 and now >= self.expiry

    def encode(self) -> bytes:
        return bytes([self.proto]) + self.src.encode() + self.dst.encode() + struct.pack("!Q", self.expiry)

    @staticmethod
    def encode_list(rules) -> bytes:
        rules = list(rules)
        return struct.pack("!H", len(rules)) + b"".join(r.encode() for r in rules)

    @classmethod
    def decode_list(cls, data: bytes) -> list[PinholeRule]:
        if len(data) < 2:
            raise Malformed("pinhole list truncated")
        (count,) = struct.unpack_from("!H", data)
        pos, rules = 2, []
        for _ in range(count):
            if pos >= len(data):
                raise Malformed("pinhole list truncated")
            try:
                proto = Proto(data[pos])
            except ValueError as exc:
                raise Malformed(f"bad pinhole protocol {data[pos]}") from exc
            src, pos = Locator.decode_from(data, pos + 1)
            dst, pos = Locator.decode_from(data, pos)
            if pos + 8 > len(data):
                raise Malformed("pinhole expiry truncated")
            (expiry,) = struct.unpack_from("!Q", data, pos)
            pos += 8
            rules.append(cls(proto, src, dst, expiry))
        if pos != len(data):
            raise Malformed("trailing bytes after pinhole list")
        return rules

    def __str__(self):
        return f"{self.proto.name} {self.src} -> {self.dst}"


class Packet5(NamedTuple):
    proto: Proto
    src: Locator
    dst: Locator


def pinhole_matches(rule: PinholeRule, packet) -> bool:
    """Destination must match exactly; an unspecified source address or a 0 source port matches anything."""
    proto, src, dst = packet
    if proto != rule.proto:
        return False
    if dst != rule.dst:
        return False
    if rule.src.family is not src.family:
        return False
    if not rule.src.unspecified and rule.src.address != src.address:
        return False
    return rule.src.port == 0 or rule.src.port == src.port


class Kind(enum.IntEnum):
    """Trigger and notification kind codes. Codes >= CUSTOM_BASE are free for tools."""

    LOCATOR_CHANGE = 1
    INTERFACE_UP = 2
    INTERFACE_DOWN = 3
    HANDOVER_IMMINENT = 4
    HANDOVER_DONE = 5
    CONTEXT_READY = 6
    STM_PUSH = 0x10
    STM_PULL = 0x11
    STM_ACCEPT = 0x12
    STM_START = 0x13
    STM_ACK = 0x14
    STM_ERROR = 0x15
    STM_ABORT = 0x16
    STM_PAUSE = 0x17
    STM_CONT = 0x18
    STM_INSTALLED = 0x19


CUSTOM_BASE = 0x1000

STATE_CHANGING = frozenset(
    {
        Kind.LOCATOR_CHANGE,
        Kind.INTERFACE_UP,
        Kind.INTERFACE_DOWN,
        Kind.HANDOVER_IMMINENT,
        Kind.HANDOVER_DONE,
        Kind.CONTEXT_READY,
        Kind.STM_PUSH,
        Kind.STM_PULL,
        Kind.STM_START,
        Kind.STM_ABORT,
        Kind.STM_PAUSE,
        Kind.STM_CONT,
    }
)


def kind_name(code: int) -> str:
    try:
        return Kind(code).name
    except ValueError:
        return f"CUSTOM({code})"


@dataclass(frozen=True)
class Channel:
    """``Channel()`` is the broadcast channel; ``Channel("HIP")`` is private to one tool."""

    tool: str | None = None

    @classmethod
    def for_tool(cls, tool: ToolName | str) -> Channel:
        return cls(tool.value if isinstance(tool, ToolName) else tool)

    @property
    def common(self) -> bool:
        return self.tool is None

    def __str__(self):
        return "MTI-common" if self.tool is None else f"MTI-{self.tool}"


COMMON = Channel()


@dataclass(frozen=True)
class Trigger:
    channel: Channel
    kind: int
    payload: bytes = b""
    ts: int = 0

    def __post_init__(self):
        if self.kind < 0:
            raise Malformed("trigger kind must be non-negative")


def encode_kv(values: dict) -> bytes:
    """Encode a flat mapping as ``k=v;k=v`` UTF-8, the payload convention for triggers and notification bodies."""
    parts = []
    for key, value in values.items():
        text = str(value)
        if ";" in text or "=" in key:
            raise Malformed(f"cannot encode {key}={text!r}")
        parts.append(f"{key}={text}")
    return ";".join(parts).encode("utf-8")


def decode_kv(data: bytes) -> dict[str, str]:
    if not data:
        return {}
    out = {}
    for part in data.decode("utf-8").split(";"):
        key, sep, value = part.partition("=")
        if not sep:
            raise Malformed(f"bad key/value item {part!r}")
        out[key] = value
    return out
