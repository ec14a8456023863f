"""Reference messages for every msg_type, used for the bundled hex vectors and `holm selftest`."""

from __future__ import annotations

from importlib import resources

from holm.core import ContextBlock, ContextType, Locator, MANDATORY, NodeId, PinholeRule, Proto
from holm.stm.wire import (
    ControlOp,
    ErrorCode,
    Flag,
    MsgType,
    StmWireMessage,
    parse_message,
    serialize_message,
    tlv_block,
    tlv_control,
    tlv_error,
    tlv_fragment,
    tlv_locator,
    tlv_mask,
    tlv_mobile,
    tlv_types,
)

# the transfer FW2 opens in the bundled handover scenario
FIG2_TRANSFER = 0x8C71000000000001


def _fig2_pinholes() -> bytes:
    # FW1 ships the rules as it holds them; FW2 rewrites the destination on install
    old = Locator.v4("10.1.0.10")
    rules = [
        PinholeRule(Proto.UDP, Locator.v4("192.0.2.11"), old.with_port(5004)),
        PinholeRule(Proto.UDP, Locator.v4("192.0.2.12"), old.with_port(5006)),
    ]
    return PinholeRule.encode_list(rules)


def golden_messages() -> dict[str, StmWireMessage]:
    tid = FIG2_TRANSFER
    return {
        "ctx_request": StmWireMessage(
            MsgType.CTX_REQUEST,
            tid,
            (tlv_mobile(NodeId("MN")), tlv_locator(Locator.v4("10.1.0.10")), tlv_types([ContextType.FIREWALL_STATE])),
            Flag.EXPEDITED | Flag.PULL,
        ),
        "ctx_response": StmWireMessage(
            MsgType.CTX_RESPONSE,
            tid,
            (tlv_mask(0b1), tlv_block(ContextBlock(ContextType.FIREWALL_STATE, _fig2_pinholes(), MANDATORY))),
            Flag.EXPEDITED | Flag.FINAL_FRAGMENT | Flag.PULL,
        ),
        "ctx_data": StmWireMessage(MsgType.CTX_DATA, tid, (tlv_fragment(0, 5, b"hello"),), Flag.FINAL_FRAGMENT),
        "install_ack": StmWireMessage(MsgType.INSTALL_ACK, tid),
        "error": StmWireMessage(MsgType.ERROR, tid, (tlv_error(ErrorCode.UNKNOWN_TRANSFER, "no such transfer"),)),
        "control": StmWireMessage(MsgType.CONTROL, tid, (tlv_control(ControlOp.PAUSE, 2048),)),
    }


def vector_hex(msg: StmWireMessage) -> str:
    return serialize_message(msg).hex() + "\n"


def read_hex(text: str) -> bytes:
    """Hex text to bytes; whitespace and ``#`` comments are ignored."""
    cleaned = "".join(line.split("#", 1)[0] for line in text.splitlines())
    return bytes.fromhex("".join(cleaned.split()))


def bundled_vectors() -> dict[str, bytes]:
    root = resources.files("holm.data") / "vectors"
    out = {}
    for p in sorted(root.iterdir(), key=lambda p: p.name):
        if p.name.endswith(".hex"):
            out[p.name[:-4]] = read_hex(p.read_text(encoding="utf-8"))
    return out


def check_bundled_vectors() -> list[str]:
    """Mismatches between the bundled vector files and the reference messages (empty when all agree)."""
    problems = []
    files = bundled_vectors()
    for name, msg in golden_messages().items():
        data = files.get(name)
        if data is None:
            problems.append(f"{name}: vector file missing")
        elif data != serialize_message(msg):
            problems.append(f"{name}: bytes differ from the reference message")
        elif parse_message(data) != msg:
            problems.append(f"{name}: does not parse back to the reference message")
    return problems
