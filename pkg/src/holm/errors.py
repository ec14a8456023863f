"""Exception hierarchy shared by every module.

Each exception carries a stable ``code`` string so traces, CLI diagnostics
and wire ERROR messages can name the failure without string matching.
"""

from __future__ import annotations


class HolmError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


class Malformed(HolmError):
    code = "MALFORMED"


# toolbox
class DuplicateRegistration(HolmError):
    code = "DUPLICATE_REGISTRATION"


class UnknownHandle(HolmError):
    code = "UNKNOWN_HANDLE"


class InvalidTransition(HolmError):
    code = "INVALID_TRANSITION"


class UnsupportedQuery(HolmError):
    code = "UNSUPPORTED_QUERY"


# selection
class NoCommonTool(HolmError):
    code = "NO_COMMON_TOOL"


class MandatoryFeatureUnavailable(HolmError):
    code = "MANDATORY_FEATURE_UNAVAILABLE"

    def __init__(self, missing):
        self.missing = frozenset(missing)
        names = ", ".join(sorted(f.name for f in self.missing))
        super().__init__(f"mandatory features not offered: {names}")


# stm
class StmError(HolmError):
    code = "STM_ERROR"


class NotInitialized(StmError):
    code = "NOT_INITIALIZED"


class AlreadyInitialized(StmError):
    code = "ALREADY_INITIALIZED"


class BadConfig(StmError):
    code = "BAD_CONFIG"


class EmptyTypes(BadConfig):
    code = "EMPTY_TYPES"


class NoSecurityAssoc(StmError):
    code = "NO_SECURITY_ASSOC"


class NoProvider(StmError):
    code = "NO_PROVIDER"


class BadState(StmError):
    code = "BAD_STATE"


class RejectedTypes(StmError):
    code = "REJECTED_TYPES"


class UnknownTransfer(StmError):
    code = "UNKNOWN_TRANSFER"


class DuplicateCtype(StmError):
    code = "DUPLICATE_CTYPE"


class UnknownPeer(StmError):
    code = "UNKNOWN_PEER"


class WireError(HolmError):
    """Raised by the STM codec; ``offset`` is the byte position of the fault."""

    code = "WIRE_ERROR"

    def __init__(self, message: str = "", offset: int = 0):
        super().__init__(f"{message} at offset {offset}" if message else f"{self.code} at offset {offset}")
        self.offset = offset


class BadMagic(WireError):
    code = "BAD_MAGIC"


class BadVersion(WireError):
    code = "BAD_VERSION"


class BadMsgType(WireError):
    code = "BAD_MSG_TYPE"


class Truncated(WireError):
    code = "TRUNCATED"


class TlvOverrun(WireError):
    code = "TLV_OVERRUN"


class TrailingData(WireError):
    code = "TRAILING_DATA"


# simnet
class ScenarioError(HolmError):
    """A scenario document failed validation; ``line`` is 1-based (0 = whole document)."""

    code = "PARSE_ERROR"

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class ParseError(ScenarioError):
    code = "PARSE_ERROR"


class UnknownNodeRef(ScenarioError):
    code = "UNKNOWN_NODE_REF"


class NegativeTime(ScenarioError):
    code = "NEGATIVE_TIME"


class ScenarioErrors(HolmError):
    """Aggregate of every problem found while loading one scenario."""

    code = "PARSE_ERROR"

    def __init__(self, errors: list[ScenarioError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))
        if self.errors:
            self.code = self.errors[0].code


class TimeLimitExceeded(HolmError):
    code = "TIME_LIMIT_EXCEEDED"
