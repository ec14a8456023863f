"""The mobility toolbox coordinator: tool registry, trigger channels and the MTI calls.

Tools subscribe to the broadcast channel (``MTI-common``) and to a private
channel named after themselves (``MTI-<tool>``). The coordinator controls
them through four calls: change notifications in both directions, set mode,
get mode and status queries.
"""

from __future__ import annotations

import enum
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from holm.core import (
    COMMON,
    STATE_CHANGING,
    Channel,
    Kind,
    ToolDescriptor,
    Trigger,
    decode_kv,
    encode_kv,
    kind_name,
)
from holm.errors import (
    DuplicateRegistration,
    InvalidTransition,
    Malformed,
    UnknownHandle,
    UnsupportedQuery,
)

log = logging.getLogger(__name__)


class ToolMode(enum.Enum):
    UNINITIALIZED = "UNINITIALIZED"
    READY = "READY"
    RUNNING = "RUNNING"
    FROZEN = "FROZEN"
    PAUSED = "PAUSED"
    TERMINATED = "TERMINATED"


class ModeCommand(enum.Enum):
    INIT = "INIT"
    RUN = "RUN"
    FREEZE = "FREEZE"
    THAW = "THAW"
    PAUSE = "PAUSE"
    CONT = "CONT"
    TERMINATE = "TERMINATE"


MODE_TABLE: dict[tuple[ToolMode, ModeCommand], ToolMode] = {
    (ToolMode.UNINITIALIZED, ModeCommand.INIT): ToolMode.READY,
    (ToolMode.READY, ModeCommand.RUN): ToolMode.RUNNING,
    (ToolMode.RUNNING, ModeCommand.FREEZE): ToolMode.FROZEN,
    (ToolMode.FROZEN, ModeCommand.THAW): ToolMode.RUNNING,
    (ToolMode.RUNNING, ModeCommand.PAUSE): ToolMode.PAUSED,
    (ToolMode.PAUSED, ModeCommand.CONT): ToolMode.RUNNING,
}
MODE_TABLE.update(
    {(mode, ModeCommand.TERMINATE): ToolMode.TERMINATED for mode in ToolMode if mode is not ToolMode.TERMINATED}
)


def next_mode(mode: ToolMode, command: ModeCommand) -> ToolMode:
    try:
        return MODE_TABLE[(mode, command)]
    except KeyError:
        raise InvalidTransition(f"{command.value} not valid in mode {mode.value}") from None


class Direction(enum.IntEnum):
    TOOLBOX_TO_TOOL = 1
    TOOL_TO_TOOLBOX = 2


_NOTIF_HEADER = struct.Struct("!BIQB")


@dataclass(frozen=True)
class Notification:
    """A change notification: fixed header (direction, tool, kind, ts) plus an opaque body."""

    direction: Direction
    tool: str
    kind: int
    ts: int = 0
    body: bytes = b""

    @property
    def header(self) -> tuple[Direction, str, int, int]:
        return (self.direction, self.tool, self.kind, self.ts)

    @property
    def state_changing(self) -> bool:
        return self.kind in STATE_CHANGING

    def values(self) -> dict[str, str]:
        """Body decoded with the key/value convention; raises Malformed for other bodies."""
        return decode_kv(self.body)

    @classmethod
    def to_tool(cls, tool: str, kind: int, ts: int = 0, **values) -> Notification:
        return cls(Direction.TOOLBOX_TO_TOOL, tool, kind, ts, encode_kv(values))

    @classmethod
    def to_toolbox(cls, tool: str, kind: int, ts: int = 0, **values) -> Notification:
        return cls(Direction.TOOL_TO_TOOLBOX, tool, kind, ts, encode_kv(values))

    def to_bytes(self) -> bytes:
        name = self.tool.encode("utf-8")
        return _NOTIF_HEADER.pack(self.direction, self.kind, self.ts, len(name)) + name + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> Notification:
        if len(data) < _NOTIF_HEADER.size:
            raise Malformed("notification header truncated")
        direction, kind, ts, name_len = _NOTIF_HEADER.unpack_from(data)
        end = _NOTIF_HEADER.size + name_len
        if end > len(data):
            raise Malformed("notification tool name truncated")
        try:
            direction = Direction(direction)
        except ValueError as exc:
            raise Malformed(f"bad notification direction {direction}") from exc
        return cls(direction, data[_NOTIF_HEADER.size : end].decode("utf-8"), kind, ts, bytes(data[end:]))

    def __str__(self):
        return f"{self.tool}:{kind_name(self.kind)}@{self.ts}"


class ToolEndpoint:
    """Base class every tool plugin derives from.

    The toolbox never calls the ``on_*`` hooks directly; it goes through the
    ``deliver_*`` wrappers, which implement the frozen-mode rule: while the
    tool is FROZEN, state-changing triggers and notifications are counted in
    ``ignored`` and dropped, but queries are still answered.
    """

    def __init__(self):
        self.ignored = 0

    def deliver_trigger(self, trigger: Trigger, mode: ToolMode) -> None:
        if mode is ToolMode.FROZEN and trigger.kind in STATE_CHANGING:
            self.ignored += 1
            return
        self.on_trigger(trigger)

    def deliver_notification(self, notification: Notification, mode: ToolMode) -> None:
        if mode is ToolMode.FROZEN and notification.state_changing:
            self.ignored += 1
            return
        self.on_notification(notification)

    def on_trigger(self, trigger: Trigger) -> None:
        pass

    def on_notification(self, notification: Notification) -> None:
        pass

    def on_mode(self, command: ModeCommand, mode: ToolMode) -> None:
        pass

    def on_query(self, key: str) -> int | str:
        raise UnsupportedQuery(f"query {key!r} not understood")


class StubTool(ToolEndpoint):
    """Stand-in for a real mobility daemon: records what it sees, answers a few queries."""

    def __init__(self, attached_hosts: int | None = None, locator: str = ""):
        super().__init__()
        self.attached_hosts = attached_hosts
        self.locator = locator
        self.triggers: list[Trigger] = []
        self.notifications: list[Notification] = []
        self.modes: list[ToolMode] = []

    def on_trigger(self, trigger):
        self.triggers.append(trigger)
        if trigger.kind == Kind.LOCATOR_CHANGE:
            self.locator = decode_kv(trigger.payload).get("locator", self.locator)

    def on_notification(self, notification):
        self.notifications.append(notification)
        if notification.kind == Kind.LOCATOR_CHANGE:
            self.locator = notification.values().get("locator", self.locator)

    def on_mode(self, command, mode):
        self.modes.append(mode)

    def on_query(self, key):
        if key == "attached_hosts" and self.attached_hosts is not None:
            return self.attached_hosts
        if key == "locator":
            return self.locator
        return super().on_query(key)


@dataclass
class ToolRegistration:
    handle: int
    descriptor: ToolDescriptor
    endpoint: ToolEndpoint
    mode: ToolMode = ToolMode.UNINITIALIZED
    live: bool = True

    @property
    def name(self) -> str:
        return self.descriptor.tool.value

    @property
    def channels(self) -> tuple[Channel, Channel]:
        return (COMMON, Channel(self.name))


@dataclass
class ToolboxRecord:
    kind: str
    fields: dict = field(default_factory=dict)


class Toolbox:
    """One coordinator instance. All public calls are serialized by one lock.

    Delivery is synchronous. A sink that publishes while a delivery is in
    progress has its trigger queued; queued triggers go out, in order, once
    the outer publish finishes.
    """

    def __init__(self, name: str = "HOLM", clock: Callable[[], int] | None = None, on_record=None):
        self.name = name
        self.clock = clock or (lambda: 0)
        self.on_record = on_record
        self.records: list[ToolboxRecord] = []
        self.reports: list[tuple[int, Notification]] = []
        self._regs: dict[int, ToolRegistration] = {}
        self._next_handle = 1
        self._lock = threading.RLock()
        self._dispatching = False
        self._pending: deque[Trigger] = deque()
        self._report_listeners: list[Callable[[ToolRegistration, Notification], None]] = []

    def _record(self, kind: str, /, **fields) -> None:
        rec = ToolboxRecord(kind, fields)
        self.records.append(rec)
        if kind.startswith("WARN"):
            log.warning("%s %s %s", self.name, kind, fields)
        if self.on_record is not None:
            self.on_record(rec)

    def _live(self, handle: int) -> ToolRegistration:
        reg = self._regs.get(handle)
        if reg is None or not reg.live:
            raise UnknownHandle(f"no live registration with handle {handle}")
        return reg

    @property
    def registrations(self) -> list[ToolRegistration]:
        return [r for r in self._regs.values() if r.live]

    def find(self, tool) -> ToolRegistration | None:
        name = getattr(tool, "value", tool)
        for reg in self._regs.values():
            if reg.live and reg.name == name:
                return reg
        return None

    def register_tool(self, descriptor: ToolDescriptor, endpoint: ToolEndpoint) -> ToolRegistration:
        with self._lock:
            for reg in self._regs.values():
                if reg.live and reg.descriptor.key == descriptor.key:
                    raise DuplicateRegistration(f"{descriptor} already registered (handle {reg.handle})")
            reg = ToolRegistration(self._next_handle, descriptor, endpoint)
            self._next_handle += 1
            self._regs[reg.handle] = reg
            self._record("REGISTER", handle=reg.handle, tool=str(descriptor))
            return reg

    def deregister_tool(self, handle: int) -> None:
        with self._lock:
            reg = self._live(handle)
            reg.live = False
            kept = deque()
            for trig in self._pending:
                if trig.channel.tool == reg.name and self.find(reg.name) is None:
                    self._record("WARN_DROPPED_TRIGGER", handle=handle, channel=str(trig.channel), kind=kind_name(trig.kind))
                else:
                    kept.append(trig)
            self._pending = kept
            self._record("DEREGISTER", handle=handle, tool=str(reg.descriptor))

    def subscribers(self, channel: Channel) -> list[ToolRegistration]:
        if channel.common:
            return self.registrations
        return [r for r in self.registrations if r.name == channel.tool]

    def publish_trigger(self, trigger: Trigger) -> int:
        """Deliver ``trigger`` to its channel's subscribers; returns how many sinks were invoked.

        Re-entrant publishes return 0 and are delivered after the current one.
        """
        with self._lock:
            if self._dispatching:
                self._pending.append(trigger)
                return 0
            self._dispatching = True
            try:
                delivered = self._dispatch(trigger)
                while self._pending:
                    self._dispatch(self._pending.popleft())
            finally:
                self._dispatching = False
            return delivered

    def _dispatch(self, trigger: Trigger) -> int:
        self._record("PUBLISH", channel=str(trigger.channel), kind=kind_name(trigger.kind))
        delivered = 0
        for reg in self.subscribers(trigger.channel):
            if not reg.live:
                continue
            reg.endpoint.deliver_trigger(trigger, reg.mode)
            delivered += 1
        if delivered == 0:
            self._record("WARN_NO_SUBSCRIBER", channel=str(trigger.channel), kind=kind_name(trigger.kind))
        else:
            self._record("TRIGGER", channel=str(trigger.channel), kind=kind_name(trigger.kind), delivered=delivered)
        return delivered

    def notify_change(self, handle: int, notification: Notification) -> None:
        with self._lock:
            reg = self._live(handle)
            if notification.direction is not Direction.TOOLBOX_TO_TOOL:
                raise Malformed("notify_change takes toolbox-to-tool notifications")
            reg.endpoint.deliver_notification(notification, reg.mode)

    def report_change(self, handle: int, notification: Notification) -> None:
        with self._lock:
            reg = self._live(handle)
            if notification.direction is not Direction.TOOL_TO_TOOLBOX:
                raise Malformed("report_change takes tool-to-toolbox notifications")
            self.reports.append((handle, notification))
            self._record("REPORT", tool=reg.name, kind=kind_name(notification.kind))
            for listener in list(self._report_listeners):
                listener(reg, notification)

    def add_report_listener(self, listener: Callable[[ToolRegistration, Notification], None]) -> None:
        self._report_listeners.append(listener)

    def set_mode(self, handle: int, command: ModeCommand) -> ToolMode:
        with self._lock:
            reg = self._live(handle)
            mode = next_mode(reg.mode, command)
            reg.mode = mode
            reg.endpoint.on_mode(command, mode)
            self._record("SET_MODE", tool=reg.name, command=command.value, mode=mode.value)
            return mode

    def get_mode(self, handle: int) -> ToolMode:
        with self._lock:
            return self._live(handle).mode

    def query_status(self, handle: int, key: str) -> int | str:
        with self._lock:
            return self._live(handle).endpoint.on_query(key)
