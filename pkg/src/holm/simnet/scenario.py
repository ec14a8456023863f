"""Scenario documents: a sectioned ``key = value`` text format, parsed into dataclasses.

See docs/scenario-format.md for the grammar. Every problem found is
collected with its line number; :func:`load_scenario` raises one
:class:`ScenarioErrors` carrying all of them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources
from pathlib import Path
from typing import Optional

from holm.core import FeatureId, Locator, parse_locator
from holm.errors import Malformed, NegativeTime, ParseError, ScenarioError, ScenarioErrors, UnknownNodeRef
from holm.profiles import parse_criterion, parse_descriptor, parse_stacks
from holm.selection import Hardness, PolicySet
from holm.stm.session import StmConfig, TransportMode


class NodeKind(enum.Enum):
    MOBILE = "MOBILE"
    CORRESPONDENT = "CORRESPONDENT"
    FIREWALL = "FIREWALL"
    ACCESS_ROUTER = "ACCESS_ROUTER"
    SIP_SERVER = "SIP_SERVER"
    HOME_AGENT = "HOME_AGENT"


@dataclass
class NodeSpec:
    id: str
    kind: NodeKind
    line: int = 0
    addresses: dict[str, Locator] = field(default_factory=dict)  # "" = the node's own address
    attach: Optional[str] = None
    guards: tuple[str, ...] = ()
    alg_delay_ms: Optional[int] = None
    stacks: str = "V4+V6"
    tools: tuple[str, ...] = ()
    offers: tuple[FeatureId, ...] = ()
    advertise: tuple[tuple[FeatureId, tuple[tuple[str, str], ...]], ...] = ()

    @property
    def address(self) -> Locator:
        if "" in self.addresses:
            return self.addresses[""]
        if self.attach in self.addresses:
            return self.addresses[self.attach]
        return next(iter(self.addresses.values()))


@dataclass
class LinkSpec:
    a: str
    b: str
    latency_ms: int
    drop: frozenset[int] = frozenset()
    loss_rate: float = 0.0
    line: int = 0


@dataclass
class FlowSpec:
    name: str
    src: str
    dst: str
    port: int
    interval_ms: int = 20
    start_ms: int = 0
    stop_ms: Optional[int] = None
    line: int = 0


@dataclass
class EventSpec:
    ts: int
    kind: str  # handover | negotiate | features | plan
    node: str
    target: str
    source: Optional[str] = None  # handover: RAN being left
    line: int = 0


@dataclass
class SimConfig:
    duration_ms: int = 2000
    stm_enabled: bool = True
    sip_gap_ms: int = 2
    sip_proc_ms: int = 1
    reinvite_fallback_ms: int = 3000
    time_limit_ms: int = 600_000


@dataclass
class ScenarioScript:
    name: str = "scenario"
    sim: SimConfig = field(default_factory=SimConfig)
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    links: list[LinkSpec] = field(default_factory=list)
    flows: list[FlowSpec] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)
    policy: PolicySet = field(default_factory=PolicySet)
    requests: list[tuple[FeatureId, Hardness]] = field(default_factory=list)
    needs: list[tuple[FeatureId, tuple[tuple[str, str], ...]]] = field(default_factory=list)
    stm: dict[str, StmConfig] = field(default_factory=dict)
    security_assocs: set[frozenset[str]] = field(default_factory=set)

    @property
    def handovers(self) -> list[EventSpec]:
        return [e for e in self.events if e.kind == "handover"]


SECTIONS = ("sim", "nodes", "links", "flows", "events", "policy", "stm")
EVENT_KINDS = ("handover", "negotiate", "features", "plan")


def parse_host(text: str) -> Locator:
    """A locator whose port may be omitted (``v4:10.0.0.1``)."""
    try:
        return parse_locator(text)
    except Malformed:
        return parse_locator(text + ":0")


def _int(text: str, what: str, line: int, minimum: Optional[int] = 0) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {text!r}", line) from None
    if minimum is not None and value < minimum:
        cls = NegativeTime if value < 0 and what.endswith("_ms") else ParseError
        raise cls(f"{what} must be >= {minimum}, got {value}", line)
    return value


def _bool(text: str, what: str, line: int) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ParseError(f"{what} must be on/off, got {text!r}", line)


def _attrs(tokens: list[str], line: int) -> list[tuple[str, str]]:
    out = []
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ParseError(f"expected key=value, got {tok!r}", line)
        out.append((key, value))
    return out


def _params(text: str) -> tuple[tuple[str, str], ...]:
    items = []
    for part in filter(None, text.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise Malformed(f"expected k=v in {text!r}")
        items.append((k.strip(), v.strip()))
    return tuple(items)


class _Parser:
    def __init__(self, text: str, name: str):
        self.script = ScenarioScript(name=name)
        self.errors: list[ScenarioError] = []
        self.text = text
        self._sa_lines: list[tuple[list[str], int]] = []
        self._stm_lines: dict[str, int] = {}

    def error(self, exc: Exception, line: int) -> None:
        if isinstance(exc, ScenarioError):
            self.errors.append(exc)
        else:
            self.errors.append(ParseError(str(exc), line))

    def parse(self) -> ScenarioScript:
        section = None
        entries = 0
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SECTIONS:
                    self.error(ParseError(f"unknown section [{section}]", lineno), lineno)
                    section = "?"
                continue
            if section is None:
                self.error(ParseError("entry outside of any section", lineno), lineno)
                continue
            if section == "?":
                continue
            key, sep, value = line.partition("=")
            if not sep:
                self.error(ParseError("expected key = value", lineno), lineno)
                continue
            entries += 1
            try:
                getattr(self, "_" + section)(key.strip(), value.strip(), lineno)
            except (ScenarioError, Malformed, ValueError) as exc:
                self.error(exc, lineno)
        if entries == 0 and not self.errors:
            self.errors.append(ParseError("empty scenario", 0))
        if not self.script.nodes and entries:
            self.errors.append(ParseError("scenario defines no nodes", 0))
        self._check_refs()
        if self.errors:
            raise ScenarioErrors(self.errors)
        return self.script

    # sections

    def _sim(self, key, value, line):
        sim = self.script.sim
        if key == "stm":
            sim.stm_enabled = _bool(value, key, line)
        elif key in {f.name for f in dc_fields(SimConfig)} and key != "stm_enabled":
            setattr(sim, key, _int(value, key, line, minimum=0))
        else:
            raise ParseError(f"unknown [sim] key {key!r}", line)

    def _nodes(self, key, value, line):
        if key in self.script.nodes:
            raise ParseError(f"node {key} defined twice", line)
        kind_text, *tokens = value.split()
        try:
            kind = NodeKind(kind_text)
        except ValueError:
            raise ParseError(f"unknown node kind {kind_text!r}", line) from None
        spec = NodeSpec(key, kind, line)
        advertise = []
        for k, v in _attrs(tokens, line):
            if k == "addr":
                spec.addresses[""] = parse_host(v)
            elif k.startswith("addr."):
                spec.addresses[k[5:]] = parse_host(v)
            elif k == "attach":
                spec.attach = v
            elif k == "guards":
                spec.guards = tuple(filter(None, v.split(",")))
            elif k == "alg_delay_ms":
                spec.alg_delay_ms = _int(v, k, line)
            elif k == "stacks":
                parse_stacks(v)
                spec.stacks = v
            elif k == "tools":
                spec.tools = tuple(filter(None, v.split(",")))
                for tok in spec.tools:
                    parse_descriptor(tok)
            elif k == "offers":
                spec.offers = tuple(FeatureId.parse(f) for f in v.split("+") if f)
            elif k == "advertise":
                feat, _, params = v.partition(":")
                advertise.append((FeatureId.parse(feat), _params(params)))
            else:
                raise ParseError(f"unknown node attribute {k!r}", line)
        spec.advertise = tuple(advertise)
        if not spec.addresses:
            raise ParseError(f"node {key} has no address", line)
        if kind is NodeKind.MOBILE and spec.attach is None:
            raise ParseError(f"mobile node {key} needs attach=", line)
        self.script.nodes[key] = spec

    def _links(self, key, value, line):
        a, sep, b = key.partition("-")
        if not sep or not a.strip() or not b.strip():
            raise ParseError("link key must be A - B", line)
        latency, *tokens = value.split()
        spec = LinkSpec(a.strip(), b.strip(), _int(latency, "latency_ms", line), line=line)
        for k, v in _attrs(tokens, line):
            if k == "drop":
                spec.drop = frozenset(_int(i, "drop index", line) for i in v.split(",") if i)
            elif k == "loss":
                spec.loss_rate = float(v)
                if not 0.0 <= spec.loss_rate <= 1.0:
                    raise ParseError("loss must be within 0..1", line)
            else:
                raise ParseError(f"unknown link attribute {k!r}", line)
        self.script.links.append(spec)

    def _flows(self, key, value, line):
        tokens = value.split()
        if len(tokens) < 3 or tokens[1] != "->":
            raise ParseError("flow must be SRC -> DST port=N ...", line)
        spec = FlowSpec(key, tokens[0], tokens[2], 0, line=line)
        for k, v in _attrs(tokens[3:], line):
            if k == "port":
                spec.port = _int(v, k, line, minimum=1)
            elif k in ("interval_ms", "start_ms", "stop_ms"):
                setattr(spec, k, _int(v, k, line, minimum=1 if k == "interval_ms" else 0))
            else:
                raise ParseError(f"unknown flow attribute {k!r}", line)
        if spec.port == 0:
            raise ParseError("flow needs port=", line)
        self.script.flows.append(spec)

    def _events(self, key, value, line):
        if key not in EVENT_KINDS:
            raise ParseError(f"unknown event {key!r}", line)
        tokens = value.split()
        if not tokens:
            raise ParseError("event needs a time", line)
        ts = _int(tokens[0], "event time_ms", line, minimum=0)
        if self.script.events and ts < self.script.events[-1].ts:
            raise ParseError("event times must be non-decreasing", line)
        if key == "handover":
            if len(tokens) != 5 or tokens[3] != "->":
                raise ParseError("handover = T NODE FROM -> TO", line)
            ev = EventSpec(ts, key, tokens[1], tokens[4], tokens[2], line)
        else:
            if len(tokens) != 3:
                raise ParseError(f"{key} = T NODE PEER", line)
            ev = EventSpec(ts, key, tokens[1], tokens[2], line=line)
        self.script.events.append(ev)

    def _policy(self, key, value, line):
        s = self.script
        if key == "criterion":
            s.policy = PolicySet(s.policy.criteria + (parse_criterion(value),))
        elif key == "request":
            parts = value.split()
            if len(parts) != 2:
                raise ParseError("request = FEATURE HARD|SOFT", line)
            try:
                hardness = Hardness[parts[1]]
            except KeyError:
                raise ParseError(f"unknown hardness {parts[1]!r}", line) from None
            s.requests.append((FeatureId.parse(parts[0]), hardness))
        elif key == "need":
            feat, *params = value.split()
            s.needs.append((FeatureId.parse(feat), _params(",".join(params))))
        else:
            raise ParseError(f"unknown [policy] key {key!r}", line)

    def _stm(self, key, value, line):
        if key == "sa":
            names = [n.strip() for n in value.split(",") if n.strip()]
            if len(names) != 2:
                raise ParseError("sa = NODE, NODE", line)
            self.script.security_assocs.add(frozenset(names))
            self._sa_lines.append((names, line))
            return
        cfg = StmConfig()
        known = {f.name for f in dc_fields(StmConfig)}
        for k, v in _attrs(value.split(), line):
            if k not in known:
                raise ParseError(f"unknown STM setting {k!r}", line)
            if k == "transport":
                try:
                    cfg.transport = TransportMode(v.upper())
                except ValueError:
                    raise ParseError(f"unknown transport {v!r}", line) from None
            else:
                setattr(cfg, k, _int(v, k, line, minimum=None))
        try:
            cfg.validate()
        except Exception as exc:
            raise ParseError(str(exc), line) from None
        self.script.stm[key] = cfg
        self._stm_lines[key] = line

    # references

    def _check_refs(self) -> None:
        s = self.script
        known = s.nodes

        def ref(name, line, what):
            if name not in known:
                self.errors.append(UnknownNodeRef(f"{what} references undefined node {name!r}", line))
                return False
            return True

        for n in s.nodes.values():
            if n.attach is not None:
                ref(n.attach, n.line, f"node {n.id} attach")
            for g in n.guards:
                ref(g, n.line, f"node {n.id} guards")
        for link in s.links:
            ref(link.a, link.line, "link")
            ref(link.b, link.line, "link")
        for f in s.flows:
            ref(f.src, f.line, f"flow {f.name}")
            ref(f.dst, f.line, f"flow {f.name}")
        for e in s.events:
            ok = ref(e.node, e.line, f"{e.kind} event")
            ref(e.target, e.line, f"{e.kind} event")
            if e.source is not None:
                ref(e.source, e.line, f"{e.kind} event")
            if ok and e.kind == "handover" and known[e.node].kind is not NodeKind.MOBILE:
                self.errors.append(ParseError(f"handover of non-mobile node {e.node}", e.line))
        for name, line in self._stm_lines.items():
            ref(name, line, "[stm]")
        for names, line in self._sa_lines:
            for name in names:
                ref(name, line, "sa")
        self.errors.sort(key=lambda e: e.line)


def parse_scenario(text: str, name: str = "scenario") -> ScenarioScript:
    return _Parser(text, name).parse()


def load_scenario(document, name: Optional[str] = None) -> ScenarioScript:
    """Parse bytes, text, or a path to a scenario file."""
    if isinstance(document, Path):
        return parse_scenario(document.read_text(encoding="utf-8"), name or document.stem)
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioErrors([ParseError(f"scenario is not UTF-8: {exc}")]) from None
    return parse_scenario(document, name or "scenario")


def bundled_names() -> list[str]:
    root = resources.files("holm.data") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".scn"))


def bundled_text(name: str) -> str:
    return (resources.files("holm.data") / "scenarios" / name).read_text(encoding="utf-8")


def load_bundled(name: str) -> ScenarioScript:
    if not name.endswith(".scn"):
        name += ".scn"
    return parse_scenario(bundled_text(name), name[:-4])
