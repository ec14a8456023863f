"""Text forms of capability profiles, descriptors and policies.

Descriptor token::

    NAME/MAJOR.MINOR[:STACKS[:FEATURES[:APPS]]]

with ``+``-separated sets, e.g. ``MIPv6/1.0:V6:ROUTE_OPT+IPSEC_PROT:GENERIC``.
An empty STACKS field means "all stacks of the owning profile"; an empty
APPS field means GENERIC.

Profile file (``key = value`` lines, ``#`` comments)::

    node = MN
    stacks = V4+V6
    tool = HIP/1.0:V4+V6:BUILTIN_SECURITY

Policy file: one criterion per line, ``[criterion =] HARDNESS KIND ARGUMENT``.
"""

from __future__ import annotations

from pathlib import Path

from holm.core import AppClass, Family, FeatureId, ToolDescriptor, ToolName, parse_node_id
from holm.errors import Malformed
from holm.selection import CapabilityProfile, Criterion, CriterionKind, Hardness, PolicySet


def _split_set(text: str) -> list[str]:
    return [t for t in (p.strip() for p in text.split("+")) if t]


def _enum(cls, name: str, what: str):
    try:
        return cls[name]
    except KeyError:
        raise Malformed(f"unknown {what} {name!r}") from None


def parse_stacks(text: str) -> frozenset[Family]:
    return frozenset(_enum(Family, s, "stack") for s in _split_set(text))


def parse_tool_name(text: str) -> ToolName:
    try:
        return ToolName(text.strip())
    except ValueError:
        raise Malformed(f"unknown tool {text!r}") from None


def parse_descriptor(token: str, default_stacks=frozenset({Family.V4, Family.V6})) -> ToolDescriptor:
    head, *rest = token.strip().split(":")
    name, sep, version = head.partition("/")
    if not sep:
        version = "1.0"
    major, dot, minor = version.partition(".")
    if not major.isdigit() or (dot and not minor.isdigit()):
        raise Malformed(f"bad version in {token!r}")
    if len(rest) > 3:
        raise Malformed(f"too many fields in {token!r}")
    rest += [""] * (3 - len(rest))
    stacks = parse_stacks(rest[0]) or frozenset(default_stacks)
    features = frozenset(FeatureId.parse(f) for f in _split_set(rest[1]))
    apps = frozenset(_enum(AppClass, a, "application class") for a in _split_set(rest[2])) or frozenset(
        {AppClass.GENERIC}
    )
    return ToolDescriptor(parse_tool_name(name), (int(major), int(minor or 0)), stacks, features, apps)


def format_descriptor(desc: ToolDescriptor) -> str:
    def join(items):
        return "+".join(sorted(i.name for i in items))

    return f"{desc}:{join(desc.stacks)}:{join(desc.features)}:{join(desc.app_classes)}"


def format_profile(profile: CapabilityProfile) -> str:
    """Inverse of :func:`parse_profile` (tools in tie-break order)."""
    lines = [f"node = {profile.node}", "stacks = " + "+".join(sorted(s.name for s in profile.stacks))]
    for desc in sorted(profile.tools, key=lambda d: (d.tool.value, d.version)):
        lines.append(f"tool = {format_descriptor(desc)}")
    return "\n".join(lines) + "\n"


def parse_criterion(text: str) -> Criterion:
    parts = text.split()
    if len(parts) != 3:
        raise Malformed(f"criterion needs HARDNESS KIND ARGUMENT: {text!r}")
    hardness = _enum(Hardness, parts[0], "hardness")
    kind = _enum(CriterionKind, parts[1], "criterion kind")
    arg = parts[2]
    if kind in (CriterionKind.REQUIRE_FEATURE, CriterionKind.PREFER_FEATURE):
        value = FeatureId.parse(arg)
    elif kind is CriterionKind.REQUIRE_APP_CLASS:
        value = _enum(AppClass, arg, "application class")
    elif kind is CriterionKind.REQUIRE_STACK:
        value = _enum(Family, arg, "stack")
    else:
        value = parse_tool_name(arg)
    return Criterion(kind, value, hardness)


def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_profile(text: str) -> CapabilityProfile:
    node, stacks, tokens = None, None, []
    for lineno, line in _lines(text):
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise Malformed(f"line {lineno}: expected key = value")
        if key == "node":
            node = parse_node_id(value)
        elif key == "stacks":
            stacks = parse_stacks(value)
        elif key == "tool":
            tokens.append((lineno, value))
        else:
            raise Malformed(f"line {lineno}: unknown profile key {key!r}")
    if node is None:
        raise Malformed("profile has no node line")
    stacks = stacks or frozenset({Family.V4, Family.V6})
    tools = []
    for lineno, token in tokens:
        try:
            tools.append(parse_descriptor(token, stacks))
        except Malformed as exc:
            raise Malformed(f"line {lineno}: {exc}") from None
    return CapabilityProfile(node, frozenset(tools), stacks)


def parse_policy(text: str) -> PolicySet:
    criteria = []
    for lineno, line in _lines(text):
        key, sep, value = line.partition("=")
        if sep:
            if key.strip() != "criterion":
                raise Malformed(f"line {lineno}: unknown policy key {key.strip()!r}")
            line = value
        try:
            criteria.append(parse_criterion(line))
        except Malformed as exc:
            raise Malformed(f"line {lineno}: {exc}") from None
    return PolicySet(tuple(criteria))


def load_profile(path) -> CapabilityProfile:
    return parse_profile(Path(path).read_text(encoding="utf-8"))


def load_policy(path) -> PolicySet:
    return parse_policy(Path(path).read_text(encoding="utf-8"))
