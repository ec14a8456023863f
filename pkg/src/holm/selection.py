"""Tool and feature selection for the three negotiation situations.

* peer protocol negotiation between two end hosts,
* feature negotiation against a provider's home agent (or similar middle box),
* planning which access-network services to activate.

Everything here is a pure function of its inputs, so both peers of a
negotiation can evaluate it over the exchanged profiles and reach the same
answer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Union

from holm.core import AppClass, Family, FeatureId, NodeId, ToolDescriptor, ToolName
from holm.errors import Malformed, MandatoryFeatureUnavailable, NoCommonTool


class CriterionKind(enum.Enum):
    REQUIRE_FEATURE = "REQUIRE_FEATURE"
    REQUIRE_APP_CLASS = "REQUIRE_APP_CLASS"
    REQUIRE_STACK = "REQUIRE_STACK"
    PREFER_TOOL = "PREFER_TOOL"
    PREFER_FEATURE = "PREFER_FEATURE"


class Hardness(enum.Enum):
    HARD = "HARD"
    SOFT = "SOFT"


_ARG_TYPES = {
    CriterionKind.REQUIRE_FEATURE: FeatureId,
    CriterionKind.PREFER_FEATURE: FeatureId,
    CriterionKind.REQUIRE_APP_CLASS: AppClass,
    CriterionKind.REQUIRE_STACK: Family,
    CriterionKind.PREFER_TOOL: ToolName,
}


@dataclass(frozen=True)
class Criterion:
    kind: CriterionKind
    argument: Union[FeatureId, AppClass, Family, ToolName]
    hardness: Hardness = Hardness.HARD

    def __post_init__(self):
        if not isinstance(self.argument, _ARG_TYPES[self.kind]):
            raise Malformed(f"{self.kind.value} takes a {_ARG_TYPES[self.kind].__name__}")

    def satisfied_by(self, desc: ToolDescriptor) -> bool:
        k = self.kind
        if k in (CriterionKind.REQUIRE_FEATURE, CriterionKind.PREFER_FEATURE):
            return self.argument in desc.features
        if k is CriterionKind.REQUIRE_APP_CLASS:
            return self.argument in desc.app_classes
        if k is CriterionKind.REQUIRE_STACK:
            return self.argument in desc.stacks
        return desc.tool is self.argument

    def __str__(self):
        return f"{self.hardness.value} {self.kind.value} {self.argument.name}"


@dataclass(frozen=True)
class PolicySet:
    criteria: tuple[Criterion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "criteria", tuple(self.criteria))

    @property
    def hard(self) -> list[Criterion]:
        return [c for c in self.criteria if c.hardness is Hardness.HARD]

    @property
    def soft(self) -> list[Criterion]:
        return [c for c in self.criteria if c.hardness is Hardness.SOFT]


@dataclass(frozen=True)
class CapabilityProfile:
    node: NodeId
    tools: frozenset[ToolDescriptor]
    stacks: frozenset[Family] = frozenset({Family.V4, Family.V6})

    def __post_init__(self):
        object.__setattr__(self, "tools", frozenset(self.tools))
        object.__setattr__(self, "stacks", frozenset(self.stacks))
        keys = [t.key for t in self.tools]
        if len(keys) != len(set(keys)):
            raise Malformed(f"{self.node}: (tool, version) must be unique in a profile")
        for t in self.tools:
            if not t.stacks <= self.stacks:
                raise Malformed(f"{self.node}: {t} uses stacks the node does not have")


@dataclass(frozen=True)
class SelectionResult:
    chosen: ToolDescriptor
    rationale: tuple[tuple[str, int], ...]


def _sort_key(desc: ToolDescriptor):
    # name asc, version desc; the remaining fields only make the order total
    return (
        desc.tool.value,
        -desc.version[0],
        -desc.version[1],
        -len(desc.features),
        sorted(f.value for f in desc.features),
        sorted(s.value for s in desc.stacks),
        sorted(a.value for a in desc.app_classes),
    )


def rank_candidates(candidates: Iterable[ToolDescriptor], policy: PolicySet = PolicySet()) -> list[ToolDescriptor]:
    """Order candidates by SOFT criteria in policy order, then by the terminal tie-break."""
    soft = policy.soft
    return sorted(
        candidates,
        key=lambda d: (tuple(0 if c.satisfied_by(d) else 1 for c in soft), _sort_key(d)),
    )


def combine(local: ToolDescriptor, remote: ToolDescriptor, stacks: frozenset[Family]) -> ToolDescriptor | None:
    """The descriptor both ends can actually run, or None when they are incompatible."""
    if local.tool is not remote.tool or local.version[0] != remote.version[0]:
        return None
    common_stacks = local.stacks & remote.stacks & stacks
    if not common_stacks:
        return None
    return ToolDescriptor(
        local.tool,
        min(local.version, remote.version),
        common_stacks,
        local.features & remote.features,
        local.app_classes & remote.app_classes,
    )


def common_candidates(local: CapabilityProfile, remote: CapabilityProfile) -> list[ToolDescriptor]:
    stacks = local.stacks & remote.stacks
    found = set()
    for a in local.tools:
        for b in remote.tools:
            c = combine(a, b, stacks)
            if c is not None:
                found.add(c)
    return sorted(found, key=_sort_key)


def negotiate_peer_protocol(
    local: CapabilityProfile, remote: CapabilityProfile, policy: PolicySet = PolicySet()
) -> SelectionResult:
    """Pick the mobility tool two peers will use. ``policy`` is the initiator's."""
    candidates = common_candidates(local, remote)
    rationale = [("common candidates", len(candidates))]
    for crit in policy.hard:
        candidates = [c for c in candidates if crit.satisfied_by(c)]
        rationale.append((str(crit), len(candidates)))
    if not candidates:
        raise NoCommonTool(f"no common tool between {local.node} and {remote.node}")
    ranked = rank_candidates(candidates, policy)
    leader = ranked[0]
    tied = ranked
    for crit in policy.soft:
        tied = [c for c in tied if crit.satisfied_by(c) == crit.satisfied_by(leader)]
        rationale.append((str(crit), len(tied)))
    rationale.append(("tie-break name asc, version desc", 1))
    return SelectionResult(leader, tuple(rationale))


class RejectReason(enum.Enum):
    NOT_OFFERED = "NOT_OFFERED"


@dataclass(frozen=True)
class FeatureAgreement:
    agreed: frozenset[FeatureId]
    rejected: frozenset[tuple[FeatureId, RejectReason]] = frozenset()

    @property
    def rejected_features(self) -> frozenset[FeatureId]:
        return frozenset(f for f, _ in self.rejected)


def negotiate_provider_features(
    requested: Iterable[tuple[FeatureId, Hardness]], offered: Iterable[FeatureId]
) -> FeatureAgreement:
    requested = list(requested)
    offered = frozenset(offered)
    missing_hard = {f for f, h in requested if h is Hardness.HARD and f not in offered}
    if missing_hard:
        raise MandatoryFeatureUnavailable(missing_hard)
    agreed = frozenset(f for f, _ in requested if f in offered)
    rejected = frozenset((f, RejectReason.NOT_OFFERED) for f, _ in requested if f not in offered)
    return FeatureAgreement(agreed, rejected)


Service = Union[FeatureId, ToolName]


@dataclass(frozen=True)
class Activation:
    service: Service
    parameters: tuple[tuple[str, str], ...] = ()

    @property
    def params(self) -> dict[str, str]:
        return dict(self.parameters)

    def __str__(self):
        extra = " ".join(f"{k}={v}" for k, v in self.parameters)
        return f"{self.service.value} {extra}".strip()


@dataclass(frozen=True)
class ActivationPlan:
    activations: tuple[Activation, ...]
    unmet: frozenset[FeatureId] = frozenset()

    @property
    def services(self) -> list[Service]:
        return [a.service for a in self.activations]


# advertised services a client uses without asking, when it runs the matching tool
OPPORTUNISTIC = {
    FeatureId.FOREIGN_AGENT: (ToolName.MIPv4, {"mode": "FA"}),
}


def _as_params(params) -> dict[str, str]:
    if params is None:
        return {}
    if isinstance(params, dict):
        return {str(k): str(v) for k, v in params.items()}
    return {str(k): str(v) for k, v in params}


def _service_for(feature: FeatureId, params: dict[str, str]) -> Service:
    tool = params.get("tool")
    if tool:
        try:
            return ToolName(tool)
        except ValueError:
            raise Malformed(f"unknown tool {tool!r} in advertised {feature.value}") from None
    if feature is FeatureId.STATE_TRANSFER:
        return ToolName.STM
    return feature


def plan_access_tools(needs, advertised, client_tools: Iterable[ToolName] = ()) -> ActivationPlan:
    """Match client needs against what the access network advertises.

    ``needs`` and ``advertised`` are iterables of ``(FeatureId, params)``. An
    advertised entry may name the tool implementing it with ``tool=<name>``;
    the activation then targets that tool. Need parameters override
    advertised ones. Needs that the network does not advertise are returned
    in ``unmet`` rather than raised.
    """
    needs = [(f, _as_params(p)) for f, p in needs]
    advertised = [(f, _as_params(p)) for f, p in advertised]
    offered = {}
    for feature, params in advertised:
        offered.setdefault(feature, params)
    activations, unmet, used = [], set(), set()
    for feature, params in needs:
        if feature not in offered:
            unmet.add(feature)
            continue
        merged = {**offered[feature], **params}
        merged.pop("tool", None)
        activations.append(Activation(_service_for(feature, offered[feature]), tuple(sorted(merged.items()))))
        used.add(feature)
    tools = set(client_tools)
    for feature, params in advertised:
        if feature in used or feature not in OPPORTUNISTIC:
            continue
        tool, extra = OPPORTUNISTIC[feature]
        if tool in tools:
            merged = {**params, **extra}
            merged.pop("tool", None)
            activations.append(Activation(tool, tuple(sorted(merged.items()))))
            used.add(feature)
    return ActivationPlan(tuple(activations), frozenset(unmet))
