import itertools
from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from holm.core import AppClass, Family, FeatureId, NodeId, ToolDescriptor, ToolName
from holm.errors import Malformed, MandatoryFeatureUnavailable, NoCommonTool
from holm.profiles import (
    format_profile,
    load_policy,
    load_profile,
    parse_criterion,
    parse_descriptor,
    parse_policy,
    parse_profile,
)
from holm.selection import (
    Activation,
    CapabilityProfile,
    Criterion,
    CriterionKind,
    Hardness,
    PolicySet,
    RejectReason,
    common_candidates,
    negotiate_peer_protocol,
    negotiate_provider_features,
    plan_access_tools,
    rank_candidates,
)

V4, V6 = Family.V4, Family.V6
BOTH = frozenset({V4, V6})
HARD, SOFT = Hardness.HARD, Hardness.SOFT
PROVIDER_FEATURES = [
    FeatureId.IPSEC_PROT,
    FeatureId.FW_TRAVERSAL,
    FeatureId.DUAL_STACK,
    FeatureId.HA_RELIABILITY,
    FeatureId.MULTI_COA,
    FeatureId.NEMO,
    FeatureId.DYNAMIC_HA,
]


def desc(tool, version=(1, 0), stacks=BOTH, features=(), apps=(AppClass.GENERIC,)):
    return ToolDescriptor(tool, version, frozenset(stacks), frozenset(features), frozenset(apps))


def profile(name, *tools, stacks=BOTH):
    return CapabilityProfile(NodeId(name), frozenset(tools), frozenset(stacks))


def crit(kind, arg, hardness=HARD):
    return Criterion(kind, arg, hardness)


def policy(*criteria):
    return PolicySet(tuple(criteria))


def bundled_profile(name):
    return load_profile(resources.files("holm.data") / "profiles" / name)


def bundled_policy(name):
    return load_policy(resources.files("holm.data") / "profiles" / name)


# ---- peer negotiation examples ------------------------------------------------------


def test_v4_only_peer_gets_mipv4():
    local = profile("A", desc(ToolName.MIPv4), desc(ToolName.MIPv6))
    remote = profile("B", desc(ToolName.MIPv4, stacks={V4}), stacks={V4})
    assert negotiate_peer_protocol(local, remote).chosen.tool is ToolName.MIPv4


def test_security_requirement_selects_hip():
    tools = [desc(ToolName.HIP, features={FeatureId.BUILTIN_SECURITY}), desc(ToolName.MIPv6)]
    res = negotiate_peer_protocol(
        profile("A", *tools), profile("B", *tools), policy(crit(CriterionKind.REQUIRE_FEATURE, FeatureId.BUILTIN_SECURITY))
    )
    assert res.chosen.tool is ToolName.HIP


def test_sip_application_selects_sip():
    tools = [desc(ToolName.SIP, (2, 0), apps={AppClass.SIP_P2P, AppClass.GENERIC}), desc(ToolName.TCP_MIGRATE)]
    res = negotiate_peer_protocol(
        profile("A", *tools), profile("B", *tools), policy(crit(CriterionKind.REQUIRE_APP_CLASS, AppClass.SIP_P2P))
    )
    assert res.chosen.tool is ToolName.SIP


def test_multihoming_selects_sctp():
    tools = [desc(ToolName.SCTP, features={FeatureId.MULTIHOMING}), desc(ToolName.MIPv4)]
    res = negotiate_peer_protocol(
        profile("A", *tools), profile("B", *tools), policy(crit(CriterionKind.REQUIRE_FEATURE, FeatureId.MULTIHOMING))
    )
    assert res.chosen.tool is ToolName.SCTP


def test_route_optimisation_preferred():
    tools = [desc(ToolName.MIPv6, (1, 0), {V6}, {FeatureId.ROUTE_OPT}), desc(ToolName.MIPv6, (1, 1), {V6})]
    res = negotiate_peer_protocol(
        profile("A", *tools),
        profile("B", *tools),
        policy(crit(CriterionKind.PREFER_FEATURE, FeatureId.ROUTE_OPT, SOFT)),
    )
    assert res.chosen.tool is ToolName.MIPv6
    assert FeatureId.ROUTE_OPT in res.chosen.features


def test_disjoint_profiles():
    with pytest.raises(NoCommonTool):
        negotiate_peer_protocol(profile("A", desc(ToolName.HIP)), profile("B", desc(ToolName.SIP)))


def test_hard_filter_emptying_candidates_is_no_common_tool():
    tools = [desc(ToolName.MIPv6)]
    with pytest.raises(NoCommonTool):
        negotiate_peer_protocol(
            profile("A", *tools), profile("B", *tools), policy(crit(CriterionKind.REQUIRE_FEATURE, FeatureId.NEMO))
        )


def test_major_version_mismatch_is_not_compatible():
    with pytest.raises(NoCommonTool):
        negotiate_peer_protocol(
            profile("A", desc(ToolName.MIPv6, (1, 0))), profile("B", desc(ToolName.MIPv6, (2, 0)))
        )


def test_minor_versions_negotiate_to_lower_and_features_intersect():
    a = desc(ToolName.HIP, (1, 3), features={FeatureId.BUILTIN_SECURITY, FeatureId.FW_TRAVERSAL})
    b = desc(ToolName.HIP, (1, 1), stacks={V4}, features={FeatureId.BUILTIN_SECURITY})
    (c,) = common_candidates(profile("A", a), profile("B", b))
    assert c.version == (1, 1)
    assert c.features == {FeatureId.BUILTIN_SECURITY}
    assert c.stacks == {V4}


def test_rationale_records_each_step():
    tools = [desc(ToolName.HIP, features={FeatureId.BUILTIN_SECURITY}), desc(ToolName.MIPv6)]
    res = negotiate_peer_protocol(
        profile("A", *tools), profile("B", *tools), policy(crit(CriterionKind.REQUIRE_FEATURE, FeatureId.BUILTIN_SECURITY))
    )
    assert res.rationale == (
        ("common candidates", 2),
        ("HARD REQUIRE_FEATURE BUILTIN_SECURITY", 1),
        ("tie-break name asc, version desc", 1),
    )


# ---- bundled profile files ---------------------------------------------------------------

BUNDLED_CASES = [
    ("dual-stack.prof", "v4-only.prof", "none.pol", ToolName.MIPv4, None),
    ("hip-a.prof", "hip-b.prof", "sec.pol", ToolName.HIP, None),
    ("sip-a.prof", "sip-b.prof", "sip.pol", ToolName.SIP, None),
    ("sctp-a.prof", "sctp-b.prof", "multihoming.pol", ToolName.SCTP, None),
    ("mip6-a.prof", "mip6-b.prof", "perf.pol", ToolName.MIPv6, FeatureId.ROUTE_OPT),
]


@pytest.mark.parametrize("a,b,pol,tool,feature", BUNDLED_CASES)
def test_bundled_profiles(a, b, pol, tool, feature):
    res = negotiate_peer_protocol(bundled_profile(a), bundled_profile(b), bundled_policy(pol))
    assert res.chosen.tool is tool
    if feature is not None:
        assert feature in res.chosen.features


def test_bundled_disjoint_profiles():
    with pytest.raises(NoCommonTool):
        negotiate_peer_protocol(bundled_profile("hip-only.prof"), bundled_profile("sip-only.prof"), PolicySet())


# ---- ranking ---------------------------------------------------------------------------


def test_rank_by_name():
    assert [d.tool for d in rank_candidates([desc(ToolName.MIPv6), desc(ToolName.HIP)])] == [
        ToolName.HIP,
        ToolName.MIPv6,
    ]


def test_rank_higher_version_first():
    ranked = rank_candidates([desc(ToolName.MIPv6, (1, 0)), desc(ToolName.MIPv6, (2, 0))])
    assert [d.version for d in ranked] == [(2, 0), (1, 0)]


def test_rank_soft_criteria_in_policy_order():
    a = desc(ToolName.SIP, features={FeatureId.ROUTE_OPT})
    b = desc(ToolName.HIP, features={FeatureId.NEMO})
    c = desc(ToolName.MIPv6, features={FeatureId.NEMO, FeatureId.ROUTE_OPT})
    pol = policy(
        crit(CriterionKind.PREFER_FEATURE, FeatureId.ROUTE_OPT, SOFT),
        crit(CriterionKind.PREFER_FEATURE, FeatureId.NEMO, SOFT),
    )
    assert rank_candidates([a, b, c], pol) == [c, a, b]


def test_rank_ignores_hard_criteria():
    pol = policy(crit(CriterionKind.REQUIRE_FEATURE, FeatureId.NEMO))
    assert [d.tool for d in rank_candidates([desc(ToolName.SIP), desc(ToolName.HIP)], pol)] == [
        ToolName.HIP,
        ToolName.SIP,
    ]


POOL = [
    desc(ToolName.MIPv6, (1, 0), features={FeatureId.ROUTE_OPT}),
    desc(ToolName.MIPv6, (2, 0)),
    desc(ToolName.HIP, (1, 0), features={FeatureId.BUILTIN_SECURITY}),
    desc(ToolName.SCTP, (1, 0), features={FeatureId.MULTIHOMING, FeatureId.ROUTE_OPT}),
]


@pytest.mark.parametrize(
    "pol",
    [PolicySet(), policy(crit(CriterionKind.PREFER_FEATURE, FeatureId.ROUTE_OPT, SOFT))],
)
def test_rank_is_permutation_invariant(pol):
    for n in range(1, len(POOL) + 1):
        for subset in itertools.combinations(POOL, n):
            outputs = {tuple(rank_candidates(perm, pol)) for perm in itertools.permutations(subset)}
            assert len(outputs) == 1


# ---- randomized properties ---------------------------------------------------------------

SELECTABLE_TOOLS = [t for t in ToolName if t is not ToolName.STM]
tool_descriptors = st.builds(
    desc,
    st.sampled_from(SELECTABLE_TOOLS),
    st.tuples(st.integers(1, 2), st.integers(0, 2)),
    st.sampled_from([{V4}, {V6}, {V4, V6}]),
    st.frozensets(st.sampled_from(list(FeatureId)), max_size=3),
    st.sampled_from([{AppClass.GENERIC}, {AppClass.SIP_P2P}, {AppClass.GENERIC, AppClass.REALTIME}]),
)


def _unique(tools):
    seen, out = set(), []
    for t in tools:
        if t.key not in seen:
            seen.add(t.key)
            out.append(t)
    return out


profiles = st.lists(tool_descriptors, max_size=6).map(_unique)
criteria = st.one_of(
    st.builds(Criterion, st.just(CriterionKind.REQUIRE_FEATURE), st.sampled_from(list(FeatureId)), st.sampled_from(list(Hardness))),
    st.builds(Criterion, st.just(CriterionKind.PREFER_FEATURE), st.sampled_from(list(FeatureId)), st.sampled_from(list(Hardness))),
    st.builds(Criterion, st.just(CriterionKind.REQUIRE_APP_CLASS), st.sampled_from(list(AppClass)), st.sampled_from(list(Hardness))),
    st.builds(Criterion, st.just(CriterionKind.REQUIRE_STACK), st.sampled_from(list(Family)), st.sampled_from(list(Hardness))),
    st.builds(Criterion, st.just(CriterionKind.PREFER_TOOL), st.sampled_from(SELECTABLE_TOOLS), st.sampled_from(list(Hardness))),
)
policies = st.lists(criteria, max_size=4).map(lambda cs: PolicySet(tuple(cs)))


def _negotiate(a, b, pol):
    try:
        return negotiate_peer_protocol(profile("A", *a), profile("B", *b), pol)
    except NoCommonTool:
        return None


@settings(max_examples=300, deadline=None)
@given(profiles, profiles, policies, st.randoms(use_true_random=False))
def test_negotiation_sound_deterministic_and_order_independent(a, b, pol, rnd):
    res = _negotiate(a, b, pol)
    assert _negotiate(a, b, pol) == res
    shuffled_a, shuffled_b = list(a), list(b)
    rnd.shuffle(shuffled_a)
    rnd.shuffle(shuffled_b)
    assert _negotiate(shuffled_a, shuffled_b, pol) == res
    if res is None:
        return
    c = res.chosen
    assert any(t.tool is c.tool and t.version[0] == c.version[0] for t in a)
    assert any(t.tool is c.tool and t.version[0] == c.version[0] for t in b)
    assert all(h.satisfied_by(c) for h in pol.hard)
    assert res.rationale


@settings(max_examples=300, deadline=None)
@given(profiles, profiles, policies)
def test_rationale_replay_reconstructs_choice(a, b, pol):
    res = _negotiate(a, b, pol)
    if res is None:
        return
    candidates = common_candidates(profile("A", *a), profile("B", *b))
    steps = iter(res.rationale)
    assert next(steps) == ("common candidates", len(candidates))
    for h in pol.hard:
        candidates = [c for c in candidates if h.satisfied_by(c)]
        assert next(steps) == (str(h), len(candidates))
    assert rank_candidates(candidates, pol)[0] == res.chosen


# ---- provider features -------------------------------------------------------------------


def test_soft_requests_all_offered():
    agreement = negotiate_provider_features(
        [(FeatureId.IPSEC_PROT, SOFT), (FeatureId.DUAL_STACK, SOFT)], PROVIDER_FEATURES
    )
    assert agreement.agreed == {FeatureId.IPSEC_PROT, FeatureId.DUAL_STACK}
    assert agreement.rejected == frozenset()


def test_missing_hard_feature():
    with pytest.raises(MandatoryFeatureUnavailable) as info:
        negotiate_provider_features([(FeatureId.HA_RELIABILITY, HARD)], [FeatureId.IPSEC_PROT, FeatureId.MULTI_COA])
    assert info.value.missing == {FeatureId.HA_RELIABILITY}
    assert "HA_RELIABILITY" in str(info.value)


def test_empty_request():
    agreement = negotiate_provider_features([], PROVIDER_FEATURES)
    assert agreement.agreed == frozenset() and agreement.rejected == frozenset()


def test_missing_soft_feature_rejected_not_offered():
    agreement = negotiate_provider_features([(FeatureId.NEMO, SOFT), (FeatureId.MULTI_COA, HARD)], [FeatureId.MULTI_COA])
    assert agreement.agreed == {FeatureId.MULTI_COA}
    assert agreement.rejected == {(FeatureId.NEMO, RejectReason.NOT_OFFERED)}


@pytest.mark.parametrize("feature", PROVIDER_FEATURES)
@pytest.mark.parametrize("hardness", list(Hardness))
def test_each_provider_feature_individually(feature, hardness):
    assert negotiate_provider_features([(feature, hardness)], PROVIDER_FEATURES).agreed == {feature}


def test_all_provider_features_jointly():
    requested = [(f, HARD) for f in PROVIDER_FEATURES]
    assert negotiate_provider_features(requested, PROVIDER_FEATURES).agreed == set(PROVIDER_FEATURES)


@given(
    st.lists(st.sampled_from(PROVIDER_FEATURES), unique=True),
    st.frozensets(st.sampled_from(PROVIDER_FEATURES)),
    st.sampled_from(PROVIDER_FEATURES),
)
def test_offering_more_never_shrinks_agreement(requested, offered, extra):
    req = [(f, SOFT) for f in requested]
    before = negotiate_provider_features(req, offered)
    after = negotiate_provider_features(req, offered | {extra})
    assert before.agreed <= after.agreed
    assert after.agreed <= set(requested) & (offered | {extra})
    assert not (after.agreed & after.rejected_features)


# ---- access planning ----------------------------------------------------------------------


def test_state_transfer_need_activates_stm():
    plan = plan_access_tools(
        [(FeatureId.STATE_TRANSFER, {"ctype": "HEADER_COMPRESSION"})], [(FeatureId.STATE_TRANSFER, {})]
    )
    assert plan.activations == (Activation(ToolName.STM, (("ctype", "HEADER_COMPRESSION"),)),)


def test_make_before_break_activates_fmipv6():
    plan = plan_access_tools([(FeatureId.MAKE_BEFORE_BREAK, {})], [(FeatureId.MAKE_BEFORE_BREAK, {"tool": "FMIPv6"})])
    assert plan.services == [ToolName.FMIPv6]


def test_proxy_signalling_activates_pmip():
    plan = plan_access_tools([(FeatureId.PROXY_SIGNALING, {})], [(FeatureId.PROXY_SIGNALING, {"tool": "PMIP"})])
    assert plan.services == [ToolName.PMIP]


def test_foreign_agent_used_opportunistically_by_mipv4_client():
    plan = plan_access_tools([], [(FeatureId.FOREIGN_AGENT, {"fa": "10.1.0.1"})], [ToolName.MIPv4])
    assert plan.activations == (Activation(ToolName.MIPv4, (("fa", "10.1.0.1"), ("mode", "FA"))),)
    assert plan_access_tools([], [(FeatureId.FOREIGN_AGENT, {})], [ToolName.HIP]).activations == ()


def test_unmet_needs_are_reported_not_raised():
    plan = plan_access_tools([(FeatureId.MIH_SERVICES, {}), (FeatureId.MAKE_BEFORE_BREAK, {})], [])
    assert plan.activations == () and plan.unmet == {FeatureId.MIH_SERVICES, FeatureId.MAKE_BEFORE_BREAK}


def test_need_parameters_override_advertised():
    plan = plan_access_tools(
        [(FeatureId.STATE_TRANSFER, {"ctype": "QOS"})], [(FeatureId.STATE_TRANSFER, {"ctype": "AAA", "max": "4"})]
    )
    assert plan.activations[0].params == {"ctype": "QOS", "max": "4"}


def test_unknown_advertised_tool():
    with pytest.raises(Malformed):
        plan_access_tools([(FeatureId.MAKE_BEFORE_BREAK, {})], [(FeatureId.MAKE_BEFORE_BREAK, {"tool": "NOPE"})])


@given(
    st.lists(st.sampled_from(list(FeatureId)), unique=True),
    st.lists(st.sampled_from(list(FeatureId)), unique=True),
)
def test_every_activation_references_an_advertised_service(needs, adverts):
    plan = plan_access_tools([(f, {}) for f in needs], [(f, {}) for f in adverts], [ToolName.MIPv4])
    assert len(plan.activations) <= len(adverts)
    assert plan.unmet == set(needs) - set(adverts)


# ---- text forms ----------------------------------------------------------------------------


def test_descriptor_token():
    d = parse_descriptor("MIPv6/1.0:V6:ROUTE_OPT+IPSEC_PROT:GENERIC")
    assert d == desc(ToolName.MIPv6, (1, 0), {V6}, {FeatureId.ROUTE_OPT, FeatureId.IPSEC_PROT})


@pytest.mark.parametrize("token", ["NOPE/1.0", "HIP/x.0", "HIP/1.0:V5", "HIP/1.0:V4:NOT_A_FEATURE", "HIP/1.0:V4::GENERIC:extra"])
def test_bad_descriptor_tokens(token):
    with pytest.raises(Malformed):
        parse_descriptor(token)


def test_profile_round_trip():
    text = "node = MN\nstacks = V4+V6\ntool = HIP/1.0:V4+V6:BUILTIN_SECURITY\ntool = MIPv6/2.0:V6\n"
    prof = parse_profile(text)
    assert parse_profile(format_profile(prof)) == prof


def test_profile_tool_stack_must_be_subset():
    with pytest.raises(Malformed):
        parse_profile("node = A\nstacks = V4\ntool = MIPv6/1.0:V6\n")


def test_profile_needs_node():
    with pytest.raises(Malformed):
        parse_profile("tool = HIP/1.0\n")


def test_policy_parse():
    pol = parse_policy("# comment\nHARD REQUIRE_STACK V4\ncriterion = SOFT PREFER_TOOL HIP\n")
    assert pol.criteria == (
        crit(CriterionKind.REQUIRE_STACK, V4),
        crit(CriterionKind.PREFER_TOOL, ToolName.HIP, SOFT),
    )


@pytest.mark.parametrize("line", ["HARD REQUIRE_FEATURE", "MAYBE REQUIRE_FEATURE NEMO", "HARD WANT NEMO", "HARD REQUIRE_FEATURE WINGS"])
def test_bad_criteria(line):
    with pytest.raises(Malformed):
        parse_criterion(line)


def test_criterion_argument_type_checked():
    with pytest.raises(Malformed):
        Criterion(CriterionKind.REQUIRE_FEATURE, ToolName.HIP)
