"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import io
import logging
import random
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from harness import (  # noqa: E402
    ALL_EVENTS,
    HAND_ASSEMBLED,
    PUBLISH_CHANNELS,
    PUBLISH_TOOLS,
    check_publish_sequence,
    random_message,
    run_push,
    totality_cell,
)
from holm.cli import golden_text, main  # noqa: E402
from holm.core import COMMON, FeatureId, Kind, ToolDescriptor, ToolName, Trigger  # noqa: E402
from holm.errors import Truncated  # noqa: E402
from holm.selection import Activation, Hardness, negotiate_provider_features, plan_access_tools  # noqa: E402
from holm.simnet import load_bundled, run_full, with_link_drops  # noqa: E402
from holm.stm import Role, StmState, TransferDirection  # noqa: E402
from holm.stm.vectors import check_bundled_vectors, golden_messages  # noqa: E402
from holm.stm.wire import MsgType, parse_message, serialize_message  # noqa: E402
from holm.toolbox import ModeCommand, Notification, StubTool, Toolbox  # noqa: E402

# ---- pinned oracles and tolerances -----------------------------------------------------------
#
# Inputs from fig2.scn: CN1 sends every 20 ms from t=0, CN2 every 20 ms from t=10;
# one-way latency CN1-FW2 20, CN2-FW2 30, FW2-RAN 2, RAN-MN 5; handover RAN1 -> RAN2
# at t=1000; run length 2000 ms, so each flow sends 100 packets.
#
# STM off. MN re-invites CN1 at 1000, CN2 at 1002 (one signalling hop each), registers
# at 1004. The FW2 ALG sees the re-invites at 1007 and 1009 and opens the pinholes
# 150 ms later (1157, 1159). CN1 learns the new address at 1028: its packets sent at
# 980, 1000, 1020 die at the detached RAN1 (3), those reaching FW2 at 1060..1140 hit
# a closed firewall (5). CN2 learns at 1040: sent at 970..1030 die at RAN1 (4), reaching
# FW2 at 1080..1140 blocked (4). Total 16. First RTP after the handover lands at
# 1167 for both flows, so restore is 167 ms.
#
# STM on. The first re-invite reaching FW2 (1007) fires the trigger; CTX_REQUEST at
# 1007, CTX_RESPONSE at 1017, pinholes installed at 1027 over the 10 ms FW1-FW2 link.
# CTX_READY reaches MN at 1034; re-invites go out at 1034 and 1036, register at 1038.
# CN1 learns at 1062 (sent 980..1060 lost at RAN1: 5), CN2 at 1074 (sent 970..1070: 6).
# Nothing is blocked at FW2 because the pinholes predate the first redirected packet.
# Total 11, none after install; first RTP at 1107 (CN1) and 1127 (CN2), restore 127 ms.
# Three STM messages: request, response, install ack.
#
# Fields: rtp_sent, rtp_dropped_total, rtp_dropped_after_install, restore_time_ms, stm_messages
ORACLE_STM_ON = (200, 11, 0, 127, 3)
ORACLE_STM_OFF = (200, 16, 0, 167, 0)
ORACLE_TOLERANCE = 0  # exact integer match

RUNTIME_LIMIT_S = {1: 1.0, 2: 1.0, 6: 10.0}

FIG2_ORDER = [
    ("TRIGGER", "FW2", {}),
    ("STM_TX", "FW2", {"msg": "CTX_REQUEST"}),
    ("STM_TX", "FW1", {"msg": "CTX_RESPONSE"}),
    ("PINHOLES_INSTALLED", "FW2", {"via": "stm"}),
    ("SIP_REINVITE", "MN", {"peer": "CN1"}),
    ("SIP_REINVITE", "MN", {"peer": "CN2"}),
    ("SIP_REGISTER", "MN", {}),
]

SELECTION_EXAMPLES = [
    (("dual-stack.prof", "v4-only.prof", "none.pol"), "chosen=MIPv4 version=1.0 features=-"),
    (("hip-a.prof", "hip-b.prof", "sec.pol"), "chosen=HIP version=1.0 features=BUILTIN_SECURITY"),
    (("sip-a.prof", "sip-b.prof", "sip.pol"), "chosen=SIP version=2.0 features=-"),
    (("sctp-a.prof", "sctp-b.prof", "multihoming.pol"), "chosen=SCTP version=1.0 features=MULTIHOMING"),
    (("mip6-a.prof", "mip6-b.prof", "perf.pol"), "chosen=MIPv6 version=1.0 features=ROUTE_OPT"),
]

PROVIDER_FEATURES = [
    FeatureId.IPSEC_PROT,
    FeatureId.FW_TRAVERSAL,
    FeatureId.DUAL_STACK,
    FeatureId.HA_RELIABILITY,
    FeatureId.MULTI_COA,
    FeatureId.NEMO,
    FeatureId.DYNAMIC_HA,
]

PLANNED_ACTIVATIONS = [
    "service=STM ctype=HEADER_COMPRESSION",
    "service=FMIPv6",
    "service=PMIP",
    "service=MIPv4 fa=10.1.0.1 mode=FA",
]

MAX_RETRANSMISSIONS = 3
ROUND_TRIPS = 10_000
PUBLISH_SEQUENCES = 1_000

RESULTS: list[str] = []
CHECKS = {}


def criterion(number, title):
    def register(fn):
        CHECKS[number] = (title, fn)
        return fn

    return register


def within(number, started):
    elapsed = time.perf_counter() - started
    limit = RUNTIME_LIMIT_S[number]
    assert elapsed < limit, f"runtime {elapsed:.3f}s exceeds {limit}s"
    return f"runtime {elapsed:.3f}s < {limit}s"


def metrics_tuple(m):
    return (m.rtp_sent, m.rtp_dropped_total, m.rtp_dropped_after_install, m.restore_time_ms, m.stm_messages)


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


# ---- criteria ----------------------------------------------------------------------------------


@criterion(1, "fig2 causal order and byte-identical trace")
def fig2_causal_order():
    started = time.perf_counter()
    result = run_full(load_bundled("fig2"))
    runtime = within(1, started)
    trace = result.trace
    positions = [trace.first(kind, node, **match).seq for kind, node, match in FIG2_ORDER]
    assert positions == sorted(positions) and len(set(positions)) == len(positions), positions
    texts = {run_full(load_bundled("fig2")).trace.to_text() for _ in range(3)} | {trace.to_text()}
    assert len(texts) == 1, "trace differs between runs"
    assert texts == {golden_text("fig2.scn")}, "trace differs from the bundled golden trace"
    stamps = [trace.records[p].ts for p in positions]
    return f"order ok at t={stamps}; 4 runs identical to golden; {runtime}"


@criterion(2, "STM benefit differential against hand oracle")
def stm_differential():
    started = time.perf_counter()
    on = metrics_tuple(run_full(load_bundled("fig2")).metrics)
    runtime_on = within(2, started)
    started = time.perf_counter()
    off = metrics_tuple(run_full(load_bundled("fig2"), stm=False).metrics)
    runtime_off = within(2, started)
    assert on[2] == 0, f"STM on dropped {on[2]} after install"
    assert abs(off[1] - ORACLE_STM_OFF[1]) <= ORACLE_TOLERANCE, f"STM off dropped {off[1]}, oracle {ORACLE_STM_OFF[1]}"
    assert on == ORACLE_STM_ON, f"STM on metrics {on}, oracle {ORACLE_STM_ON}"
    assert off == ORACLE_STM_OFF, f"STM off metrics {off}, oracle {ORACLE_STM_OFF}"
    return f"on={on} off={off} tolerance exact; on {runtime_on}, off {runtime_off}"


@criterion(3, "peer selection examples and disjoint profiles")
def selection_examples():
    for args, expected in SELECTION_EXAMPLES:
        code, out, err = cli("negotiate", *args)
        assert code == 0, err
        assert out.splitlines()[0] == expected, (args, out)
    code, out, err = cli("negotiate", "hip-only.prof", "sip-only.prof", "none.pol")
    assert code == 1 and out == "" and err.startswith("NO_COMMON_TOOL"), (code, out, err)
    return f"{len(SELECTION_EXAMPLES)} examples exact; disjoint -> NO_COMMON_TOOL exit 1"


@criterion(4, "provider features and access planning")
def features_and_planning():
    cases = 0
    for feature in PROVIDER_FEATURES:
        for hardness in Hardness:
            agreed = negotiate_provider_features([(feature, hardness)], PROVIDER_FEATURES).agreed
            assert agreed == {feature}, (feature, hardness, agreed)
            cases += 1
    joint = negotiate_provider_features([(f, Hardness.HARD) for f in PROVIDER_FEATURES], PROVIDER_FEATURES)
    assert joint.agreed == set(PROVIDER_FEATURES), joint.agreed
    agreed = run_full(load_bundled("scenario2")).trace.first("FEATURES_AGREED", "MN")
    assert set(agreed.get("agreed").split("+")) == {f.name for f in PROVIDER_FEATURES}, agreed.get("agreed")

    plan = plan_access_tools(
        [(FeatureId.STATE_TRANSFER, {"ctype": "HEADER_COMPRESSION"}), (FeatureId.MAKE_BEFORE_BREAK, {}),
         (FeatureId.PROXY_SIGNALING, {})],
        [(FeatureId.STATE_TRANSFER, {}), (FeatureId.MAKE_BEFORE_BREAK, {"tool": "FMIPv6"}),
         (FeatureId.PROXY_SIGNALING, {"tool": "PMIP"}), (FeatureId.FOREIGN_AGENT, {"fa": "10.1.0.1"})],
        [ToolName.MIPv4, ToolName.MIPv6],
    )
    assert plan.activations == (
        Activation(ToolName.STM, (("ctype", "HEADER_COMPRESSION"),)),
        Activation(ToolName.FMIPv6, ()),
        Activation(ToolName.PMIP, ()),
        Activation(ToolName.MIPv4, (("fa", "10.1.0.1"), ("mode", "FA"))),
    ), plan.activations
    lines = [line.split(" kind=ACTIVATE ", 1)[1] for line in golden_text("scenario3.scn").splitlines()
             if " kind=ACTIVATE " in line]
    traced = [r for r in run_full(load_bundled("scenario3")).trace.to_text().splitlines() if " kind=ACTIVATE " in r]
    assert lines == PLANNED_ACTIVATIONS, lines
    assert [t.split(" kind=ACTIVATE ", 1)[1] for t in traced] == PLANNED_ACTIVATIONS
    return f"{cases} single-feature cases + joint 7/7 + scenario2 trace; 4/4 planned activations"


@criterion(5, "STM state machine totality")
def stm_totality():
    counts = {"transition": 0, "bad_state": 0}
    crashes = []
    for state in StmState:
        for event in ALL_EVENTS:
            for role in Role:
                for direction in TransferDirection:
                    try:
                        counts[totality_cell(state, event, role, direction)] += 1
                    except AssertionError:
                        raise
                    except Exception as exc:  # anything else is a crash
                        crashes.append((state.name, event.name, role.name, direction.name, repr(exc)))
    assert not crashes, crashes[:5]
    total = counts["transition"] + counts["bad_state"]
    combos = len(Role) * len(TransferDirection)
    assert total == len(StmState) * len(ALL_EVENTS) * combos
    return (
        f"{len(StmState)} states x {len(ALL_EVENTS)} events x {combos} role/direction = {total} cells: "
        f"{counts['transition']} transitions, {counts['bad_state']} BAD_STATE, 0 crashes"
    )


@criterion(6, "wire codec properties")
def codec_properties():
    started = time.perf_counter()
    rng = random.Random(20240601)
    for _ in range(ROUND_TRIPS):
        msg = random_message(rng)
        data = serialize_message(msg)
        back = parse_message(data)
        assert back == msg and serialize_message(back) == data, msg
    vectors = golden_messages()
    cuts = 0
    for name, msg in vectors.items():
        data = serialize_message(msg)
        for cut in range(len(data)):
            try:
                parse_message(data[:cut])
            except Truncated as exc:
                assert exc.offset == cut, (name, cut, exc.offset)
            else:
                raise AssertionError(f"{name} truncated at {cut} parsed")
            cuts += 1
        assert data == HAND_ASSEMBLED[name], name
    assert sorted(m.msg_type for m in vectors.values()) == sorted(MsgType)
    assert check_bundled_vectors() == []
    runtime = within(6, started)
    return f"{ROUND_TRIPS} round trips; {cuts} truncations -> TRUNCATED; 6/6 vectors match; {runtime}"


@criterion(7, "pause/resume at every fragment boundary")
def pause_resume():
    *_, reference, _, _ = run_push()
    expected = reference.store.installed
    assert len(expected) == 1
    runs = 0
    for boundary in range(1, 5):
        for pauser in ("sender", "receiver"):
            _, a, b, tid, paused = run_push(boundary, pauser)
            assert paused, (boundary, pauser)
            assert b.store.installed == expected, (boundary, pauser)
            assert a.session(tid).state is b.session(tid).state is StmState.COMPLETED
            runs += 1
    return f"5 fragments, {runs} paused runs (4 boundaries x sender/receiver) install identical bytes"


@criterion(8, "loss tolerance on the fig2 transfer")
def loss_tolerance():
    lossless = run_full(load_bundled("fig2")).world.net.link("FW1", "FW2").sent
    worst = 0
    for index in range(lossless + 1):
        res = run_full(with_link_drops(load_bundled("fig2"), "FW1", "FW2", {index}))
        for fw in ("FW1", "FW2"):
            (s,) = res.world.nodes[fw].stm.sessions.values()
            assert s.state is StmState.COMPLETED, (index, fw, s.state)
            assert s.retries <= MAX_RETRANSMISSIONS, (index, fw, s.retries)
            worst = max(worst, s.retries)
        assert res.metrics.rtp_dropped_after_install == 0, index
    outcomes = set()
    for _ in range(3):
        res = run_full(with_link_drops(load_bundled("fig2"), "FW1", "FW2", range(50)))
        (s,) = res.world.nodes["FW2"].stm.sessions.values()
        errors = tuple(r.ts for r in res.trace.select("STM_REPORT", "FW2", report="STM_ERROR"))
        outcomes.add((s.state, errors, res.trace.to_text()))
    assert len(outcomes) == 1, "exhaustion outcome differs between runs"
    ((state, errors, _),) = outcomes
    assert state is StmState.FAILED and len(errors) == 1, (state, errors)
    return (
        f"drop index 0..{lossless}: completed, max {worst} retransmissions <= {MAX_RETRANSMISSIONS}; "
        f"exhausted: FAILED + STM_ERROR at t={errors[0]} in 3 identical runs"
    )


@criterion(9, "toolbox delivery properties and FROZEN ignore counter")
def toolbox_properties():
    rng = random.Random(9)
    for _ in range(PUBLISH_SEQUENCES):
        registered = rng.sample(PUBLISH_TOOLS, rng.randint(0, len(PUBLISH_TOOLS)))
        publishes = [rng.randrange(len(PUBLISH_CHANNELS)) for _ in range(rng.randint(0, 40))]
        check_publish_sequence(registered, publishes)

    box = Toolbox()
    tool = StubTool(locator="v4:10.1.0.10:0")
    reg = box.register_tool(ToolDescriptor(ToolName.MIPv6, (1, 0)), tool)
    for command in (ModeCommand.INIT, ModeCommand.RUN, ModeCommand.FREEZE):
        box.set_mode(reg.handle, command)
    box.publish_trigger(Trigger(COMMON, Kind.INTERFACE_DOWN))
    box.publish_trigger(Trigger(COMMON, Kind.STM_ACK))
    box.notify_change(reg.handle, Notification.to_tool("MIPv6", Kind.LOCATOR_CHANGE, locator="v4:10.2.0.10:0"))
    assert tool.ignored == 2, tool.ignored
    assert [t.kind for t in tool.triggers] == [Kind.STM_ACK]
    assert tool.locator == "v4:10.1.0.10:0"
    return f"{PUBLISH_SEQUENCES} random sequences exactly-once/isolated/ordered; FROZEN ignored 2 of 3, counter=2"


# ---- reporting ----------------------------------------------------------------------------------


def evaluate(number):
    title, check = CHECKS[number]
    try:
        detail = check()
    except Exception as exc:
        reason = (str(exc) or type(exc).__name__).splitlines()[0]
        line = f"FAIL AC{number} {title}: {reason}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS AC{number} {title}: {detail}"
    RESULTS.append(line)
    print(line)


@pytest.mark.parametrize("number", sorted(CHECKS), ids=lambda n: f"AC{n}")
def test_acceptance_criterion(number):
    evaluate(number)


if __name__ == "__main__":
    logging.basicConfig(level=logging.ERROR)
    failed = 0
    for n in sorted(CHECKS):
        try:
            evaluate(n)
        except Exception:
            failed += 1
    sys.exit(1 if failed else 0)
