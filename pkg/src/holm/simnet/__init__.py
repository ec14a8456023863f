"""Deterministic discrete-event simulation of the handover scenarios."""

from holm.simnet.engine import Link, Network, Packet, Simulator, Timer, Trace, TraceRecord
from holm.simnet.runner import Metrics, RunResult, World, compute_metrics, run, run_full, with_link_drops
from holm.simnet.scenario import (
    EventSpec,
    FlowSpec,
    LinkSpec,
    NodeKind,
    NodeSpec,
    ScenarioScript,
    SimConfig,
    bundled_names,
    load_bundled,
    load_scenario,
    parse_scenario,
)

__all__ = [
    "EventSpec",
    "FlowSpec",
    "Link",
    "LinkSpec",
    "Metrics",
    "Network",
    "NodeKind",
    "NodeSpec",
    "Packet",
    "RunResult",
    "ScenarioScript",
    "SimConfig",
    "Simulator",
    "Timer",
    "Trace",
    "TraceRecord",
    "World",
    "bundled_names",
    "compute_metrics",
    "load_bundled",
    "load_scenario",
    "parse_scenario",
    "run",
    "run_full",
    "with_link_drops",
]
