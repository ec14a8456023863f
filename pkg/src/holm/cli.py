"""Command-line front end: ``holm run|negotiate|decode|selftest``.

Exit codes: 0 success, 1 domain failure (negotiation failed, STM transfer
failed, golden mismatch, time limit), 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import enum
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, TextIO

from holm.errors import HolmError, NoCommonTool, TimeLimitExceeded, WireError
from holm.profiles import load_profile, parse_policy
from holm.selection import negotiate_peer_protocol
from holm.simnet import bundled_names, load_bundled, load_scenario, run_full
from holm.stm.vectors import check_bundled_vectors, read_hex
from holm.stm.wire import describe, parse_message

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class TraceFormat(enum.Enum):
    TEXT = "text"
    STRUCTURED = "structured"


@dataclass
class RunOptions:
    scenario_path: str
    seed: int = 0
    trace_out: Optional[str] = None  # None or "-" = stdout
    format: TraceFormat = TraceFormat.TEXT
    stm: Optional[bool] = None  # None = take the scenario's own flag
    verbose: bool = False


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data_file(sub: str, name: str) -> Optional[Path]:
    path = resources.files("holm.data") / sub / name
    return Path(str(path)) if path.is_file() else None


def resolve(path: str, sub: str) -> Path:
    """A path relative to the CWD, falling back to the bundled copy of the same file name."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = _data_file(sub, p.name)
    if bundled is not None:
        return bundled
    raise UsageError(f"no such file: {path}")


def render_trace(trace, fmt: TraceFormat) -> str:
    return trace.to_text() if fmt is TraceFormat.TEXT else trace.to_json()


def domain_failures(result) -> list[str]:
    failures = list(result.failures)
    for rec in result.trace.select("STM_REPORT", report="STM_ERROR"):
        failures.append(f"STM_ERROR at {rec.node} t={rec.ts}: {rec.get('reason', '-')}")
    return failures


def cmd_run(opts: RunOptions, out: TextIO, err: TextIO) -> int:
    path = resolve(opts.scenario_path, "scenarios")
    script = load_scenario(path)
    if opts.verbose:
        print(f"scenario {path} ({len(script.nodes)} nodes, {len(script.flows)} flows, "
              f"{len(script.events)} events)", file=err)
    try:
        result = run_full(script, opts.seed, opts.stm)
    except TimeLimitExceeded as exc:
        print(f"{exc.code}: {exc}", file=err)
        return EXIT_FAILURE
    text = render_trace(result.trace, opts.format)
    summary_to = out
    if opts.trace_out in (None, "-"):
        out.write(text)
        if opts.format is TraceFormat.STRUCTURED:
            summary_to = err  # keep stdout a single JSON document
    else:
        Path(opts.trace_out).write_text(text, encoding="utf-8")
    print(result.metrics.summary(), file=summary_to)
    failures = domain_failures(result)
    for f in failures:
        print(f"failure: {f}", file=err)
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_negotiate(local: str, remote: str, policy: str, out: TextIO, err: TextIO) -> int:
    a = load_profile(resolve(local, "profiles"))
    b = load_profile(resolve(remote, "profiles"))
    pol = parse_policy(resolve(policy, "profiles").read_text(encoding="utf-8"))
    try:
        result = negotiate_peer_protocol(a, b, pol)
    except NoCommonTool as exc:
        print(f"{exc.code}: {exc}", file=err)
        return EXIT_FAILURE
    c = result.chosen
    feats = "+".join(sorted(f.value for f in c.features)) or "-"
    print(f"chosen={c.tool.value} version={c.version[0]}.{c.version[1]} features={feats}", file=out)
    for i, (step, survivors) in enumerate(result.rationale, 1):
        print(f"rationale[{i}] {step} -> {survivors}", file=out)
    return EXIT_OK


def cmd_decode(hexfile: str, out: TextIO) -> int:
    data = read_hex(resolve(hexfile, "vectors").read_text(encoding="utf-8"))
    for line in describe(parse_message(data)):
        print(line, file=out)
    return EXIT_OK


def golden_text(name: str) -> Optional[str]:
    path = _data_file("golden", name[:-4] + ".trace" if name.endswith(".scn") else name + ".trace")
    return None if path is None else path.read_text(encoding="utf-8")


def scenario_trace(name: str, seed: int = 0) -> str:
    return run_full(load_bundled(name), seed).trace.to_text()


def cmd_selftest(out: TextIO, err: TextIO) -> int:
    ok = True
    for name in bundled_names():
        expected = golden_text(name)
        if expected is None:
            print(f"SKIP {name} (no golden trace)", file=out)
            continue
        same = scenario_trace(name) == expected
        ok &= same
        print(f"{'PASS' if same else 'FAIL'} {name}", file=out)
    problems = check_bundled_vectors()
    for p in problems:
        print(f"FAIL vector {p}", file=out)
    if not problems:
        print("PASS wire vectors", file=out)
    ok &= not problems
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="holm", description="Mobility toolbox simulator and tools.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario, print metrics, write the trace")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trace-out", default=None, help="trace destination (default: stdout)")
    r.add_argument("--format", choices=[f.value for f in TraceFormat], default="text")
    r.add_argument("--stm", choices=["on", "off"], default=None, help="override the scenario's stm flag")
    r.add_argument("--verbose", action="store_true")

    n = sub.add_parser("negotiate", help="pick the protocol two profiles agree on")
    n.add_argument("local")
    n.add_argument("remote")
    n.add_argument("policy")

    d = sub.add_parser("decode", help="pretty-print a hex-encoded STM message")
    d.add_argument("hexfile")

    sub.add_parser("selftest", help="compare bundled scenarios against their golden traces")
    return p


def main(argv=None, out: TextIO = None, err: TextIO = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            opts = RunOptions(
                args.scenario,
                args.seed,
                args.trace_out,
                TraceFormat(args.format),
                None if args.stm is None else args.stm == "on",
                args.verbose,
            )
            return cmd_run(opts, out, err)
        if args.command == "negotiate":
            return cmd_negotiate(args.local, args.remote, args.policy, out, err)
        if args.command == "decode":
            return cmd_decode(args.hexfile, out)
        return cmd_selftest(out, err)
    except UsageError as exc:
        print(f"holm: {exc}", file=err)
        return EXIT_USAGE
    except WireError as exc:
        print(f"holm: {exc.code}: {exc}", file=err)
        return EXIT_USAGE
    except HolmError as exc:
        # scenario, profile and policy documents that do not parse
        print(f"holm: {exc.code}: {exc}", file=err)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"holm: bad input: {exc}", file=err)
        return EXIT_USAGE
    except OSError as exc:
        print(f"holm: {exc}", file=err)
        return EXIT_USAGE
