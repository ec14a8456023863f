"""Compare the handover scenario with and without context transfer.

Prints one row per (firewall ALG delay, STM on/off). The ALG delay is how long
a firewall takes to open pinholes from snooped SIP; it sets the baseline that
context transfer has to beat. The bundled scenario uses 150 ms.

    python3 scripts/run_fig2_differential.py --alg-delay 50 150 300 --json out.json
"""

import argparse
import dataclasses
import json

from holm.simnet import load_bundled, run


def with_alg_delay(script, delay_ms):
    for node in script.nodes.values():
        if node.alg_delay_ms is not None:
            node.alg_delay_ms = delay_ms
    return script


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="fig2")
    ap.add_argument("--alg-delay", type=int, nargs="+", default=[0, 25, 50, 150, 300])
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)

    rows = []
    print(f"{'alg_ms':>6} {'stm':>4} {'sent':>5} {'dropped':>8} {'after_inst':>10} {'restore_ms':>10} {'stm_msgs':>8}")
    for delay in args.alg_delay:
        for stm in (True, False):
            _, m = run(with_alg_delay(load_bundled(args.scenario), delay), stm=stm)
            rows.append({"alg_delay_ms": delay, "stm": stm, **dataclasses.asdict(m)})
            print(
                f"{delay:>6} {'on' if stm else 'off':>4} {m.rtp_sent:>5} {m.rtp_dropped_total:>8} "
                f"{m.rtp_dropped_after_install:>10} {m.restore_time_ms:>10} {m.stm_messages:>8}"
            )
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
