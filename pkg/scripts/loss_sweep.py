"""Loss on the inter-firewall link of the handover scenario.

Part one drops a single packet index at a time. Part two applies a random loss
rate over several seeds and counts how many transfers still complete.

    python3 scripts/loss_sweep.py --rates 0.1 0.3 0.5 --seeds 50
"""

import argparse

from holm.simnet import load_bundled, run_full, with_link_drops
from holm.stm import StmState


def outcome(res):
    states = {fw: [s.state for s in res.world.nodes[fw].stm.sessions.values()] for fw in ("FW1", "FW2")}
    retries = max(s.retries for fw in ("FW1", "FW2") for s in res.world.nodes[fw].stm.sessions.values())
    done = all(st == [StmState.COMPLETED] for st in states.values())
    return done, retries, states["FW2"][0].name


def single_drops(max_index):
    print("dropped  fw2_state   retries  restore_ms  after_install")
    for index in range(max_index + 1):
        res = run_full(with_link_drops(load_bundled("fig2"), "FW1", "FW2", {index}))
        _, retries, state = outcome(res)
        m = res.metrics
        print(f"{index:>7}  {state:<10} {retries:>8} {m.restore_time_ms:>11} {m.rtp_dropped_after_install:>14}")
    res = run_full(with_link_drops(load_bundled("fig2"), "FW1", "FW2", range(50)))
    _, retries, state = outcome(res)
    print(f"{'all':>7}  {state:<10} {retries:>8} {res.metrics.restore_time_ms:>11}")


def random_loss(rates, seeds):
    print("\nloss_rate  completed  mean_restore_ms  max_retries")
    for rate in rates:
        completed, restores, worst = 0, [], 0
        for seed in range(seeds):
            script = load_bundled("fig2")
            for link in script.links:
                if {link.a, link.b} == {"FW1", "FW2"}:
                    link.loss_rate = rate
            res = run_full(script, seed)
            done, retries, _ = outcome(res)
            completed += done
            worst = max(worst, retries)
            if res.metrics.restore_time_ms >= 0:
                restores.append(res.metrics.restore_time_ms)
        mean = sum(restores) / len(restores) if restores else float("nan")
        print(f"{rate:>9.2f}  {completed:>4}/{seeds:<4} {mean:>16.1f} {worst:>12}")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-index", type=int, default=5)
    ap.add_argument("--rates", type=float, nargs="*", default=[0.1, 0.25, 0.5])
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args(argv)
    single_drops(args.max_index)
    if args.rates:
        random_loss(args.rates, args.seeds)


if __name__ == "__main__":
    main()
