"""Rewrite the bundled golden traces from the current simulator.

Only run this after checking a trace change by hand: the golden files are
what `holm selftest` and the test suite compare against.
"""

from pathlib import Path

from holm.cli import scenario_trace
from holm.simnet import bundled_names

GOLDEN = Path(__file__).resolve().parents[1] / "src" / "holm" / "data" / "golden"


def main() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name in bundled_names():
        stem = name[:-4]
        text = scenario_trace(stem)
        (GOLDEN / f"{stem}.trace").write_text(text, encoding="utf-8")
        print(f"{stem}: {text.count(chr(10))} records")


if __name__ == "__main__":
    main()
