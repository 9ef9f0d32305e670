#!/usr/bin/env python3
"""Hammer the lower-bound property with randomized programs and schedules.

Usage: python scripts/fuzz_lowerbound.py [cases] [seed]
"""

import sys
import time

from meterfaas.fuzz import run_lowerbound_fuzz
from meterfaas.scenario import format_schedule


def main() -> int:
    cases = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    started = time.monotonic()
    summary = run_lowerbound_fuzz(cases, seed)
    elapsed = time.monotonic() - started
    if summary.ok:
        print(f"PASS: {cases} cases in {elapsed:.1f}s, zero violations")
        return 0
    for case in summary.violations:
        path = f"violation-{case.seed_index}.schedule"
        with open(path, "w") as fh:
            fh.write(format_schedule(case.schedule))
        print(
            f"VIOLATION case {case.seed_index}: t_max={case.outcome.t_max} "
            f"tau={case.cfg.tau} oracle={case.oracle} schedule -> {path}"
        )
    return 1


if __name__ == "__main__":
    sys.exit(main())
