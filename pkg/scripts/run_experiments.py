#!/usr/bin/env python3
"""Reproduce the accuracy experiments and write their CSVs.

Usage: python scripts/run_experiments.py [out_dir]
"""

import sys
from pathlib import Path

from meterfaas.experiments import EXPERIMENTS, rsquared, run_experiment


def main() -> int:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("results")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in sorted(EXPERIMENTS):
        result = run_experiment(name)
        path = out_dir / f"{name}.csv"
        result.write(path)
        note = ""
        if name == "fib_timing":
            note = f"  (linear R^2 = {rsquared(result.column('n'), result.column('t_max'), 1):.6f})"
        if name == "fib_memory":
            note = f"  (quadratic R^2 = {rsquared(result.column('n'), result.column('m_int'), 2):.6f})"
        print(f"{name}: {len(result.rows)} rows -> {path}{note}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
