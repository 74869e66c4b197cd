#!/usr/bin/env python3
"""Aggregator and fusion ladders on a small synthetic dataset.

Generates a reduced dataset under runs/ablation/data (600 samples) and trains
every variant for a few epochs; results land in runs/ablation/ablation.csv.
Extra flags are forwarded to `mvgmn ablate` (e.g. --epochs 10).
"""

import sys
from pathlib import Path

from mvgmn.cli import main

ROOT = Path(__file__).resolve().parent.parent / "runs" / "ablation"


def run() -> int:
    data_dir = ROOT / "data"
    if not (data_dir / "manifest.json").exists():
        code = main([
            "gen-data", "--out", str(data_dir), "--seed", "0",
            "--samples-per-class", "60",
        ])
        if code != 0:
            return code
    args = [
        "ablate",
        "--data", str(data_dir / "manifest.json"),
        "--out", str(ROOT),
        "--ladder", "both",
        "--seed", "0",
        "--epochs", "5",
    ]
    return main(args + sys.argv[1:])


if __name__ == "__main__":
    sys.exit(run())
