#!/usr/bin/env python3
"""Generate the default synthetic dataset (if missing) and train on it.

Writes everything under runs/synthetic_default/: the dataset, a checkpoint,
and the per-epoch JSON-lines log. Flags after the script name are forwarded
to `mvgmn train` (e.g. --aggregator ssm --epochs 10).
"""

import sys
from pathlib import Path

from mvgmn.cli import main

ROOT = Path(__file__).resolve().parent.parent / "runs" / "synthetic_default"


def run() -> int:
    data_dir = ROOT / "data"
    if not (data_dir / "manifest.json").exists():
        code = main(["gen-data", "--out", str(data_dir), "--seed", "0"])
        if code != 0:
            return code
    args = [
        "train",
        "--data", str(data_dir / "manifest.json"),
        "--out", str(ROOT / "train"),
        "--seed", "0",
        "--epochs", "30",
    ]
    return main(args + sys.argv[1:])


if __name__ == "__main__":
    sys.exit(run())
