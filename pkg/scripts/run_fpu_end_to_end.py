"""Tune epsilon on the FPU chain and print the closure report.

Usage: python3 scripts/run_fpu_end_to_end.py [OUT_DIR]
"""

import json
import sys
from pathlib import Path

from qeclosure.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "fpu_end_to_end.json"

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/fpu_end_to_end")
    code = main(["tune", "--config", str(CONFIG), "--out", str(out), "--force", "--quiet"])
    report = json.loads((out / "report.json").read_text())
    for key in ("epsilon_star", "interior", "relative_l2_error", "noise_floor", "window", "passed"):
        print(f"{key:>18}: {report[key]}")
    sys.exit(code)
