#!/usr/bin/env python3
"""End-to-end suture pass on a synthetic scene, with and without offset
compensation, printing the circle-tracking deviation of each run.

Example:
    python3 scripts/run_suture_demo.py --bias-deg 3.0
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from suturekit.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/suture")
    ap.add_argument("--bias-deg", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    for label, compensate in (("compensated", True), ("uncompensated", False)):
        cfg = {
            "seed": args.seed,
            "injected_bias_deg": args.bias_deg,
            "compensate": compensate,
        }
        with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
            json.dump(cfg, f)
            cfg_path = f.name
        print(f"--- {label} (bias {args.bias_deg} deg) ---")
        code = cli_main(
            ["suture-run", "--config", cfg_path, "--out-dir", str(out / label)]
        )
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
