#!/usr/bin/env python3
"""Generate the calibration dataset, train the offset regressor and report
held-out per-joint errors.

Example:
    python3 scripts/run_calibration.py --out-dir out/calib
"""
import argparse
import sys

from suturekit.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/calib.json")
    ap.add_argument("--out-dir", default="out/calib")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    common = ["--config", args.config, "--out-dir", args.out_dir]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    for step in ("gen", "train", "eval"):
        code = cli_main(["calib", step, *common])
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
