#!/usr/bin/env python3
"""Simulate the biased plant under the PI loop and report the per-joint
steady-state error reduction versus the PI-off baseline.

Example:
    python3 scripts/run_control_sim.py --out-dir out/control
"""
import argparse
import sys

from suturekit.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/control_sim.json")
    ap.add_argument("--out-dir", default="out/control")
    args = ap.parse_args()
    return cli_main(["control-sim", "--config", args.config, "--out-dir", args.out_dir])


if __name__ == "__main__":
    sys.exit(main())
