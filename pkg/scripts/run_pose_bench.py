#!/usr/bin/env python3
"""Run the stereo needle pose estimation benchmark.

Examples:
    python3 scripts/run_pose_bench.py --scenes 20
    python3 scripts/run_pose_bench.py --config configs/pose_bench_occlusion.json
"""
import argparse
import sys

from suturekit.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/pose_bench.json")
    ap.add_argument("--out-dir", default="out/pose_bench")
    ap.add_argument("--scenes", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    argv = ["pose-bench", "--config", args.config, "--out-dir", args.out_dir]
    if args.scenes is not None:
        argv += ["--scenes", str(args.scenes)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
