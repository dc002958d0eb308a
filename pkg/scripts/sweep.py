"""Run (or resume) a seeded transfer sweep and print the aggregate report.

    python scripts/sweep.py configs/mnist_transfer.toml --root results/sweeps
"""

import argparse
import sys

from pathnet.report import build_report, format_report, load_summaries, write_report
from pathnet.sweep import load_sweep, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--root", default="results/sweeps")
    ap.add_argument("--data-dir")
    ap.add_argument("--seeds", type=int, help="override the seed count")
    args = ap.parse_args()
    sweep = load_sweep(args.config)
    if args.seeds is not None:
        sweep.seeds = args.seeds
    out = run_sweep(sweep, args.root, args.data_dir, log=lambda s: print(s, flush=True))
    report = build_report(load_summaries(out))
    write_report(report, out)
    print(format_report(report))
    print(f"results in {out}")


if __name__ == "__main__":
    sys.exit(main())
