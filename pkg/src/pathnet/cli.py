"""``pathnet`` command line: run, stats, inspect, fetch-data.

Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback

from .config import ConfigError, build_plans, config_to_dict, load_config
from .experiment import run_plan, write_run
from .network import CheckpointFormatError, describe_grid, format_grid_description, load_grid
from .report import EmptyInputError, SchemaError, build_report, format_report, load_summaries, write_report
from .tasks import DATA_DIR_ENV, DataError, IdxFormatError, load_idx

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

# MD5 digests of the canonical MNIST distribution files
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

FETCH_INSTRUCTIONS = """\
MNIST is not downloaded automatically. Place the IDX files (gzipped or not) in
  {dir}
  train-images-idx3-ubyte[.gz]  train-labels-idx1-ubyte[.gz]
from any MNIST mirror, or build a 5000-image subset from a local copy with
  python scripts/prepare_mnist.py --out {dir}
Set ${env} to use another directory.
"""


class UsageError(Exception):
    pass


def _md5(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_run(args) -> int:
    overrides = {"arm": args.arm, "engine": args.engine, "seed": args.seed, "replicas": args.replicas,
                 "budget": args.budget, "out_dir": args.out, "workers": args.workers}
    if args.checkpoint:
        overrides["checkpoint"] = True
    cfg = load_config(args.config, overrides, args.set or ())
    plans = build_plans(cfg, args.data_dir)
    for plan in plans:
        outcome = run_plan(plan)
        path = write_run(cfg.out_dir, plan, outcome, extra={"config": config_to_dict(cfg)},
                         checkpoint=cfg.checkpoint)
        state = "converged" if outcome.converged else "unconverged"
        print(f"{plan.arm} seed={plan.seed} {plan.task_a.task_id}->{plan.task_b.task_id}: "
              f"{outcome.gens_task_a}+{outcome.gens_task_b}={outcome.total} generations, {state}"
              + ("" if outcome.overlap_count is None else f", overlap {outcome.overlap_count}")
              + f" -> {path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    report = build_report(load_summaries(args.summary_dir))
    jp, cp = write_report(report, args.out or args.summary_dir)
    print(format_report(report))
    print(f"wrote {jp} and {cp}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    desc = describe_grid(load_grid(args.checkpoint))
    print(json.dumps(desc, indent=2) if args.json else format_grid_description(desc))
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    d = args.data_dir or os.environ.get(DATA_DIR_ENV) or "data/mnist"
    print(FETCH_INSTRUCTIONS.format(dir=d, env=DATA_DIR_ENV))
    status = EXIT_OK
    for gz, digest in MNIST_FILES.items():
        p = os.path.join(d, gz)
        if os.path.exists(p):
            got = _md5(p)
            ok = got == digest
            print(f"{gz}: md5 {'ok' if ok else f'MISMATCH ({got}, expected {digest})'}")
            status = status if ok else EXIT_DATA
    for prefix in ("train", "t10k"):
        stems = (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte")
        paths = []
        for stem in stems:
            cands = [os.path.join(d, stem + ext) for ext in ("", ".gz")]
            paths.append(next((c for c in cands if os.path.exists(c)), None))
        if None in paths:
            print(f"{prefix}: missing")
            if prefix == "train":
                status = EXIT_DATA
            continue
        x, y = load_idx(*paths)
        print(f"{prefix}: {len(y)} images {x.shape[1]}x{x.shape[2]}, structure ok")
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pathnet", description="PathNet transfer experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment arm (optionally several seeded replicas)")
    r.add_argument("--config", help="TOML run configuration")
    r.add_argument("--arm", choices=("independent", "finetune", "pathnet"))
    r.add_argument("--engine", choices=("serial", "async"))
    r.add_argument("--seed", type=int)
    r.add_argument("--replicas", type=int)
    r.add_argument("--budget", type=int, help="max generations per task")
    r.add_argument("--workers", type=int, help="async engine worker count (= population size)")
    r.add_argument("--out", help="output directory for summaries")
    r.add_argument("--data-dir", help=f"MNIST directory (overrides ${DATA_DIR_ENV} and the config file)")
    r.add_argument("--checkpoint", action="store_true", help="also save the final grid as .npz")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field, e.g. evo.lr=4e-4 or task_a.digits=[1,2]")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stats", help="aggregate run summaries")
    s.add_argument("summary_dir")
    s.add_argument("--out", help="where to write stats.json and overlap_speedup.csv (default: summary_dir)")
    s.set_defaults(func=cmd_stats)

    i = sub.add_parser("inspect", help="describe a grid checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    f = sub.add_parser("fetch-data", help="print MNIST instructions and verify files present")
    f.add_argument("--data-dir")
    f.set_defaults(func=cmd_fetch_data)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"pathnet: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IdxFormatError, EmptyInputError, SchemaError, CheckpointFormatError) as e:
        print(f"pathnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"pathnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        print("pathnet: internal error", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
