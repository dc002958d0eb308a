"""Seeded replication sweeps over digit-pair transfers, cached by configuration hash."""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .config import ConfigError, RunConfig, build_plans, config_from_dict, config_to_dict
from .experiment import ARMS, run_basename, run_plan, write_run

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


SWEEP_SCHEMA = "pathnet.sweep/1"


@dataclass
class SweepConfig:
    pairs: list  # [[[a, b], [c, d]], ...]: task A digits, task B digits; seed s uses pairs[s % len]
    seeds: int = 20
    first_seed: int = 0
    arms: list = field(default_factory=lambda: list(ARMS))
    budget: int = 500
    engine: str = "serial"
    task: dict = field(default_factory=dict)  # TaskConfig fields shared by both tasks
    net: dict = field(default_factory=dict)
    evo: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("pairs", "need at least one digit-pair transfer")
        for i, p in enumerate(self.pairs):
            if not (isinstance(p, list) and len(p) == 2 and all(isinstance(q, list) and len(q) == 2 for q in p)):
                raise ConfigError(f"pairs[{i}]", f"expected [[a, b], [c, d]], got {p!r}")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError("arms", f"unknown arms {bad}")
        if self.seeds < 1:
            raise ConfigError("seeds", "must be >= 1")

    def run_config(self, arm: str, seed: int) -> RunConfig:
        da, db = self.pairs[seed % len(self.pairs)]
        doc = {
            "arm": arm, "engine": self.engine, "seed": seed, "budget": self.budget,
            "task_a": {**self.task, "kind": "mnist", "digits": list(da)},
            "task_b": {**self.task, "kind": "mnist", "digits": list(db)},
            "net": dict(self.net), "evo": dict(self.evo),
        }
        return config_from_dict(doc)

    def digest(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_sweep(path) -> SweepConfig:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    known = set(SweepConfig.__dataclass_fields__)
    for k in doc:
        if k not in known:
            raise ConfigError(k, f"unknown key (expected one of {sorted(known)})")
    return SweepConfig(**doc)


def sweep_dir(sweep: SweepConfig, root) -> str:
    return os.path.join(os.fspath(root), sweep.digest())


def run_sweep(sweep: SweepConfig, root, data_dir: Optional[str] = None,
              log: Callable[[str], None] = print) -> str:
    """Run every (seed, arm) not already present under ``root/<digest>``; return that directory."""
    out = sweep_dir(sweep, root)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "sweep.json"), "w") as f:
        json.dump({"schema": SWEEP_SCHEMA, "digest": sweep.digest(), "sweep": asdict(sweep)}, f, indent=2)
    for seed in range(sweep.first_seed, sweep.first_seed + sweep.seeds):
        for arm in sweep.arms:
            cfg = sweep.run_config(arm, seed)
            (plan,) = build_plans(cfg, data_dir)
            if os.path.exists(os.path.join(out, run_basename(plan) + ".json")):
                continue
            t0 = time.time()
            outcome = run_plan(plan)
            write_run(out, plan, outcome, extra={"config": config_to_dict(cfg), "sweep": sweep.digest()})
            log(f"{arm:<11} seed={seed:<3} {plan.task_a.task_id}->{plan.task_b.task_id} "
                f"{outcome.gens_task_a}+{outcome.gens_task_b}={outcome.total} "
                f"{'converged' if outcome.converged else 'UNCONVERGED'} ({time.time() - t0:.0f}s)")
    return out


def sweep_complete(sweep: SweepConfig, root) -> bool:
    out = sweep_dir(sweep, root)
    for seed in range(sweep.first_seed, sweep.first_seed + sweep.seeds):
        da, db = sweep.pairs[seed % len(sweep.pairs)]
        for arm in sweep.arms:
            name = f"{arm}-{seed}-mnist{da[0]}v{da[1]}-mnist{db[0]}v{db[1]}.json"
            if not os.path.exists(os.path.join(out, name)):
                return False
    return True
