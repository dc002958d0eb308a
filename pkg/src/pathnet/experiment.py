"""Transfer experiments: PathNet versus fixed-path independent and fine-tuning controls.

Every arm spends the same number of training examples per generation (two
path evaluations), so generation counts are comparable across arms.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .async_evolution import grid_evaluator, run_async
from .evolution import (
    EvolutionParams,
    GenerationRecord,
    ModuleUtility,
    Population,
    evaluate_path,
    evolve_serial,
    path_evaluator,
)
from .network import NetConfig, ParameterGrid, freeze_path, path_modules, reinit_unfrozen, save_grid
from .numerics import rng_stream
from .tasks import TaskSpec

ARMS = ("independent", "finetune", "pathnet")
ENGINES = ("serial", "async")
SUMMARY_SCHEMA = "pathnet.summary/1"

# rng stream ids derived from the plan seed
_GRID, _EVO_A, _EVO_B, _REINIT, _HEAD_A, _HEAD_B = range(6)


@dataclass
class ExperimentPlan:
    arm: str
    task_a: TaskSpec
    task_b: TaskSpec
    net: NetConfig = field(default_factory=NetConfig.mnist)
    evo: EvolutionParams = field(default_factory=EvolutionParams)
    engine: str = "serial"
    seed: int = 0
    budget: int = 500  # max generations per task
    reuse_on_task_b: bool = True  # pass the frozen path to mutation during task B

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.task_a.input_dim != self.net.input_dim or self.task_b.input_dim != self.net.input_dim:
            raise ValueError("task input_dim must equal net.input_dim")

    def describe(self) -> dict:
        return {
            "arm": self.arm,
            "engine": self.engine,
            "seed": self.seed,
            "budget": self.budget,
            "task_a": self.task_a.task_id,
            "task_b": self.task_b.task_id,
            "stop_threshold_a": self.task_a.stop_threshold,
            "stop_threshold_b": self.task_b.stop_threshold,
            "reuse_on_task_b": self.reuse_on_task_b,
            "net": asdict(self.net),
            "evo": asdict(self.evo),
        }


@dataclass
class TransferOutcome:
    arm: str
    gens_task_a: int
    gens_task_b: int
    converged_a: bool
    converged_b: bool
    best_a: np.ndarray
    best_b: np.ndarray
    records_a: list
    records_b: list
    overlap_count: Optional[int] = None
    frozen_intact: Optional[bool] = None
    final_population_b: Optional[Population] = None
    grid: Optional[ParameterGrid] = None

    @property
    def total(self) -> int:
        return self.gens_task_a + self.gens_task_b

    @property
    def converged(self) -> bool:
        return self.converged_a and self.converged_b

    def summary(self) -> dict:
        return {
            "arm": self.arm,
            "gens_task_a": self.gens_task_a,
            "gens_task_b": self.gens_task_b,
            "total": self.total,
            "converged_a": self.converged_a,
            "converged_b": self.converged_b,
            "converged": self.converged,
            "overlap_count": self.overlap_count,
            "frozen_intact": self.frozen_intact,
            "best_a": np.asarray(self.best_a).tolist(),
            "best_b": np.asarray(self.best_b).tolist(),
        }


def _head_keys(plan: ExperimentPlan) -> tuple[str, str]:
    a, b = plan.task_a.task_id, plan.task_b.task_id
    return (a, b) if a != b else (a, b + "'")


def _evolve(plan: ExperimentPlan, grid: ParameterGrid, task: TaskSpec, head: str, evo_stream: int,
            optimal_path=None, frozen_path=None):
    """Evolve a fresh population on one task with the plan's engine."""
    rng = rng_stream(plan.seed, evo_stream)
    pop = Population.random(plan.evo.population, plan.net, rng)
    utility = ModuleUtility(plan.net, plan.evo.utility_window) if plan.evo.duplication_rate > 0 else None
    if plan.engine == "serial":
        evaluate = path_evaluator(grid, head, task.stream(evo_stream), plan.evo)
        return evolve_serial(pop, evaluate, plan.evo, plan.net, rng, plan.budget, task.stop_threshold,
                             optimal_path, frozen_path, grid, utility)
    keyed = TaskSpec(head, task.classes, task.input_dim, task.make_stream, task.seed * 7919 + evo_stream,
                     task.stop_threshold)
    return run_async(pop, grid_evaluator(grid, keyed, plan.evo), plan.evo, plan.net,
                     seed=plan.seed * 7919 + evo_stream, max_generations=plan.budget,
                     stop_threshold=task.stop_threshold, optimal_path=optimal_path, frozen_path=frozen_path,
                     grid=grid, utility=utility)


def run_pathnet_transfer(plan: ExperimentPlan) -> TransferOutcome:
    """Evolve on task A, freeze the best path, reinitialize the rest, evolve on task B."""
    if plan.arm != "pathnet":
        raise ValueError("run_pathnet_transfer needs arm='pathnet'")
    head_a, head_b = _head_keys(plan)
    grid = ParameterGrid(plan.net, rng_stream(plan.seed, _GRID))
    grid.add_head(head_a, plan.task_a.classes, rng_stream(plan.seed, _HEAD_A))
    res_a = _evolve(plan, grid, plan.task_a, head_a, _EVO_A)

    best_a = np.asarray(res_a.best)
    freeze_path(grid, best_a)
    snapshot = grid.frozen_snapshot()
    reinit_unfrozen(grid, rng_stream(plan.seed, _REINIT))
    grid.add_head(head_b, plan.task_b.classes, rng_stream(plan.seed, _HEAD_B))
    res_b = _evolve(plan, grid, plan.task_b, head_b, _EVO_B,
                    optimal_path=best_a if plan.reuse_on_task_b else None, frozen_path=best_a)

    return TransferOutcome(
        arm="pathnet",
        gens_task_a=res_a.generations, gens_task_b=res_b.generations,
        converged_a=res_a.converged, converged_b=res_b.converged,
        best_a=best_a, best_b=np.asarray(res_b.best),
        records_a=res_a.records, records_b=res_b.records,
        overlap_count=overlap_metric(res_b.population, best_a),
        frozen_intact=grid.frozen_snapshot() == snapshot,
        final_population_b=res_b.population,
        grid=grid,
    )


def control_genotype(cfg: NetConfig) -> np.ndarray:
    """Maximum-size fixed path: modules ``0..N-1`` in every layer."""
    return np.repeat(np.arange(cfg.max_modules_per_layer)[:, None], cfg.layers, axis=1)


def _train_fixed(grid, g, task: TaskSpec, head: str, params: EvolutionParams, budget: int, stream_id: int):
    stream = task.stream(stream_id)
    records = []
    for gen in range(budget):
        fa = evaluate_path(grid, g, head, stream, params)
        fb = evaluate_path(grid, g, head, stream, params)
        records.append(GenerationRecord(gen, 0, 0, fa, fb, 0, g.tolist()))
        if max(fa, fb) >= task.stop_threshold:
            return records, True
    return records, False


def run_control(plan: ExperimentPlan) -> TransferOutcome:
    """Fixed maximum-size path trained on A then B, two evaluations' worth of data per generation.

    ``independent`` learns task B on freshly initialized parameters;
    ``finetune`` continues from the task-A parameters with a new readout.
    """
    if plan.arm not in ("independent", "finetune"):
        raise ValueError("run_control needs arm 'independent' or 'finetune'")
    head_a, head_b = _head_keys(plan)
    g = control_genotype(plan.net)
    grid = ParameterGrid(plan.net, rng_stream(plan.seed, _GRID))
    grid.add_head(head_a, plan.task_a.classes, rng_stream(plan.seed, _HEAD_A))
    rec_a, conv_a = _train_fixed(grid, g, plan.task_a, head_a, plan.evo, plan.budget, _EVO_A)
    if plan.arm == "independent":
        reinit_unfrozen(grid, rng_stream(plan.seed, _REINIT))
    grid.add_head(head_b, plan.task_b.classes, rng_stream(plan.seed, _HEAD_B))
    rec_b, conv_b = _train_fixed(grid, g, plan.task_b, head_b, plan.evo, plan.budget, _EVO_B)
    return TransferOutcome(plan.arm, len(rec_a), len(rec_b), conv_a, conv_b, g, g, rec_a, rec_b, grid=grid)


def run_plan(plan: ExperimentPlan) -> TransferOutcome:
    return run_pathnet_transfer(plan) if plan.arm == "pathnet" else run_control(plan)


def overlap_metric(final_pop, frozen_path: np.ndarray) -> int:
    """Distinct (layer, module) pairs of ``frozen_path`` present anywhere in ``final_pop``."""
    slots = final_pop.slots if isinstance(final_pop, Population) else final_pop
    present = set()
    for g in slots:
        present |= path_modules(np.asarray(g))
    return len(present & path_modules(np.asarray(frozen_path)))


def speedup_ratio(control: TransferOutcome, pathnet: TransferOutcome) -> Optional[float]:
    """``control.total / pathnet.total``; ``None`` unless both runs converged."""
    if not (control.converged and pathnet.converged):
        return None
    return control.total / pathnet.total


def run_basename(plan: ExperimentPlan) -> str:
    return f"{plan.arm}-{plan.seed}-{plan.task_a.task_id}-{plan.task_b.task_id}"


def write_run(out_dir, plan: ExperimentPlan, outcome: TransferOutcome, extra: Optional[dict] = None,
              checkpoint: bool = False) -> str:
    """Write ``<base>.json`` (summary) and ``<base>.jsonl`` (one line per generation).

    With ``checkpoint`` the final grid goes to ``<base>.npz``.
    """
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, run_basename(plan))
    with open(base + ".jsonl", "w") as f:
        for task, recs in (("a", outcome.records_a), ("b", outcome.records_b)):
            for r in recs:
                f.write(json.dumps({"task": task, **r.to_dict()}) + "\n")
    summary = {
        "schema": SUMMARY_SCHEMA,
        "plan": {**plan.describe(), **(extra or {})},
        "outcome": outcome.summary(),
        "gens_task_a": outcome.gens_task_a,
        "gens_task_b": outcome.gens_task_b,
        "overlap": outcome.overlap_count,
        "converged_a": outcome.converged_a,
        "converged_b": outcome.converged_b,
        "records": os.path.basename(base + ".jsonl"),
    }
    if checkpoint and outcome.grid is not None:
        save_grid(outcome.grid, base + ".npz")
        summary["checkpoint"] = os.path.basename(base + ".npz")
    with open(base + ".json", "w") as f:
        json.dump(summary, f, indent=2)
    return base + ".json"
