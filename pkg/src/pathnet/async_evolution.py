"""Asynchronous tournament selection: one worker per population slot, one shared grid.

Each worker repeatedly evaluates the genotype in its own slot, publishes the
fitness, looks at ``B`` other random slots and, if one of them has at least
its own fitness, copies the best of them (mutated) into its own slot. While a
freshly copied genotype is being evaluated its slot holds ``SENTINEL`` so it
cannot win tournaments. A worker that keeps its genotype keeps its published
fitness visible while it re-evaluates.

Workers are threads. Module parameters are updated without locks (Hogwild);
the fitness array and genotype slots are guarded per slot.
"""

from __future__ import annotations

import itertools
import threading
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .evolution import (
    SENTINEL,
    EvolutionParams,
    GenerationRecord,
    ModuleUtility,
    Population,
    duplicate_module,
    evaluate_path,
    frozen_overlap,
    mutate,
)
from .network import NetConfig, ParameterGrid
from .numerics import rng_stream


class SlotOwnershipError(RuntimeError):
    pass


class WorkerError(RuntimeError):
    pass


class SharedFitnessArray:
    """Published fitness per slot; only the owning worker may write a slot."""

    def __init__(self, size: int, audit: bool = True):
        self._values = [SENTINEL] * size
        self._locks = [threading.Lock() for _ in range(size)]
        self.audit = audit
        self.writes = [0] * size
        self.violations: list = []

    def __len__(self):
        return len(self._values)

    def read(self, slot: int) -> float:
        with self._locks[slot]:
            return self._values[slot]

    def write(self, slot: int, value: float, writer: int) -> None:
        if writer != slot:
            self.violations.append((slot, writer))
            raise SlotOwnershipError(f"worker {writer} attempted to write fitness slot {slot}")
        with self._locks[slot]:
            self._values[slot] = float(value)
            if self.audit:
                self.writes[slot] += 1

    def snapshot(self) -> list:
        return [self.read(i) for i in range(len(self))]


class SharedPopulation:
    """Genotype slots with a per-slot guard.

    ``origin[i]`` is the slot whose initial genotype slot ``i`` descends from;
    it travels with every copy and is used for lineage checks.
    """

    def __init__(self, genotypes):
        self._slots = [np.array(g, copy=True) for g in genotypes]
        self.origin = list(range(len(self._slots)))
        self._guards = [threading.Lock() for _ in self._slots]

    def __len__(self):
        return len(self._slots)

    @contextmanager
    def guard(self, slot: int):
        with self._guards[slot]:
            yield

    def read(self, slot: int):
        with self._guards[slot]:
            return self._slots[slot].copy(), self.origin[slot]

    def _store(self, slot: int, g: np.ndarray, origin: int) -> None:
        # caller holds guard(slot)
        self._slots[slot] = np.array(g, copy=True)
        self.origin[slot] = origin

    def genotypes(self) -> list:
        return [self.read(i)[0] for i in range(len(self))]


@dataclass
class WorkerState:
    worker_id: int
    genotype: np.ndarray
    rng: np.random.Generator
    stream: object = None
    evaluations: int = 0
    best: Optional[np.ndarray] = None
    best_fitness: float = -np.inf
    copies: list = field(default_factory=list)  # (logical_time, source slot, source fitness)


class Budget:
    """Global generation/example budget claimed one generation at a time."""

    def __init__(self, max_generations: Optional[int] = None, max_examples: Optional[int] = None,
                 examples_per_generation: int = 1):
        self.max_generations = max_generations
        self.max_examples = max_examples
        self.per_gen = examples_per_generation
        self._claimed = 0
        self._lock = threading.Lock()

    def claim(self) -> bool:
        with self._lock:
            if self.max_generations is not None and self._claimed >= self.max_generations:
                return False
            if self.max_examples is not None and (self._claimed + 1) * self.per_gen > self.max_examples:
                return False
            self._claimed += 1
            return True

    @property
    def claimed(self) -> int:
        return self._claimed


class LogicalClock:
    def __init__(self):
        self._counter = itertools.count()
        self._lock = threading.Lock()

    def tick(self) -> int:
        with self._lock:
            return next(self._counter)


def grid_evaluator(grid: ParameterGrid, task, params: EvolutionParams) -> Callable:
    """Evaluator for real training: ``async_rounds`` rounds of ``eval_batches`` mini-batches.

    Fitness is the training accuracy over all rounds. Each worker trains
    through its own task stream keyed by its worker id.
    """
    def evaluate(g, worker: WorkerState) -> float:
        if worker.stream is None:
            worker.stream = task.stream(worker.worker_id + 1)
        accs = [evaluate_path(grid, g, task.task_id, worker.stream, params) for _ in range(params.async_rounds)]
        return float(np.mean(accs))
    return evaluate


def _sample_others(rng: np.random.Generator, size: int, me: int, b: int) -> list:
    others = [j for j in range(size) if j != me]
    if not others or b <= 0:
        return []
    pick = rng.choice(len(others), size=min(b, len(others)), replace=False)
    return [others[k] for k in pick]


def worker_loop(worker: WorkerState, pop: SharedPopulation, fit: SharedFitnessArray, evaluate: Callable,
                params: EvolutionParams, cfg: NetConfig, budget: Budget, clock: LogicalClock,
                stop: threading.Event, out: list, tournament_size: Optional[int] = None,
                optimal_path=None, frozen_path=None, stop_threshold: Optional[float] = None,
                utility: Optional[ModuleUtility] = None, grid: Optional[ParameterGrid] = None,
                converged: Optional[list] = None) -> None:
    """Run one worker until the stop flag is raised or the budget is spent.

    A round in progress when ``stop`` is raised is finished before exiting.
    Records are appended to ``out``.
    """
    me = worker.worker_id
    size = len(pop)
    B = params.async_tournament_size if tournament_size is None else tournament_size
    needs_sentinel = True
    while not stop.is_set() and budget.claim():
        g = worker.genotype
        if needs_sentinel:
            with pop.guard(me):
                fit.write(me, SENTINEL, me)
        f = float(evaluate(g, worker))
        worker.evaluations += 1
        fit.write(me, f, me)
        if f > worker.best_fitness:
            worker.best, worker.best_fitness = np.array(g, copy=True), f
        if utility is not None:
            utility.update(g, f)
        if stop_threshold is not None and f >= stop_threshold and converged is not None:
            converged.append((me, np.array(g, copy=True), f))
            stop.set()

        sampled = _sample_others(worker.rng, size, me, B)
        best_j, best_f = None, None
        for j in sampled:
            fj = fit.read(j)
            if fj == SENTINEL:
                continue
            if best_f is None or fj > best_f:
                best_j, best_f = j, fj

        t = clock.tick()
        copied = None
        winner_g = g
        if best_j is not None and best_f >= f:
            with pop.guard(best_j):
                src_f = fit.read(best_j)
                src_g = pop._slots[best_j].copy()
                src_origin = pop.origin[best_j]
            # re-check: the source may have started a new evaluation since it was sampled
            if src_f != SENTINEL and src_f >= f:
                child = mutate(src_g, params, cfg, worker.rng, optimal_path)
                with pop.guard(me):
                    pop._store(me, child, src_origin)
                    fit.write(me, SENTINEL, me)
                worker.genotype = child
                worker.copies.append((t, best_j, src_f))
                copied, winner_g, best_f = best_j, src_g, src_f
        needs_sentinel = False

        if me == 0 and grid is not None and utility is not None and params.duplication_rate > 0 \
                and worker.rng.random() < params.duplication_rate:
            duplicate_module(grid, utility, int(worker.rng.integers(cfg.layers)), worker.rng, params.utility_eps)

        out.append(GenerationRecord(
            generation=t, slot_a=me, slot_b=best_j, fit_a=f, fit_b=best_f,
            winner=me if copied is None else copied, genotype_winner=np.asarray(winner_g).tolist(),
            frozen_overlap_count=frozen_overlap(np.asarray(winner_g), frozen_path),
            worker_id=me, logical_time=t, copied_from=copied,
        ))


@dataclass
class AsyncResult:
    records: list
    population: Population
    converged: bool
    best: np.ndarray
    best_fitness: float
    workers: list
    fitness_array: SharedFitnessArray
    shared: SharedPopulation

    @property
    def generations(self) -> int:
        return len(self.records)


def run_async(pop: Population, evaluate: Callable, params: EvolutionParams, cfg: NetConfig, seed: int = 0,
              worker_count: Optional[int] = None, max_generations: Optional[int] = None,
              max_examples: Optional[int] = None, stop_threshold: Optional[float] = None,
              optimal_path=None, frozen_path=None, grid: Optional[ParameterGrid] = None,
              utility: Optional[ModuleUtility] = None, tournament_size: Optional[int] = None,
              timeout: Optional[float] = None) -> AsyncResult:
    """Launch one worker thread per slot, run until a budget or the threshold is hit, join.

    ``evaluate(genotype, worker_state) -> fitness``; see ``grid_evaluator``.
    Records come back ordered by logical time. A worker exception aborts
    the run with ``WorkerError``.
    """
    P = len(pop)
    if worker_count is not None and worker_count != P:
        raise ValueError(f"worker_count ({worker_count}) must equal population size ({P})")
    if max_generations is None and max_examples is None and stop_threshold is None:
        raise ValueError("run_async needs a generation budget, an example budget, or a stop threshold")
    if params.duplication_rate > 0 and utility is None:
        utility = ModuleUtility(cfg, params.utility_window)
    shared = SharedPopulation(pop.slots)
    fit = SharedFitnessArray(P)
    per_gen = params.async_rounds * params.examples_per_evaluation
    budget = Budget(max_generations, max_examples, per_gen)
    clock = LogicalClock()
    stop = threading.Event()
    converged: list = []
    outs = [[] for _ in range(P)]
    errors: list = []
    workers = [WorkerState(i, np.array(pop.slots[i], copy=True), rng_stream(seed, 1000 + i)) for i in range(P)]

    start = threading.Barrier(P)

    def run(i):
        try:
            if P > 1:
                start.wait()
            worker_loop(workers[i], shared, fit, evaluate, params, cfg, budget, clock, stop, outs[i],
                        tournament_size, optimal_path, frozen_path, stop_threshold, utility, grid, converged)
        except BaseException as e:  # noqa: BLE001 - reported after join
            errors.append((i, e, traceback.format_exc()))
            stop.set()
            start.abort()

    if P == 1:
        run(0)
    else:
        threads = [threading.Thread(target=run, args=(i,), name=f"pathnet-worker-{i}", daemon=True) for i in range(P)]
        for th in threads:
            th.start()
        for th in threads:
            th.join(timeout)
        if any(th.is_alive() for th in threads):
            stop.set()
            raise WorkerError(f"workers still running after {timeout}s join timeout")
    if errors:
        i, e, tb = errors[0]
        raise WorkerError(f"worker {i} failed: {e!r}\n{tb}") from e

    records = sorted((r for o in outs for r in o), key=lambda r: r.logical_time)
    final = Population([g for g in shared.genotypes()], fit.snapshot())
    done = bool(converged)
    if done:
        _, best, best_f = converged[0]
    else:
        top = max(workers, key=lambda w: w.best_fitness)
        best = top.best if top.best is not None else final.slots[0]
        best_f = top.best_fitness
    return AsyncResult(records, final, done, np.asarray(best), float(best_f), workers, fit, shared)
