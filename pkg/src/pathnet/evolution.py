"""Serial binary tournament over path genotypes, plus module utility and duplication."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .network import NetConfig, ParameterGrid, backward_and_step, effective_sets, forward, path_modules, random_genotype
from .numerics import softmax_xent

SENTINEL = -1000.0


@dataclass
class EvolutionParams:
    population: int = 64
    mutation_prob: Optional[float] = None  # None -> 1/(N*L)
    mutation_range: int = 2
    tournament_size: int = 2
    async_tournament_size: int = 20  # B for the asynchronous engine
    async_rounds: int = 10  # training rounds (of eval_batches each) per async evaluation
    eval_batches: int = 50
    batch_size: int = 16
    lr: float = 1e-4
    reuse_prob: float = 0.2
    duplication_rate: float = 0.0
    utility_window: int = 20
    utility_eps: float = 1e-6

    def __post_init__(self):
        for name in ("mutation_prob", "reuse_prob", "duplication_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.eval_batches < 1 or self.batch_size < 1:
            raise ValueError("eval_batches and batch_size must be >= 1")
        if self.mutation_range < 1:
            raise ValueError("mutation_range must be >= 1")
        if self.population < 1 or self.tournament_size < 1 or self.async_rounds < 1:
            raise ValueError("population and tournament_size must be >= 1")

    def mutation_rate(self, cfg: NetConfig) -> float:
        if self.mutation_prob is not None:
            return self.mutation_prob
        return 1.0 / (cfg.max_modules_per_layer * cfg.layers)

    @property
    def examples_per_evaluation(self) -> int:
        return self.eval_batches * self.batch_size


@dataclass
class Population:
    slots: list
    fitness: list = field(default_factory=list)

    def __post_init__(self):
        if not self.fitness:
            self.fitness = [None] * len(self.slots)

    @classmethod
    def random(cls, size: int, cfg: NetConfig, rng: np.random.Generator) -> Population:
        return cls([random_genotype(cfg, rng) for _ in range(size)])

    def __len__(self):
        return len(self.slots)


@dataclass
class GenerationRecord:
    generation: int
    slot_a: int
    slot_b: Optional[int]
    fit_a: float
    fit_b: Optional[float]
    winner: int
    genotype_winner: list
    frozen_overlap_count: int = 0
    # async engine only
    worker_id: Optional[int] = None
    logical_time: Optional[int] = None
    copied_from: Optional[int] = None

    @property
    def best_fitness(self) -> float:
        return max(f for f in (self.fit_a, self.fit_b) if f is not None)

    def to_dict(self) -> dict:
        d = {
            "generation": self.generation,
            "slot_a": self.slot_a,
            "slot_b": self.slot_b,
            "fit_a": self.fit_a,
            "fit_b": self.fit_b,
            "winner": self.winner,
            "genotype_winner": self.genotype_winner,
            "frozen_overlap_count": self.frozen_overlap_count,
        }
        if self.worker_id is not None:
            d.update(worker_id=self.worker_id, logical_time=self.logical_time, copied_from=self.copied_from)
        return d


def frozen_overlap(g: np.ndarray, frozen_path: Optional[np.ndarray]) -> int:
    if frozen_path is None:
        return 0
    return len(path_modules(g) & path_modules(frozen_path))


def evaluate_path(grid: ParameterGrid, g: np.ndarray, task_id: str, stream, params: EvolutionParams) -> float:
    """Train the path for ``eval_batches`` mini-batches and return its training accuracy.

    Accuracy counts predictions made by the forward pass that precedes each
    update, over all ``eval_batches * batch_size`` examples.
    """
    correct = 0
    sets = effective_sets(grid, g)
    for _ in range(params.eval_batches):
        x, y = stream.next_batch(params.batch_size)
        logits, act = forward(grid, g, task_id, x, sets)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y))
        _, dlogits = softmax_xent(logits, y)
        backward_and_step(grid, g, task_id, act, dlogits, params.lr)
    return correct / params.examples_per_evaluation


def path_evaluator(grid: ParameterGrid, task_id: str, stream, params: EvolutionParams) -> Callable:
    return lambda g: evaluate_path(grid, g, task_id, stream, params)


def mutation_deltas(mutation_range: int) -> np.ndarray:
    r = np.arange(-mutation_range, mutation_range + 1)
    return r[r != 0]


def mutate(g: np.ndarray, params: EvolutionParams, cfg: NetConfig, rng: np.random.Generator,
           optimal_path: Optional[np.ndarray] = None) -> np.ndarray:
    """Copy of ``g`` with each entry mutated independently at the mutation rate.

    A mutated entry is shifted by a nonzero integer in
    ``[-mutation_range, mutation_range]`` and wrapped modulo M. When
    ``optimal_path`` is given, the entry is instead, with ``reuse_prob``,
    replaced by a module drawn from the same layer of that path.
    """
    out = np.array(g, copy=True)
    rate = params.mutation_rate(cfg)
    if rate == 0.0:
        return out
    deltas = mutation_deltas(params.mutation_range)
    M = cfg.modules_per_layer
    hits = np.argwhere(rng.random(out.shape) < rate)
    for i, l in hits:
        if optimal_path is not None and rng.random() < params.reuse_prob:
            out[i, l] = optimal_path[rng.integers(optimal_path.shape[0]), l]
        else:
            out[i, l] = (out[i, l] + deltas[rng.integers(len(deltas))]) % M
    return out


class ModuleUtility:
    """Sliding mean of the fitness of evaluated paths that contain each module."""

    def __init__(self, cfg: NetConfig, window: int = 20):
        self.cfg = cfg
        self.window = window
        self._hist = [[deque(maxlen=window) for _ in range(cfg.modules_per_layer)] for _ in range(cfg.layers)]
        self._lock = threading.Lock()

    def update(self, g: np.ndarray, fitness: float) -> None:
        with self._lock:
            for l, m in path_modules(g):
                self._hist[l][m].append(float(fitness))

    def mean(self, layer: int, module: int) -> Optional[float]:
        with self._lock:
            h = self._hist[layer][module]
            return sum(h) / len(h) if h else None

    def layer_means(self, layer: int) -> list:
        return [self.mean(layer, m) for m in range(self.cfg.modules_per_layer)]

    def clear(self, layer: int, module: int) -> None:
        with self._lock:
            self._hist[layer][module].clear()


def update_utility(util: ModuleUtility, g: np.ndarray, fitness: float) -> None:
    util.update(g, fitness)


def duplicate_module(grid: ParameterGrid, util: ModuleUtility, layer: int, rng: np.random.Generator,
                     eps: float = 1e-6):
    """Copy a high-utility module's weights over a lower-utility one in ``layer``.

    The source is drawn with weight ``utility - layer_min + eps`` among modules
    with utility data; the destination uniformly among non-frozen modules of
    lower utility (modules with no data count as lowest). Returns
    ``(source, destination)`` or ``None`` when nothing is eligible.
    """
    means = util.layer_means(layer)
    known = [m for m, u in enumerate(means) if u is not None]
    if not known:
        return None
    u = np.array([means[m] for m in known])
    w = u - u.min() + eps
    src = known[rng.choice(len(known), p=w / w.sum())]
    src_u = means[src]
    dests = [
        m for m, um in enumerate(means)
        if m != src and not grid.frozen[layer, m] and (um is None or um < src_u)
    ]
    if not dests:
        return None
    dst = dests[rng.integers(len(dests))]
    if grid.frozen[layer, dst]:
        raise AssertionError("duplication destination is frozen")
    grid.W[layer][dst] = grid.W[layer][src]
    grid.b[layer][dst] = grid.b[layer][src]
    util.clear(layer, dst)
    return src, dst


def tournament_step(pop: Population, evaluate: Callable, params: EvolutionParams, cfg: NetConfig,
                    rng: np.random.Generator, generation: int = 0, optimal_path=None, frozen_path=None,
                    utility: Optional[ModuleUtility] = None) -> GenerationRecord:
    """One binary tournament: evaluate two random slots, overwrite the loser.

    The loser's slot receives a mutated copy of the winner's genotype; ties
    are broken uniformly at random.
    """
    if len(pop) < 2:
        raise ValueError("tournament needs at least 2 slots")
    a, b = (int(i) for i in rng.choice(len(pop), size=2, replace=False))
    fa = float(evaluate(pop.slots[a]))
    fb = float(evaluate(pop.slots[b]))
    pop.fitness[a], pop.fitness[b] = fa, fb
    if utility is not None:
        utility.update(pop.slots[a], fa)
        utility.update(pop.slots[b], fb)
    if fa > fb or (fa == fb and rng.random() < 0.5):
        win, lose = a, b
    else:
        win, lose = b, a
    winner_g = np.array(pop.slots[win], copy=True)
    pop.slots[lose] = mutate(winner_g, params, cfg, rng, optimal_path)
    pop.fitness[lose] = None
    return GenerationRecord(
        generation=generation, slot_a=a, slot_b=b, fit_a=fa, fit_b=fb, winner=win,
        genotype_winner=winner_g.tolist(), frozen_overlap_count=frozen_overlap(winner_g, frozen_path),
    )


@dataclass
class EvolutionResult:
    records: list
    converged: bool
    best: np.ndarray
    best_fitness: float
    population: Population

    @property
    def generations(self) -> int:
        return len(self.records)


def evolve_serial(pop: Population, evaluate: Callable, params: EvolutionParams, cfg: NetConfig,
                  rng: np.random.Generator, max_generations: int, stop_threshold: Optional[float] = None,
                  optimal_path=None, frozen_path=None, grid: Optional[ParameterGrid] = None,
                  utility: Optional[ModuleUtility] = None, on_record: Optional[Callable] = None) -> EvolutionResult:
    """Run tournaments until a winner's accuracy reaches ``stop_threshold`` or the budget runs out.

    Module duplication fires with probability ``params.duplication_rate`` per
    generation on a uniformly chosen layer; it needs ``grid``.
    """
    if params.duplication_rate > 0 and utility is None:
        utility = ModuleUtility(cfg, params.utility_window)
    records = []
    best, best_fit = pop.slots[0], -np.inf
    converged = False
    for gen in range(max_generations):
        rec = tournament_step(pop, evaluate, params, cfg, rng, gen, optimal_path, frozen_path, utility)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if rec.best_fitness > best_fit or stop_threshold is not None and rec.best_fitness >= stop_threshold:
            best, best_fit = np.array(rec.genotype_winner), rec.best_fitness
        if params.duplication_rate > 0 and grid is not None and rng.random() < params.duplication_rate:
            duplicate_module(grid, utility, int(rng.integers(cfg.layers)), rng, params.utility_eps)
        if stop_threshold is not None and rec.best_fitness >= stop_threshold:
            converged = True
            break
    return EvolutionResult(records, converged, best, best_fit, pop)
