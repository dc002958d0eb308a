"""The module grid: L layers of M small ReLU modules, per-task readouts, path gating.

A genotype is an ``(N, L)`` integer array; column ``l`` names the modules used
in layer ``l``. Repeated entries activate a module once. Active module outputs
within a layer are summed and fed to every active module of the next layer;
the last layer's sum goes to the task's linear readout.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import DTYPE, DimensionError, glorot_uniform, linear_backward

CHECKPOINT_SCHEMA = "pathnet.grid/1"


class GridStateError(RuntimeError):
    """Raised on operations that need state the grid does not have (e.g. a missing head)."""


class CheckpointFormatError(ValueError):
    pass


@dataclass
class NetConfig:
    layers: int = 3
    modules_per_layer: int = 10
    neurons_per_module: int = 20
    max_modules_per_layer: int = 3
    input_dim: int = 784
    # Union the frozen task-A path into every forward pass (the RL variant).
    always_active_frozen: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 1 <= self.max_modules_per_layer <= self.modules_per_layer:
            raise ValueError("need 1 <= max_modules_per_layer <= modules_per_layer")
        if self.neurons_per_module < 1 or self.input_dim < 1:
            raise ValueError("neurons_per_module and input_dim must be positive")

    @classmethod
    def mnist(cls, **kw) -> NetConfig:
        return cls(**{"layers": 3, "modules_per_layer": 10, "neurons_per_module": 20,
                      "max_modules_per_layer": 3, "input_dim": 784, **kw})

    @classmethod
    def large(cls, **kw) -> NetConfig:
        return cls(**{"layers": 3, "modules_per_layer": 20, "neurons_per_module": 20,
                      "max_modules_per_layer": 5, "input_dim": 784, **kw})

    @property
    def genotype_shape(self) -> tuple[int, int]:
        return (self.max_modules_per_layer, self.layers)

    def layer_in_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.neurons_per_module


def random_genotype(cfg: NetConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, cfg.modules_per_layer, size=cfg.genotype_shape, dtype=np.int64)


def active_set(g: np.ndarray, layer: int) -> tuple[int, ...]:
    if not 0 <= layer < g.shape[1]:
        raise IndexError(f"layer {layer} outside genotype with {g.shape[1]} layers")
    return tuple(int(m) for m in np.unique(g[:, layer]))


def active_sets(g: np.ndarray) -> list[tuple[int, ...]]:
    return [active_set(g, l) for l in range(g.shape[1])]


def path_modules(g: np.ndarray) -> set[tuple[int, int]]:
    """Distinct ``(layer, module)`` pairs a genotype activates."""
    return {(l, m) for l in range(g.shape[1]) for m in active_set(g, l)}


@dataclass
class Head:
    W: np.ndarray
    b: np.ndarray

    @property
    def classes(self) -> int:
        return self.W.shape[0]


class ParameterGrid:
    """All module parameters, task readouts, and the frozen mask.

    ``W[l]`` has shape ``(M, neurons, in_dim_l)`` and ``b[l]`` ``(M, neurons)``
    so one module is ``(W[l][m], b[l][m])``. Updates are done in place, which
    is what lets concurrent workers share one grid without copies.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        L, M, H = cfg.layers, cfg.modules_per_layer, cfg.neurons_per_module
        self.W = [np.empty((M, H, cfg.layer_in_dim(l)), dtype=DTYPE) for l in range(L)]
        self.b = [np.zeros((M, H), dtype=DTYPE) for _ in range(L)]
        self.frozen = np.zeros((L, M), dtype=bool)
        self.heads: dict[str, Head] = {}
        # Most recently frozen path; consulted when cfg.always_active_frozen is set.
        self.frozen_path: np.ndarray | None = None
        self.lock = threading.Lock()  # guards head creation and freezing, not training
        for l in range(L):
            for m in range(M):
                self._init_module(l, m, rng)

    def _init_module(self, l: int, m: int, rng: np.random.Generator) -> None:
        self.W[l][m] = glorot_uniform(self.cfg.neurons_per_module, self.cfg.layer_in_dim(l), rng)
        self.b[l][m] = 0.0

    def add_head(self, task: str, classes: int, rng: np.random.Generator) -> Head:
        """Create (or replace) a freshly initialized readout for ``task``."""
        H = self.cfg.neurons_per_module
        head = Head(glorot_uniform(classes, H, rng), np.zeros(classes, dtype=DTYPE))
        with self.lock:
            self.heads[task] = head
        return head

    def head(self, task: str) -> Head:
        try:
            return self.heads[task]
        except KeyError:
            raise GridStateError(f"no readout head for task {task!r}") from None

    def module(self, l: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.W[l][m], self.b[l][m]

    def copy(self) -> ParameterGrid:
        new = ParameterGrid.__new__(ParameterGrid)
        new.cfg = self.cfg
        new.W = [w.copy() for w in self.W]
        new.b = [b.copy() for b in self.b]
        new.frozen = self.frozen.copy()
        new.heads = {k: Head(h.W.copy(), h.b.copy()) for k, h in self.heads.items()}
        new.frozen_path = None if self.frozen_path is None else self.frozen_path.copy()
        new.lock = threading.Lock()
        return new

    def frozen_count(self) -> int:
        return int(self.frozen.sum())

    def frozen_snapshot(self) -> dict[tuple[int, int], bytes]:
        """Byte images of every frozen module, for invariance checks."""
        return {
            (int(l), int(m)): self.W[l][m].tobytes() + self.b[l][m].tobytes()
            for l, m in zip(*np.nonzero(self.frozen))
        }


@dataclass
class PathActivation:
    task: str
    sets: list[tuple[int, ...]]
    inputs: list[np.ndarray]  # input to each layer (inputs[0] is x)
    pre: list[np.ndarray]  # per layer, pre-activations shaped (batch, modules, neurons)
    hidden: np.ndarray  # summed output of the last layer


def effective_sets(grid: ParameterGrid, g: np.ndarray) -> list[tuple[int, ...]]:
    sets = active_sets(g)
    if grid.cfg.always_active_frozen and grid.frozen_path is not None:
        sets = [tuple(sorted(set(s) | set(active_set(grid.frozen_path, l)))) for l, s in enumerate(sets)]
    return sets


def forward(grid: ParameterGrid, g: np.ndarray, task: str, x: np.ndarray, sets=None):
    """Logits for batch ``x`` through the path ``g``, plus the backward cache.

    ``sets`` may carry a precomputed ``effective_sets(grid, g)``.
    """
    cfg = grid.cfg
    head = grid.head(task)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"input shape {tuple(x.shape)}, expected (batch, {cfg.input_dim})")
    if g.shape[1] != cfg.layers:
        raise DimensionError(f"genotype has {g.shape[1]} layers, grid has {cfg.layers}")
    if sets is None:
        sets = effective_sets(grid, g)
    H = cfg.neurons_per_module
    inputs, pres = [], []
    h = x
    for l, mods in enumerate(sets):
        inputs.append(h)
        idx = list(mods)
        # all active modules of the layer in one product: (batch, in) @ (in, k*H)
        W = grid.W[l][idx].reshape(len(idx) * H, -1)
        z = (h @ W.T + grid.b[l][idx].reshape(-1)).reshape(h.shape[0], len(idx), H)
        pres.append(z)
        h = np.maximum(z, 0.0).sum(axis=1)
    logits = h @ head.W.T + head.b
    return logits, PathActivation(task, sets, inputs, pres, h)


def backward(grid: ParameterGrid, act: PathActivation, dlogits: np.ndarray):
    """Gradients of the loss for the head and every module on the path.

    Returns ``(head_grads, module_grads)`` where ``module_grads`` maps
    ``(layer, module)`` to ``(dW, db)``. Frozen modules are included; the
    caller decides what to apply.
    """
    head = grid.head(act.task)
    dWh, dbh, dh = linear_backward(head.W, act.hidden, dlogits)
    H = grid.cfg.neurons_per_module
    grads = {}
    for l in range(len(act.sets) - 1, -1, -1):
        idx = list(act.sets[l])
        z = act.pre[l]
        n, k = z.shape[0], len(idx)
        dz = (dh[:, None, :] * (z > 0)).reshape(n, k * H)
        dW = (dz.T @ act.inputs[l]).reshape(k, H, -1)
        db = dz.sum(axis=0).reshape(k, H)
        for j, m in enumerate(idx):
            grads[(l, m)] = (dW[j], db[j])
        if l > 0:
            dh = dz @ grid.W[l][idx].reshape(k * H, -1)
    return (dWh, dbh), grads


def backward_and_step(grid: ParameterGrid, g: np.ndarray, task: str, act: PathActivation,
                      dlogits: np.ndarray, lr: float) -> None:
    """Backprop through the path of ``act`` and apply SGD.

    The head and every active, non-frozen module are updated in place. Frozen
    modules pass gradient upstream but keep their parameters. ``act`` must come
    from ``forward`` with the same ``g`` and ``task``.
    """
    (dWh, dbh), grads = backward(grid, act, dlogits)
    if lr == 0.0:
        return
    head = grid.head(task)
    head.W -= lr * dWh
    head.b -= lr * dbh
    frozen = grid.frozen
    for (l, m), (dW, db) in grads.items():
        if frozen[l, m]:
            continue
        grid.W[l][m] -= lr * dW
        grid.b[l][m] -= lr * db


def freeze_path(grid: ParameterGrid, g: np.ndarray) -> None:
    with grid.lock:
        for l, m in path_modules(g):
            grid.frozen[l, m] = True
        grid.frozen_path = np.array(g, copy=True)


def reinit_unfrozen(grid: ParameterGrid, rng: np.random.Generator) -> None:
    for l in range(grid.cfg.layers):
        for m in range(grid.cfg.modules_per_layer):
            if not grid.frozen[l, m]:
                grid._init_module(l, m, rng)


def save_grid(grid: ParameterGrid, path) -> None:
    """Write an ``.npz`` checkpoint that reloads bit-exactly."""
    arrays = {"frozen": grid.frozen}
    for l in range(grid.cfg.layers):
        arrays[f"W{l}"] = grid.W[l]
        arrays[f"b{l}"] = grid.b[l]
    tasks = sorted(grid.heads)
    for i, t in enumerate(tasks):
        arrays[f"head{i}_W"] = grid.heads[t].W
        arrays[f"head{i}_b"] = grid.heads[t].b
    if grid.frozen_path is not None:
        arrays["frozen_path"] = grid.frozen_path
    meta = {"schema": CHECKPOINT_SCHEMA, "config": asdict(grid.cfg), "heads": tasks}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_grid(path) -> ParameterGrid:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(data["meta"].tobytes().decode())
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointFormatError(f"{path}: not a grid checkpoint ({e})") from e
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointFormatError(f"{path}: schema {meta.get('schema')!r}, expected {CHECKPOINT_SCHEMA!r}")
    cfg = NetConfig(**meta["config"])
    grid = ParameterGrid.__new__(ParameterGrid)
    grid.cfg = cfg
    try:
        grid.W = [data[f"W{l}"].astype(DTYPE, copy=True) for l in range(cfg.layers)]
        grid.b = [data[f"b{l}"].astype(DTYPE, copy=True) for l in range(cfg.layers)]
        grid.frozen = data["frozen"].astype(bool, copy=True)
        grid.heads = {
            t: Head(data[f"head{i}_W"].copy(), data[f"head{i}_b"].copy())
            for i, t in enumerate(meta["heads"])
        }
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing array {e}") from e
    grid.frozen_path = data["frozen_path"].copy() if "frozen_path" in data else None
    grid.lock = threading.Lock()
    expect = (cfg.layers, cfg.modules_per_layer)
    if grid.frozen.shape != expect or any(
        w.shape != (cfg.modules_per_layer, cfg.neurons_per_module, cfg.layer_in_dim(l))
        for l, w in enumerate(grid.W)
    ):
        raise CheckpointFormatError(f"{path}: array shapes disagree with stored config")
    return grid


def describe_grid(grid: ParameterGrid) -> dict:
    """Config, per-layer frozen occupancy and head inventory, JSON-ready."""
    return {
        "schema": CHECKPOINT_SCHEMA,
        "config": asdict(grid.cfg),
        "frozen_total": grid.frozen_count(),
        "frozen_per_layer": [
            {"layer": l, "count": int(grid.frozen[l].sum()), "modules": np.flatnonzero(grid.frozen[l]).tolist()}
            for l in range(grid.cfg.layers)
        ],
        "frozen_path": None if grid.frozen_path is None else np.asarray(grid.frozen_path).tolist(),
        "heads": {t: {"classes": int(h.W.shape[0]), "in_dim": int(h.W.shape[1])} for t, h in sorted(grid.heads.items())},
    }


def format_grid_description(d: dict) -> str:
    c = d["config"]
    lines = [f"grid {c['layers']}x{c['modules_per_layer']} modules of {c['neurons_per_module']} units, "
             f"input {c['input_dim']}, <= {c['max_modules_per_layer']} active per layer"
             + (", frozen path always active" if c["always_active_frozen"] else ""),
             f"frozen modules: {d['frozen_total']}"]
    for row in d["frozen_per_layer"]:
        lines.append(f"  layer {row['layer']}: {row['count']}/{c['modules_per_layer']} frozen {row['modules']}")
    lines.append(f"heads: {len(d['heads'])}")
    for t, h in d["heads"].items():
        lines.append(f"  {t}: {h['classes']} classes")
    return "\n".join(lines)
