"""Run configuration: a TOML file plus ``section.key=value`` overrides, validated before any compute."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .evolution import EvolutionParams
from .experiment import ARMS, ENGINES, ExperimentPlan
from .network import NetConfig
from .tasks import DATA_DIR_ENV, NOISE_MODES, SYNTHETIC_KINDS, TaskSpec, find_mnist, load_idx, make_binary_task, \
    make_synthetic

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASK_KINDS = ("mnist",) + SYNTHETIC_KINDS


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class TaskConfig:
    kind: str = "mnist"
    digits: Optional[list] = None  # mnist: [a, b]
    noise_prob: float = 0.5
    noise_mode: str = "per_emission"
    dim: Optional[int] = None  # synthetic input dimension
    k: int = 2  # parity width
    stop_threshold: float = 0.998
    id: Optional[str] = None


@dataclass
class RunConfig:
    arm: str = "pathnet"
    engine: str = "serial"
    seed: int = 0
    replicas: int = 1
    budget: int = 500
    out_dir: str = "results"
    data_dir: Optional[str] = None
    workers: Optional[int] = None  # async engine: must equal evo.population
    checkpoint: bool = False
    reuse_on_task_b: bool = True
    task_a: TaskConfig = field(default_factory=lambda: TaskConfig(digits=[3, 7]))
    task_b: Optional[TaskConfig] = None  # None: same task as A (self-transfer)
    net: dict = field(default_factory=dict)
    evo: dict = field(default_factory=dict)

    def net_config(self) -> NetConfig:
        return _build(NetConfig, self.net, "net")

    def evo_params(self) -> EvolutionParams:
        return _build(EvolutionParams, self.evo, "evo")


_SECTIONS = {"task_a": TaskConfig, "task_b": TaskConfig, "net": NetConfig, "evo": EvolutionParams}


def _build(cls, values: dict, where: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(where, str(e)) from e


def _check_keys(cls, values: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{where}.{k}" if where else k, f"unknown key (expected one of {sorted(known)})")


def _base_type(ann: str) -> tuple[str, bool]:
    """``"Optional[int]"`` -> ``("int", True)``; ``"str | None"`` -> ``("str", True)``."""
    ann = str(ann).replace(" ", "")
    if ann.startswith("Optional[") and ann.endswith("]"):
        return ann[9:-1], True
    if ann.endswith("|None"):
        return ann[:-5], True
    return ann, False


def _check_types(cls, values: dict, where: str) -> None:
    for f in fields(cls):
        if f.name not in values or f.name in _SECTIONS:
            continue
        v, path = values[f.name], f"{where}.{f.name}" if where else f.name
        base, optional = _base_type(f.type)
        if v is None:
            if not optional:
                raise ConfigError(path, "may not be empty")
            continue
        ok = {
            "bool": lambda: isinstance(v, bool),
            "int": lambda: isinstance(v, int) and not isinstance(v, bool),
            "float": lambda: isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": lambda: isinstance(v, str),
            "list": lambda: isinstance(v, list),
        }.get(base, lambda: True)()
        if not ok:
            raise ConfigError(path, f"expected {base}, got {v!r}")


def config_from_dict(doc: dict) -> RunConfig:
    """Validate a nested mapping (as parsed from TOML) into a ``RunConfig``."""
    _check_keys(RunConfig, doc, "")
    top = {k: v for k, v in doc.items() if k not in _SECTIONS}
    _check_types(RunConfig, top, "")
    sections = {}
    for name, cls in _SECTIONS.items():
        if name not in doc:
            continue
        sec = doc[name]
        if not isinstance(sec, dict):
            raise ConfigError(name, "expected a table")
        _check_keys(cls, sec, name)
        _check_types(cls, sec, name)
        sections[name] = dict(sec)
    for name in ("task_a", "task_b"):
        if name in sections:
            sections[name] = TaskConfig(**sections[name])
    cfg = RunConfig(**top, **sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.arm not in ARMS:
        raise ConfigError("arm", f"must be one of {ARMS}, got {cfg.arm!r}")
    if cfg.engine not in ENGINES:
        raise ConfigError("engine", f"must be one of {ENGINES}, got {cfg.engine!r}")
    if cfg.replicas < 1:
        raise ConfigError("replicas", "must be >= 1")
    if cfg.budget < 1:
        raise ConfigError("budget", "must be >= 1")
    for name in ("task_a", "task_b"):
        t = getattr(cfg, name)
        if t is None:
            continue
        if t.kind not in TASK_KINDS:
            raise ConfigError(f"{name}.kind", f"must be one of {TASK_KINDS}, got {t.kind!r}")
        if t.kind == "mnist":
            if not isinstance(t.digits, list) or len(t.digits) != 2 or len(set(t.digits)) != 2 \
                    or not all(isinstance(d, int) and 0 <= d <= 9 for d in t.digits):
                raise ConfigError(f"{name}.digits", f"need two distinct digits in 0..9, got {t.digits!r}")
            if t.noise_mode not in NOISE_MODES:
                raise ConfigError(f"{name}.noise_mode", f"must be one of {NOISE_MODES}")
            if not 0.0 <= t.noise_prob <= 1.0:
                raise ConfigError(f"{name}.noise_prob", "must lie in [0, 1]")
        elif t.dim is None or t.dim < 2:
            raise ConfigError(f"{name}.dim", "synthetic tasks need dim >= 2")
    net = cfg.net_config() if "input_dim" in cfg.net else None
    dims = {_input_dim(t) for t in (cfg.task_a, cfg.task_b) if t is not None}
    if len(dims) > 1:
        raise ConfigError("task_b", "both tasks must share one input dimension")
    if net is not None and net.input_dim not in dims:
        raise ConfigError("net.input_dim", f"{net.input_dim} disagrees with the task input dimension {dims.pop()}")
    evo = cfg.evo_params()
    if cfg.workers is not None:
        if cfg.engine != "async":
            raise ConfigError("workers", "only meaningful with engine = 'async'")
        if cfg.workers != evo.population:
            raise ConfigError("workers", f"the async engine runs one worker per slot; set evo.population = {cfg.workers}")
    _ = _resolved_net(cfg)


def _input_dim(t: TaskConfig) -> int:
    return 784 if t.kind == "mnist" else int(t.dim)


def _resolved_net(cfg: RunConfig) -> NetConfig:
    values = dict(cfg.net)
    values.setdefault("input_dim", _input_dim(cfg.task_a))
    return _build(NetConfig, values, "net")


def parse_value(text: str) -> Any:
    """TOML scalar or array if it parses as one, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``a.b=value`` to a nested mapping in place."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value or section.key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) > 2 or not all(parts):
        raise ConfigError(key, "override keys have at most one section")
    target = doc
    if len(parts) == 2:
        if parts[0] not in _SECTIONS:
            raise ConfigError(parts[0], f"unknown section (expected one of {sorted(_SECTIONS)})")
        target = doc.setdefault(parts[0], {})
    target[parts[-1]] = parse_value(text.strip())


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None, assignments=()) -> RunConfig:
    """Read ``path`` (TOML), then apply ``overrides`` (top-level) and ``assignments``; later wins."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e.strerror}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("config", f"{path}: {e}") from e
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    for a in assignments:
        apply_override(doc, a)
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: v for k, v in d.items() if v is not None}


def data_dir(cfg: RunConfig, explicit: Optional[str] = None) -> str:
    """Data directory: ``explicit`` (a flag), then ``$PATHNET_DATA_DIR``, then the config value."""
    return explicit or os.environ.get(DATA_DIR_ENV) or cfg.data_dir or "data/mnist"


def build_task(t: TaskConfig, seed: int, mnist=None) -> TaskSpec:
    if t.kind == "mnist":
        images, labels = mnist
        return make_binary_task(t.digits, images, labels, noise_prob=t.noise_prob, seed=seed, task_id=t.id,
                                stop_threshold=t.stop_threshold, noise_mode=t.noise_mode)
    return make_synthetic(t.kind, t.dim, seed=seed, k=t.k, task_id=t.id, stop_threshold=t.stop_threshold)


def build_plans(cfg: RunConfig, data_override: Optional[str] = None) -> list[ExperimentPlan]:
    """One plan per replica, seeds ``seed .. seed + replicas - 1``. Loads MNIST when a task needs it."""
    tasks = [cfg.task_a, cfg.task_b or cfg.task_a]
    mnist = None
    if any(t.kind == "mnist" for t in tasks):
        mnist = load_idx(*find_mnist(data_dir(cfg, data_override)))
    net, evo = _resolved_net(cfg), cfg.evo_params()
    plans = []
    for r in range(cfg.replicas):
        seed = cfg.seed + r
        ta, tb = (build_task(t, seed, mnist) for t in tasks)
        plans.append(ExperimentPlan(cfg.arm, ta, tb, net, evo, cfg.engine, seed, cfg.budget, cfg.reuse_on_task_b))
    return plans
