"""Aggregate run summaries into per-arm statistics, speedup ratios and overlap scatter data."""

from __future__ import annotations

import csv
import glob
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .experiment import ARMS, SUMMARY_SCHEMA
from .numerics import rng_stream

REPORT_SCHEMA = "pathnet.report/1"
CONTROL_ARMS = ("independent", "finetune")
OTHER_SCHEMAS = ("pathnet.report/", "pathnet.sweep/")


class SchemaError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class RunSummary:
    arm: str
    seed: int
    task_a: str
    task_b: str
    gens_task_a: int
    gens_task_b: int
    converged: bool
    overlap: Optional[int]
    path: str = ""

    @property
    def total(self) -> int:
        return self.gens_task_a + self.gens_task_b

    @property
    def key(self) -> tuple:
        return self.seed, self.task_a, self.task_b


def parse_summary(doc: dict, path: str = "") -> RunSummary:
    if doc.get("schema") != SUMMARY_SCHEMA:
        raise SchemaError(f"{path or 'summary'}: schema {doc.get('schema')!r}, expected {SUMMARY_SCHEMA!r}")
    plan = doc["plan"]
    return RunSummary(
        arm=plan["arm"], seed=int(plan["seed"]), task_a=plan["task_a"], task_b=plan["task_b"],
        gens_task_a=int(doc["gens_task_a"]), gens_task_b=int(doc["gens_task_b"]),
        converged=bool(doc["converged_a"] and doc["converged_b"]), overlap=doc.get("overlap"), path=path,
    )


def load_summaries(summary_dir) -> list[RunSummary]:
    paths = sorted(glob.glob(os.path.join(os.fspath(summary_dir), "*.json")))
    runs = []
    for p in paths:
        with open(p) as f:
            doc = json.load(f)
        if str(doc.get("schema", "")).startswith(OTHER_SCHEMAS):
            continue  # stats output or sweep metadata living next to the summaries
        runs.append(parse_summary(doc, p))
    if not runs:
        raise EmptyInputError(f"no run summaries in {summary_dir}")
    return runs


def bootstrap_ci(values, level: float = 0.95, resamples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    v = np.asarray(values, dtype=float)
    if v.size == 1:
        return float(v[0]), float(v[0])
    idx = rng_stream(seed).integers(0, v.size, size=(resamples, v.size))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def arm_stats(runs: list[RunSummary]) -> dict:
    """Per-arm statistics of total generations over converged runs; unconverged runs are only counted."""
    out = {}
    for arm in ARMS:
        mine = [r for r in runs if r.arm == arm]
        if not mine:
            continue
        totals = [r.total for r in mine if r.converged]
        entry = {"runs": len(mine), "converged": len(totals), "unconverged": len(mine) - len(totals)}
        if totals:
            lo, hi = bootstrap_ci(totals)
            entry.update(mean=float(np.mean(totals)), median=float(np.median(totals)), ci95=[lo, hi],
                         mean_task_a=float(np.mean([r.gens_task_a for r in mine if r.converged])),
                         mean_task_b=float(np.mean([r.gens_task_b for r in mine if r.converged])))
        out[arm] = entry
    return out


def paired_ratios(runs: list[RunSummary], control: str) -> list[tuple[RunSummary, float]]:
    """``(pathnet_run, control.total / pathnet.total)`` for runs sharing seed and task pair, both converged."""
    ctrl = {r.key: r for r in runs if r.arm == control and r.converged}
    return [(r, ctrl[r.key].total / r.total) for r in runs if r.arm == "pathnet" and r.converged and r.key in ctrl]


def pearson_r(x, y) -> Optional[float]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def speedups(runs: list[RunSummary], stats: Optional[dict] = None) -> dict:
    """Both speedup statistics against each control arm: ratio of means and mean of paired ratios."""
    stats = stats or arm_stats(runs)
    out = {}
    for control in CONTROL_ARMS:
        pairs = paired_ratios(runs, control)
        ratio_of_means = None
        if "mean" in stats.get(control, {}) and "mean" in stats.get("pathnet", {}):
            ratio_of_means = stats[control]["mean"] / stats["pathnet"]["mean"]
        out[control] = {
            "ratio_of_means": ratio_of_means,
            "mean_paired_ratio": float(np.mean([s for _, s in pairs])) if pairs else None,
            "pairs": len(pairs),
        }
    return out


def scatter_rows(runs: list[RunSummary], control: str = "independent") -> list[dict]:
    """One row per PathNet run: overlap count and paired speedup (blank when unavailable)."""
    ratio = {r.path: s for r, s in paired_ratios(runs, control)}
    rows = []
    for r in sorted((r for r in runs if r.arm == "pathnet"), key=lambda r: r.key):
        rows.append({"seed": r.seed, "task_a": r.task_a, "task_b": r.task_b, "overlap": r.overlap,
                     "speedup": ratio.get(r.path), "converged": r.converged, "total": r.total})
    return rows


def build_report(runs: list[RunSummary]) -> dict:
    if not runs:
        raise EmptyInputError("no run summaries")
    stats = arm_stats(runs)
    rows = scatter_rows(runs)
    usable = [row for row in rows if row["speedup"] is not None and row["overlap"] is not None]
    return {
        "schema": REPORT_SCHEMA,
        "arms": stats,
        "speedup": speedups(runs, stats),
        "ordering_pathnet_lt_independent_lt_finetune": _ordering(stats),
        "overlap_speedup": {
            "rows": len(rows),
            "paired": len(usable),
            "pearson_r": pearson_r([r["overlap"] for r in usable], [r["speedup"] for r in usable]),
        },
        "scatter": rows,
    }


def _ordering(stats: dict) -> Optional[bool]:
    try:
        p, i, f = (stats[a]["mean"] for a in ("pathnet", "independent", "finetune"))
    except KeyError:
        return None
    return p < i < f


def write_report(report: dict, out_dir) -> tuple[str, str]:
    """Write ``stats.json`` and the tidy ``overlap_speedup.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    jp, cp = os.path.join(out_dir, "stats.json"), os.path.join(out_dir, "overlap_speedup.csv")
    with open(jp, "w") as f:
        json.dump(report, f, indent=2)
    fields = ["seed", "task_a", "task_b", "overlap", "speedup", "converged", "total"]
    with open(cp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in report["scatter"]:
            w.writerow({k: "" if row[k] is None else row[k] for k in fields})
    return jp, cp


def format_report(report: dict) -> str:
    lines = [f"{'arm':<12} {'runs':>5} {'conv':>5} {'mean':>8} {'median':>8}  ci95"]
    for arm, s in report["arms"].items():
        if "mean" in s:
            lines.append(f"{arm:<12} {s['runs']:>5} {s['converged']:>5} {s['mean']:>8.1f} {s['median']:>8.1f}"
                         f"  [{s['ci95'][0]:.1f}, {s['ci95'][1]:.1f}]")
        else:
            lines.append(f"{arm:<12} {s['runs']:>5} {s['converged']:>5} {'-':>8} {'-':>8}  -")
    fmt = lambda v: "-" if v is None else f"{v:.3f}"  # noqa: E731
    for control, sp in report["speedup"].items():
        lines.append(f"speedup vs {control}: ratio of means {fmt(sp['ratio_of_means'])}, "
                     f"mean paired ratio {fmt(sp['mean_paired_ratio'])} ({sp['pairs']} pairs)")
    ov = report["overlap_speedup"]
    lines.append(f"overlap vs speedup: {ov['paired']}/{ov['rows']} paired runs, pearson r {fmt(ov['pearson_r'])}")
    return "\n".join(lines)
