"""Metrics and the comparison harness.

Metrics are pure functions of episode traces. ``compare`` runs each
algorithm on a dataset, writes every trace to disk, and derives all tables
from those traces, so re-aggregating the trace files reproduces the tables
exactly. Wall times live in a separate table because they are the only
non-deterministic quantity.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .baselines import ALGO_TWO_STEP, two_step_trace
from .core import NopInstance, read_instances
from .env import SUCCESS, EpisodeTrace, read_traces, write_traces

ALGO_NAVIFORMER = "naviformer"
WORKERS_ENV = "NAVIFORMER_WORKERS"

METRIC_COLUMNS = ("algorithm", "episodes", "success_rate", "success_se", "node_rate", "node_se")
TIMING_COLUMNS = ("algorithm", "episodes", "mean_wall_time_s", "total_wall_time_s")
BREAKDOWN_COLUMNS = ("algorithm", "num_obstacles") + METRIC_COLUMNS[1:]


class EmptyTraceSetError(ValueError):
    pass


class TraceSchemaError(ValueError):
    pass


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def success_rate(traces: Sequence[EpisodeTrace]) -> tuple[float, float]:
    """Fraction of successful episodes and its binomial standard error."""
    m = len(traces)
    if m == 0:
        raise EmptyTraceSetError("success_rate() needs at least one trace")
    p = sum(1 for t in traces if t.outcome == SUCCESS) / m
    return p, math.sqrt(p * (1.0 - p) / m)


def node_rate(traces: Sequence[EpisodeTrace],
              instances: Sequence[NopInstance] | None = None) -> tuple[float, float]:
    """Mean of (interior nodes visited) / (n / 2), with its standard error."""
    m = len(traces)
    if m == 0:
        raise EmptyTraceSetError("node_rate() needs at least one trace")
    if instances is not None:
        if len(instances) != m:
            raise ValueError(f"{m} traces but {len(instances)} instances")
        for t, inst in zip(traces, instances):
            if t.n != inst.n:
                raise ValueError(f"trace for n={t.n} paired with an instance of n={inst.n}")
    vals = [t.interior_visited() / (t.n / 2) if t.n else 0.0 for t in traces]
    mu = sum(vals) / m
    if m < 2:
        return mu, 0.0
    var = sum((v - mu) ** 2 for v in vals) / (m - 1)
    return mu, math.sqrt(var / m)


@dataclass
class MetricsRow:
    algorithm: str
    episodes: int
    success_rate: float
    success_se: float
    node_rate: float
    node_se: float
    mean_wall_time_s: float = float("nan")

    def metric_values(self) -> list:
        return [self.algorithm, self.episodes, self.success_rate, self.success_se,
                self.node_rate, self.node_se]


def metrics_row(algorithm: str, traces: Sequence[EpisodeTrace]) -> MetricsRow:
    s, s_se = success_rate(traces)
    nr, nr_se = node_rate(traces)
    wall = sum(t.wall_time_s for t in traces) / len(traces)
    return MetricsRow(algorithm, len(traces), s, s_se, nr, nr_se, wall)


def breakdown_by_obstacles(algorithm: str, traces: Sequence[EpisodeTrace]) -> list[tuple[int, MetricsRow]]:
    groups: dict[int, list[EpisodeTrace]] = {}
    for t in traces:
        groups.setdefault(t.num_obstacles, []).append(t)
    return [(k, metrics_row(algorithm, groups[k])) for k in sorted(groups)]


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------

@dataclass
class AlgorithmSpec:
    """``kind`` is ``naviformer`` (arg: checkpoint), ``two-step-greedy-astar``
    (optional arg: eps) or ``traces`` (arg: trace file from an external planner)."""
    name: str
    kind: str
    arg: str | None = None

    @classmethod
    def parse(cls, text: str) -> "AlgorithmSpec":
        kind, _, arg = text.partition("=")
        arg = arg or None
        if kind == ALGO_NAVIFORMER:
            if arg is None:
                raise ValueError("naviformer needs a checkpoint: naviformer=PATH")
            return cls(ALGO_NAVIFORMER, kind, arg)
        if kind == ALGO_TWO_STEP:
            return cls(ALGO_TWO_STEP, kind, arg)
        if kind == "traces":
            if arg is None:
                raise ValueError("traces needs a file: traces=PATH")
            return cls(Path(arg).stem, kind, arg)
        raise ValueError(f"unknown algorithm {kind!r}")


def _two_step_job(args) -> EpisodeTrace:
    inst, i, eps = args
    return two_step_trace(inst, i, eps)


def run_two_step(instances: Sequence[NopInstance], eps: float = 0.3,
                 workers: int | None = None) -> list[EpisodeTrace]:
    workers = worker_count() if workers is None else workers
    jobs = [(inst, i, eps) for i, inst in enumerate(instances)]
    if workers <= 1:
        return [_two_step_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_two_step_job, jobs, chunksize=8))


def run_naviformer(model, instances: Sequence[NopInstance], seed: int = 0) -> list[EpisodeTrace]:
    """Greedy decoding, one instance at a time so each gets its own wall time."""
    from .train import evaluate
    traces = evaluate(model, instances, "greedy", seed, per_instance_timing=True)
    for t, inst in zip(traces, instances):
        t.num_obstacles = len(inst.obstacles)
    return traces


def load_external(path, instances: Sequence[NopInstance]) -> list[EpisodeTrace]:
    try:
        traces = read_traces(path)
    except (KeyError, ValueError) as exc:
        raise TraceSchemaError(f"{path}: {exc}") from exc
    if len(traces) != len(instances):
        raise TraceSchemaError(f"{path}: {len(traces)} traces for {len(instances)} instances")
    for i, (t, inst) in enumerate(zip(traces, instances)):
        if t.n != inst.n:
            raise TraceSchemaError(f"{path}: trace {i} has n={t.n}, instance has n={inst.n}")
    return traces


def run_algorithm(spec: AlgorithmSpec, instances: Sequence[NopInstance], seed: int = 0,
                  workers: int | None = None) -> list[EpisodeTrace]:
    if spec.kind == ALGO_NAVIFORMER:
        from .model import load_checkpoint
        path = Path(spec.arg)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model, _ = load_checkpoint(path)
        traces = run_naviformer(model, instances, seed)
    elif spec.kind == ALGO_TWO_STEP:
        eps = 0.3 if spec.arg is None else float(spec.arg)
        traces = run_two_step(instances, eps, workers)
    elif spec.kind == "traces":
        traces = load_external(spec.arg, instances)
    else:
        raise ValueError(f"unknown algorithm kind {spec.kind!r}")
    for t in traces:
        t.algorithm = spec.name
    return traces


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


@dataclass
class ComparisonResult:
    rows: list[MetricsRow]
    breakdown: list[tuple[int, MetricsRow]]
    files: dict[str, str]


def tables_from_traces(named: Sequence[tuple[str, Sequence[EpisodeTrace]]]):
    rows = [metrics_row(name, tr) for name, tr in named]
    breakdown = [item for name, tr in named for item in breakdown_by_obstacles(name, tr)]
    return rows, breakdown


def write_tables(out: Path, rows: Sequence[MetricsRow], breakdown) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "comparison": out / "comparison.csv",
        "breakdown": out / "breakdown_by_obstacles.csv",
        "timing": out / "timing.csv",
    }
    _write_csv(files["comparison"], METRIC_COLUMNS, [r.metric_values() for r in rows])
    _write_csv(files["breakdown"], BREAKDOWN_COLUMNS,
               [[r.algorithm, k] + r.metric_values()[1:] for k, r in breakdown])
    _write_csv(files["timing"], TIMING_COLUMNS,
               [[r.algorithm, r.episodes, r.mean_wall_time_s, r.mean_wall_time_s * r.episodes]
                for r in rows])
    return {k: str(v) for k, v in files.items()}


def plot_breakdown(out: Path, breakdown) -> dict[str, str]:
    """Vector plots of success and node rate against obstacle count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    series: dict[str, list[tuple[int, MetricsRow]]] = {}
    for k, r in breakdown:
        series.setdefault(r.algorithm, []).append((k, r))
    for metric, se_name, label in (("success_rate", "success_se", "success rate"),
                                   ("node_rate", "node_se", "node rate")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, pts in series.items():
            xs = [k for k, _ in pts]
            ys = [getattr(r, metric) for _, r in pts]
            es = [getattr(r, se_name) for _, r in pts]
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=name)
        ax.set_xlabel("obstacles")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out / f"{metric}_vs_obstacles.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        files[metric + "_plot"] = str(path)
    return files


def _unique_names(specs: Sequence[AlgorithmSpec]) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for s in specs:
        seen[s.name] = seen.get(s.name, 0) + 1
        names.append(s.name if seen[s.name] == 1 else f"{s.name}#{seen[s.name]}")
    return names


def compare(specs: Sequence[AlgorithmSpec], instances: Sequence[NopInstance], out_dir,
            seed: int = 0, plots: bool = True, workers: int | None = None) -> ComparisonResult:
    if not instances:
        raise EmptyTraceSetError("compare() needs at least one instance")
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    named = []
    files: dict[str, str] = {}
    for spec, name in zip(specs, _unique_names(specs)):
        traces = run_algorithm(spec, instances, seed, workers)
        for t in traces:
            t.algorithm = name
        tpath = out / "traces" / f"{name.replace('#', '_')}.jsonl"
        write_traces(tpath, traces)
        files[f"traces:{name}"] = str(tpath)
        named.append((name, traces))
    rows, breakdown = tables_from_traces(named)
    files.update(write_tables(out, rows, breakdown))
    if plots:
        files.update(plot_breakdown(out, breakdown))
    return ComparisonResult(rows, breakdown, files)


def compare_files(specs: Sequence[AlgorithmSpec], dataset, out_dir, seed: int = 0,
                  plots: bool = True) -> ComparisonResult:
    return compare(specs, read_instances(dataset), out_dir, seed, plots)


def recompute_from_traces(trace_files: Sequence) -> tuple[list[MetricsRow], list]:
    """Rebuild the tables from exported trace files alone."""
    named = []
    for path in trace_files:
        traces = read_traces(path)
        if not traces:
            raise EmptyTraceSetError(f"{path} holds no traces")
        named.append((traces[0].algorithm, traces))
    return tables_from_traces(named)

