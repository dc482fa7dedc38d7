"""Benchmark harness: success rate, essential-state achievement rate, fallback rate."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .agent import RunConfig, TaskResult, run_task
from .backends.base import Backend
from .errors import AppMismatch, EmptyInput, SuiteMismatch
from .graph import KnowledgeGraph
from .simenv.session import reset
from .simenv.spec import AppSpec, TaskSpec


@dataclass
class BenchConfig:
    max_steps: int = 30
    k: int = 5
    seed: int = 0
    workers: int = 1
    trace_path: str | Path | None = None


@dataclass
class TaskRow:
    task_id: str
    app_id: str
    success: bool
    steps: int
    fallback_steps: int
    achieved_essential: int
    total_essential: int
    stop_reason: str
    error: str | None = None


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


@dataclass
class BenchReport:
    rows: list[TaskRow]
    success_rate: float
    esar: float
    fallback_rate: float
    wall_time_s: float
    graph_stats: dict[str, dict[str, Any]] = field(default_factory=dict)
    label: str = ""
    # full per-task results; kept in memory only
    results: list[TaskResult] = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def from_rows(cls, rows: Sequence[TaskRow], wall_time_s: float = 0.0, **kwargs) -> BenchReport:
        if not rows:
            raise EmptyInput("a benchmark needs at least one task")
        rows = sorted(rows, key=lambda r: r.task_id)
        steps = sum(r.steps for r in rows)
        return cls(
            rows=list(rows),
            success_rate=_pct(sum(r.success for r in rows), len(rows)),
            esar=_pct(sum(r.achieved_essential for r in rows), sum(r.total_essential for r in rows)),
            fallback_rate=_pct(sum(r.fallback_steps for r in rows), steps),
            wall_time_s=wall_time_s,
            **kwargs,
        )

    def task_ids(self) -> list[str]:
        return [r.task_id for r in self.rows]

    def check_consistency(self) -> None:
        """Aggregates must equal a recomputation from the rows."""
        again = BenchReport.from_rows(self.rows)
        for name in ("success_rate", "esar", "fallback_rate"):
            if abs(getattr(again, name) - getattr(self, name)) > 1e-9:
                raise ValueError(f"{name} disagrees with its rows")

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "success_rate": self.success_rate,
            "esar": self.esar,
            "fallback_rate": self.fallback_rate,
            "wall_time_s": self.wall_time_s,
            "graph_stats": self.graph_stats,
            "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchReport:
        report = cls.from_rows([TaskRow(**r) for r in data["rows"]], data.get("wall_time_s", 0.0),
                               graph_stats=data.get("graph_stats", {}), label=data.get("label", ""))
        return report


def _row(task: TaskSpec, result: TaskResult) -> TaskRow:
    return TaskRow(
        task_id=task.task_id,
        app_id=task.app_id,
        success=result.success,
        steps=result.steps,
        fallback_steps=result.fallback_steps,
        achieved_essential=result.progress.achieved_count,
        total_essential=result.progress.total_essential,
        stop_reason=result.stop_reason,
        error=result.error,
    )


def _run_one(task: TaskSpec, app: AppSpec, graph: KnowledgeGraph, backend: Backend,
             config: BenchConfig) -> tuple[TaskRow, TaskResult | None]:
    try:
        session, _ = reset(app, config.seed)
        result = run_task(task, graph, session, backend,
                          RunConfig(max_steps=config.max_steps, k=config.k, trace_path=config.trace_path))
        return _row(task, result), result
    except Exception as exc:  # one broken task must not sink the suite
        return TaskRow(task.task_id, task.app_id, False, 0, 0, 0, len(task.essential_states),
                       "error", f"{type(exc).__name__}: {exc}"), None


def bench_suite(entries: Sequence[tuple[AppSpec, KnowledgeGraph, Sequence[TaskSpec]]], backend: Backend,
                config: BenchConfig | None = None, label: str = "") -> BenchReport:
    """Run every task with a fresh session; ``entries`` pairs each app with its graph and tasks."""
    config = config or BenchConfig()
    jobs = []
    for app, graph, tasks in entries:
        for task in tasks:
            if task.app_id != app.app_id:
                raise AppMismatch(f"task {task.task_id} targets {task.app_id}, not {app.app_id}")
            jobs.append((task, app, graph))
    start = time.perf_counter()
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(lambda job: _run_one(*job, backend, config), jobs))
    else:
        outcomes = [_run_one(*job, backend, config) for job in jobs]
    elapsed = time.perf_counter() - start
    stats = {app.app_id: asdict(graph.stats()) for app, graph, _ in entries}
    report = BenchReport.from_rows([row for row, _ in outcomes], elapsed, graph_stats=stats, label=label)
    report.results = sorted((r for _, r in outcomes if r is not None), key=lambda r: r.task_id)
    return report


def bench(graph: KnowledgeGraph, app: AppSpec, tasks: Sequence[TaskSpec], backend: Backend,
          config: BenchConfig | None = None, label: str = "") -> BenchReport:
    return bench_suite([(app, graph, tasks)], backend, config, label)


@dataclass
class DeltaReport:
    success_rate: float
    esar: float
    fallback_rate: float
    per_task: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def compare(guided: BenchReport, baseline: BenchReport) -> DeltaReport:
    """Per-metric guided minus baseline, in percentage points."""
    if guided.task_ids() != baseline.task_ids():
        raise SuiteMismatch("reports cover different task suites")
    per_task = []
    for g, b in zip(guided.rows, baseline.rows):
        per_task.append({
            "task_id": g.task_id,
            "success": int(g.success) - int(b.success),
            "achieved_essential": g.achieved_essential - b.achieved_essential,
            "fallback_steps": g.fallback_steps - b.fallback_steps,
        })
    return DeltaReport(
        success_rate=guided.success_rate - baseline.success_rate,
        esar=guided.esar - baseline.esar,
        fallback_rate=guided.fallback_rate - baseline.fallback_rate,
        per_task=per_task,
    )


def write_csv(report: BenchReport, path: str | Path) -> None:
    names = list(TaskRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(asdict(row))
