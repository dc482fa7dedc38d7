"""Command-line entry point: ``kobe <subcommand>``.

Exit codes: 0 success, 1 task failure (run-task), 2 usage, config or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .agent import RunConfig, run_task
from .auditor import audit
from .bench import BenchConfig, BenchReport, bench_suite, compare, write_csv
from .config import ConfigError, Settings, load_settings, make_backend
from .errors import GraphError, KobeError, SpecValidationError
from .explorer import ExplorationConfig, explore
from .graph import KnowledgeGraph, load, save
from .report import export_dot, plot_bench, plot_stats, report_stats
from .simenv import SAMPLE_APPS, sample_app_path, sample_tasks_path
from .simenv.session import reset
from .simenv.spec import load_app, load_tasks, validate_task

logger = logging.getLogger("kobe")

EXIT_OK, EXIT_TASK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _app_path(value: str) -> Path:
    """A spec path, or the name of a bundled sample app."""
    if value in SAMPLE_APPS and not Path(value).exists():
        return Path(str(sample_app_path(value)))
    return Path(value)


def _tasks_path(value: str) -> Path:
    if value in SAMPLE_APPS and not Path(value).exists():
        return Path(str(sample_tasks_path(value)))
    return Path(value)


def _write_json(path: str | Path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _settings(args) -> Settings:
    return load_settings(args.config, backend=args.backend, seed=args.seed, trace=args.trace)


def _oracle_apps(settings: Settings, apps, app_id: str | None = None):
    uses_oracle = settings.backend == "oracle" or "oracle" in settings.overrides.values()
    if apps or not uses_oracle:
        return apps
    if app_id in SAMPLE_APPS:
        return [load_app(sample_app_path(app_id))]
    raise UsageError("the oracle backend needs --app to know the simulated app")


# -- subcommands -----------------------------------------------------------

def cmd_explore(args) -> int:
    settings = _settings(args)
    app = load_app(_app_path(args.app))
    backend = make_backend(settings, [app], settings.trace)
    out = Path(args.out)
    if args.resume and out.exists():
        graph = load(out)
        if graph.app_id != app.app_id:
            raise UsageError(f"{out} holds a graph of {graph.app_id}, not {app.app_id}")
    else:
        graph = KnowledgeGraph(app_id=app.app_id)
    options = dict(settings.explore)
    if args.threshold is not None:
        options["similarity_threshold"] = args.threshold
    if args.interval is not None:
        options["reexplore_interval"] = args.interval
    config = ExplorationConfig(step_budget=args.budget, save_path=out, seed=settings.seed,
                               trace_path=args.step_trace, **options)
    session, _ = reset(app, settings.seed)
    graph = explore(session, graph, config, backend)
    save(graph, out)
    stats = graph.stats()
    print(f"explored {app.app_id}: {stats.node_count} nodes, {stats.edge_count} edges, "
          f"{graph.exploration_steps_used} steps -> {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    settings = _settings(args)
    graph = load(args.input)
    apps = [load_app(_app_path(args.app))] if args.app else []
    backend = make_backend(settings, _oracle_apps(settings, apps, graph.app_id), settings.trace)
    audited, report = audit(graph, backend)
    save(audited, args.out)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(f"audited {graph.app_id}: {len(report.merged_pairs)} merged, {len(report.flagged_edges)} flagged, "
          f"{len(report.templated_edges)} templated; {report.before.node_count}->{report.after.node_count} nodes")
    return EXIT_OK


def _pick_task(path: Path, task_id: str | None):
    tasks = load_tasks(path)
    if task_id is None:
        if len(tasks) != 1:
            raise UsageError(f"{path} holds {len(tasks)} tasks; choose one with --task-id")
        return tasks[0]
    for task in tasks:
        if task.task_id == task_id:
            return task
    raise UsageError(f"no task {task_id!r} in {path}")


def cmd_run_task(args) -> int:
    settings = _settings(args)
    app = load_app(_app_path(args.app))
    task = _pick_task(_tasks_path(args.task), args.task_id)
    validate_task(task, app)
    graph = load(args.graph) if args.graph else KnowledgeGraph(app_id=app.app_id)
    backend = make_backend(settings, [app])
    run = dict(settings.run)
    if args.max_steps is not None:
        run["max_steps"] = args.max_steps
    session, _ = reset(app, settings.seed)
    result = run_task(task, graph, session, backend, RunConfig(trace_path=settings.trace, **run))
    summary = result.to_dict()
    summary.pop("logs")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if result.success else EXIT_TASK_FAILED


def cmd_bench(args) -> int:
    settings = _settings(args)
    if not args.app:
        raise UsageError("bench needs at least one --app")
    tasks_args = args.tasks or [None] * len(args.app)
    graph_args = args.graph or [None] * len(args.app)
    if not len(args.app) == len(tasks_args) == len(graph_args):
        raise UsageError("--app, --graph and --tasks must be given the same number of times")
    entries, baseline_entries = [], []
    for app_arg, graph_arg, tasks_arg in zip(args.app, graph_args, tasks_args):
        app = load_app(_app_path(app_arg))
        tasks = load_tasks(_tasks_path(tasks_arg or app_arg))
        for task in tasks:
            validate_task(task, app)
        graph = load(graph_arg) if graph_arg and graph_arg != "-" else KnowledgeGraph(app_id=app.app_id)
        entries.append((app, graph, tasks))
        baseline_entries.append((app, KnowledgeGraph(app_id=app.app_id), tasks))
    backend = make_backend(settings, [e[0] for e in entries], settings.trace)
    options = dict(settings.bench)
    if args.workers is not None:
        options["workers"] = args.workers
    config = BenchConfig(seed=settings.seed, **{**{k: v for k, v in settings.run.items() if k in ("max_steps", "k")},
                                                 **options})
    report = bench_suite(entries, backend, config, label="graph-guided")
    report.check_consistency()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    write_csv(report, out / "report.csv")
    reports = [report]
    if args.baseline:
        base = bench_suite(baseline_entries, backend, config, label="empty-graph baseline")
        _write_json(out / "baseline.json", base.to_dict())
        write_csv(base, out / "baseline.csv")
        _write_json(out / "delta.json", compare(report, base).to_dict())
        reports.append(base)
    plot_bench(reports, out / "bench.png")
    for r in reports:
        print(f"{r.label}: SR {r.success_rate:.1f}  ESAR {r.esar:.1f}  fallback {r.fallback_rate:.1f}  "
              f"({len(r.rows)} tasks, {r.wall_time_s:.2f}s)")
    return EXIT_OK


def cmd_compare(args) -> int:
    guided = BenchReport.from_dict(json.loads(Path(args.guided).read_text()))
    baseline = BenchReport.from_dict(json.loads(Path(args.baseline).read_text()))
    delta = compare(guided, baseline)
    if args.out:
        _write_json(args.out, delta.to_dict())
    if args.figure:
        guided.label = guided.label or "guided"
        baseline.label = baseline.label or "baseline"
        plot_bench([guided, baseline], args.figure)
    print("metric,guided,baseline,delta")
    for name, attr in (("SR", "success_rate"), ("ESAR", "esar"), ("fallback_rate", "fallback_rate")):
        print(f"{name},{getattr(guided, attr):.1f},{getattr(baseline, attr):.1f},{getattr(delta, attr):+.1f}")
    return EXIT_OK


def cmd_export(args) -> int:
    dot = export_dot(load(args.graph))
    if args.out:
        Path(args.out).write_text(dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def cmd_stats(args) -> int:
    graphs = [load(p) for p in args.graph]
    pre = [load(p) for p in args.pre] if args.pre else None
    table = report_stats(graphs, pre)
    print(table.render())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "stats.json", table.to_dict())
        with open(out / "stats.csv", "w") as fh:
            fh.write(",".join(["Statistic", *table.columns]) + "\n")
            for label, values in table.rows:
                fh.write(",".join([label, *(f"{v:g}" for v in values)]) + "\n")
        plot_stats(table, out / "stats.png")
    return EXIT_OK


def cmd_simenv_validate(args) -> int:
    app = load_app(_app_path(args.spec))
    count = 0
    if args.tasks:
        for task in load_tasks(_tasks_path(args.tasks)):
            validate_task(task, app)
            count += 1
    print(f"{app.app_id}: {len(app.screens)} screens, {len(app.transitions)} transitions, {count} tasks ok")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def add_globals(p: argparse.ArgumentParser, default) -> None:
        p.add_argument("--backend", choices=["oracle", "wire"], default=default,
                       help="backend for all capabilities")
        p.add_argument("--seed", type=int, default=default, help="simulator and oracle seed")
        p.add_argument("--trace", default=default, help="append backend or step transcripts to this JSONL file")
        p.add_argument("--config", default=default, help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true", default=default or False)

    parser = argparse.ArgumentParser(prog="kobe", description="App knowledge graphs for UI agents.")
    parser.add_argument("--version", action="version", version=f"kobe {__version__}")
    add_globals(parser, None)
    # the same flags are accepted after the subcommand; SUPPRESS keeps earlier values
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    add_parser = sub.add_parser

    def add(name: str, **kwargs) -> argparse.ArgumentParser:
        return add_parser(name, parents=[common], **kwargs)

    sub.add_parser = add

    p = sub.add_parser("explore", help="build a graph by exploring an app")
    p.add_argument("--app", required=True, help="app spec file or bundled sample name")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue the partial graph at --out")
    p.add_argument("--threshold", type=float, help="node similarity threshold")
    p.add_argument("--interval", type=int, help="steps between re-exploration rounds")
    p.add_argument("--step-trace", help="per-step JSONL trace")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("audit", help="merge duplicates, flag edges, template instructions")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--app", help="app spec (needed by the oracle backend)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("run-task", help="execute one task")
    p.add_argument("--graph", help="graph file; omitted means an empty graph")
    p.add_argument("--app", required=True)
    p.add_argument("--task", required=True, help="task file (or a bundled sample name)")
    p.add_argument("--task-id")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_run_task)

    p = sub.add_parser("bench", help="run task suites and report SR / ESAR")
    p.add_argument("--app", action="append", help="repeatable; pairs with --graph and --tasks")
    p.add_argument("--graph", action="append", help="graph file, or - for an empty graph")
    p.add_argument("--tasks", action="append")
    p.add_argument("--baseline", action="store_true", help="also run the empty-graph baseline")
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", default="bench-out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="metric deltas between two bench reports")
    p.add_argument("guided")
    p.add_argument("baseline")
    p.add_argument("--out")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="write a graph as DOT")
    p.add_argument("--graph", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("stats", help="node / edge / step table over graphs")
    p.add_argument("--graph", nargs="+", required=True)
    p.add_argument("--pre", nargs="+", help="pre-audit graphs, same order")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("simenv", help="simulator utilities")
    simsub = p.add_subparsers(dest="simenv_command", required=True)
    v = simsub.add_parser("validate", parents=[common], help="check an app spec (and optionally its tasks)")
    v.add_argument("spec")
    v.add_argument("--tasks")
    v.set_defaults(func=cmd_simenv_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecValidationError, GraphError, OSError, ValueError) as exc:
        print(f"kobe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KobeError as exc:
        print(f"kobe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TASK_FAILED


if __name__ == "__main__":
    sys.exit(main())
