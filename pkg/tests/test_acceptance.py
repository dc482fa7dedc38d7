"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py), so ``pytest tests/test_acceptance.py`` shows them
even without ``-s``.
"""

from __future__ import annotations

import time
from collections import Counter
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, given, settings

from kobe.agent import FACT_CAP, RECENT_CAP, run_task
from kobe.auditor import audit
from kobe.backends.oracle import OracleBackend
from kobe.bench import bench_suite
from kobe.cli import main
from kobe.errors import NoPath
from kobe.explorer import ExplorationConfig, explore
from kobe.graph import KnowledgeGraph, load, save
from kobe.report import report_stats
from kobe.simenv import SAMPLE_APPS, compare_to_truth, ground_truth_graph, reset
from kobe.simenv.truth import node_templates

from conftest import explore_app
from test_agent import Stubborn, task_by_id, unchanged_runs
from test_auditor import clone_nodes, reachable
from test_graph import brute_force_path, graphs, table_graph

RESULTS: list[str] = []


@contextmanager
def criterion(number, title, limit_s):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - start
        assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        RESULTS.append(f"FAIL  {number}. {title} ({elapsed:.2f}s) {exc}")
        raise
    RESULTS.append(f"PASS  {number}. {title} ({elapsed:.2f}s) {detail.get('note', '')}".rstrip())


def suite_entries(apps, tasks, graphs_by_app):
    return [(apps[n], graphs_by_app[n] if graphs_by_app else KnowledgeGraph(n), tasks[n]) for n in SAMPLE_APPS]


def test_1_exploration_completeness(apps):
    with criterion(1, "exploration completeness", 10 * len(SAMPLE_APPS)) as detail:
        notes = []
        for name in SAMPLE_APPS:
            app = apps[name]
            start = time.perf_counter()
            backend = OracleBackend([app])
            session, _ = reset(app)
            budget = 4 * len(app.transitions)
            graph = explore(session, KnowledgeGraph(name), ExplorationConfig(budget), backend)
            elapsed = time.perf_counter() - start
            coverage = compare_to_truth(graph, app)
            assert coverage.node_recall == 1.0, (name, coverage)
            assert coverage.edge_recall >= 0.95, (name, coverage)
            assert elapsed < 10, (name, elapsed)
            notes.append(f"{name} {coverage.node_recall:.2f}/{coverage.edge_recall:.2f}")
        assert len(SAMPLE_APPS) >= 4
        detail["note"] = "node/edge recall: " + ", ".join(notes)


class Interrupt(Exception):
    pass


def test_2_crash_resume(tmp_path, apps):
    with criterion(2, "crash-resume determinism", 60) as detail:
        app = apps["maps"]
        backend = OracleBackend([app])
        budget = 4 * len(app.transitions)
        reference = explore_app(app, backend, budget=budget)
        path = tmp_path / "g.json"
        for k in range(1, budget):
            def stop(step, k=k):
                if step == k:
                    raise Interrupt

            session, _ = reset(app)
            with pytest.raises(Interrupt):
                explore(session, KnowledgeGraph("maps"), ExplorationConfig(budget, save_path=path), backend,
                        on_step=stop)
            session, _ = reset(app)
            resumed = explore(session, load(path), ExplorationConfig(budget, save_path=path), backend)
            assert resumed == reference, f"resume after step {k} diverged"
        detail["note"] = f"maps, interrupted at each of {budget - 1} steps"


def test_3_audit_correctness(apps, oracle, explored):
    with criterion(3, "audit correctness", 5) as detail:
        runs = 0
        for name in SAMPLE_APPS:
            g = explored[name]
            truth_nodes = len(ground_truth_graph(apps[name]).nodes)
            for node_id in sorted(g.nodes):
                for d in (1, 2, 3):
                    cloned, _ = clone_nodes(g, node_id, d)
                    result, _ = audit(cloned, oracle)
                    assert len(result.nodes) == truth_nodes, (name, node_id, d)
                    result.validate()
                    assert all(e.source in result.nodes and e.target in result.nodes
                               for e in result.edges.values())
                    assert audit(result, oracle)[0] == result
                    assert set(node_templates(result).values()) == set(node_templates(g).values())
                    assert reachable(result) == reachable(g)
                    runs += 1
        transit = audit(explored["transit"], oracle)[0]
        assert {"pick_departure", "pick_destination"} <= set(node_templates(transit).values())
        detail["note"] = f"{runs} clone injections"


def test_4_runtime_success(apps, tasks, oracle, audited):
    with criterion(4, "runtime task success with coverage", 30) as detail:
        report = bench_suite(suite_entries(apps, tasks, audited), oracle)
        report.check_consistency()
        assert len(report.rows) >= 10
        assert (report.success_rate, report.esar, report.fallback_rate) == (100.0, 100.0, 0.0), report.rows
        detail["note"] = f"{len(report.rows)} tasks: SR {report.success_rate:.1f} ESAR {report.esar:.1f} " \
                         f"fallback {report.fallback_rate:.1f}"


def test_5_graph_guidance_delta(apps, tasks, audited):
    with criterion(5, "graph-guidance delta", 30) as detail:
        backend = OracleBackend(apps.values(), seed=0, fallback_accuracy=0.5)
        guided = bench_suite(suite_entries(apps, tasks, audited), backend)
        baseline = bench_suite(suite_entries(apps, tasks, None), backend)
        delta = guided.success_rate - baseline.success_rate
        assert delta >= 30, (guided.success_rate, baseline.success_rate)
        detail["note"] = f"guided SR {guided.success_rate:.1f} - baseline SR {baseline.success_rate:.1f} " \
                         f"= {delta:.1f}pp"


def test_6_fallback_recovery(apps, tasks, oracle, audited):
    with criterion(6, "fallback recovery", 30) as detail:
        cases = 0
        for name in SAMPLE_APPS:
            for task in tasks[name]:
                session, _ = reset(apps[name])
                full = run_task(task, audited[name], session, oracle)
                used = dict.fromkeys(log.edge_id for log in full.logs if log.graph_guided)
                resumed_on_edge = False
                for edge_id in used:
                    g = audited[name].copy()
                    g.remove_edge(edge_id)
                    session, _ = reset(apps[name])
                    result = run_task(task, g, session, oracle)
                    assert result.success, (task.task_id, edge_id)
                    if result.fallback_steps == 0:
                        # another edge (a templated sibling) covered the step; not required
                        continue
                    cases += 1
                    first = next(i for i, log in enumerate(result.logs) if log.fallback)
                    after = result.logs[first + 1:]
                    # back on the graph: a step decided from the node's option list
                    assert any(not log.fallback and log.option_kind for log in after), (task.task_id, edge_id)
                    resumed_on_edge |= any(log.graph_guided for log in after)
                assert resumed_on_edge, task.task_id
        detail["note"] = f"{cases} required-edge deletions recovered"


def test_7_invariant_suites(tmp_path_factory, apps, tasks, oracle, audited, explored):
    with criterion(7, "invariant suites", 60) as detail:
        counts = Counter()

        @settings(max_examples=200, deadline=None, suppress_health_check=list(HealthCheck))
        @given(graphs())
        def persistence(g):
            path = tmp_path_factory.mktemp("rt") / "g.json"
            save(g, path)
            assert load(path) == g
            counts["persistence"] += 1

        @settings(max_examples=200, deadline=None, suppress_health_check=list(HealthCheck))
        @given(graphs(max_nodes=8))
        def shortest_paths(g):
            check_paths(g)
            counts["paths"] += 1

        def check_paths(g):
            for start in g.nodes:
                for goal in g.nodes:
                    expected = brute_force_path(g, start, goal)
                    if expected is None:
                        with pytest.raises(NoPath):
                            g.shortest_action_path(start, goal)
                    else:
                        assert [e.edge_id for e in g.shortest_action_path(start, goal)] == expected

        persistence()
        shortest_paths()
        for g in list(explored.values()) + list(audited.values()):
            assert len(g.nodes) <= 8
            check_paths(g)

        degraded = OracleBackend(apps.values(), fallback_accuracy=0.5)
        reports = [bench_suite(suite_entries(apps, tasks, audited), oracle),
                   bench_suite(suite_entries(apps, tasks, audited), degraded),
                   bench_suite(suite_entries(apps, tasks, None), degraded)]
        matched = 0
        for report in reports:
            for result in report.results:
                for log in result.logs:
                    if log.options is not None:
                        assert log.options[0] == "Complete" and log.options[-1] == "FreeAction"
                        matched += 1
                assert len(result.memory.facts) <= FACT_CAP
                assert len(result.memory.recent_observations) <= RECENT_CAP
                assert sum(result.memory.executed_instructions.values()) == \
                    sum(log.action is not None for log in result.logs)
                assert all(n <= 3 for n in unchanged_runs(result).values())

        stubborn = Stubborn(apps.values())
        session, _ = reset(apps["maps"])
        looped = run_task(task_by_id(tasks, "maps_search_starbucks"), audited["maps"], session, stubborn)
        assert looped.stop_reason == "loop_guard"
        assert max(unchanged_runs(looped).values()) == 3
        assert counts["persistence"] >= 200 and counts["paths"] >= 200
        detail["note"] = f"{counts['persistence']} round-trips, {counts['paths']} path graphs, " \
                         f"{matched} matched steps"


def test_8_stats_fidelity(tmp_path, capsys):
    with criterion(8, "stats/report fidelity", 10) as detail:
        table = report_stats([table_graph(54, 226)])
        assert [label for label, _ in table.rows] == ["Nodes", "Edges", "Construction Steps"]
        assert table.summary() == "54 / 226"
        path = tmp_path / "table.json"
        save(table_graph(54, 226), path)
        assert main(["stats", "--graph", str(path)]) == 0
        out = capsys.readouterr().out
        assert "54 / 226" in out
        detail["note"] = "stats prints 54 / 226"

