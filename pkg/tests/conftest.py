from __future__ import annotations

import pytest

from kobe.auditor import audit
from kobe.backends.oracle import OracleBackend
from kobe.explorer import ExplorationConfig, explore
from kobe.graph import KnowledgeGraph
from kobe.simenv import SAMPLE_APPS, reset, sample_app, sample_tasks


def screen(title, elements, fields=None, taps=None, typing=()):
    affordances = {eid: ["tap"] for eid, _ in elements} if taps is None else taps
    for eid in typing:
        affordances[eid] = ["type_text"]
    return {
        "title": title,
        "dynamic_fields": fields or {},
        "elements": [{"element_id": eid, "label": label, "kind": "text_field" if eid in typing else "button",
                      "region": [0, 100 * i, 1000, 100 * i + 80]} for i, (eid, label) in enumerate(elements)],
        "affordances": affordances,
    }


def linear_spec():
    return {
        "schema_version": 1,
        "app_id": "line",
        "title": "Line",
        "initial_screen": "a",
        "screens": {
            "a": screen("First", [("next", "next button")]),
            "b": screen("Second", [("next", "next button"), ("f", "name field")], {"name": ""}, typing=["f"]),
            "c": screen("Third", [("stay", "stay button")]),
            "island": screen("Island", [("x", "x button")]),
        },
        "transitions": [
            {"from": "a", "trigger": {"element": "next", "action": "tap"}, "to": "b"},
            {"from": "b", "trigger": {"element": "next", "action": "tap"}, "to": "c"},
            {"from": "b", "trigger": {"element": "f", "action": "type_text"}, "to": "b",
             "effects": [{"op": "set", "field": "name", "value": "$text"}]},
            {"from": "island", "trigger": {"element": "x", "action": "tap"}, "to": "a"},
        ],
    }


def explore_app(app, backend, budget=None, seed=0, **kwargs):
    session, _ = reset(app, seed)
    config = ExplorationConfig(budget or 4 * len(app.transitions), seed=seed, **kwargs)
    return explore(session, KnowledgeGraph(app.app_id), config, backend)


@pytest.fixture(scope="session")
def apps():
    return {name: sample_app(name) for name in SAMPLE_APPS}


@pytest.fixture(scope="session")
def tasks():
    return {name: sample_tasks(name) for name in SAMPLE_APPS}


@pytest.fixture(scope="session")
def oracle(apps):
    return OracleBackend(apps.values())


@pytest.fixture(scope="session")
def explored(apps, oracle):
    """Raw exploration result per sample app. Treat as read-only; copy before mutating."""
    return {name: explore_app(app, oracle) for name, app in apps.items()}


@pytest.fixture(scope="session")
def audited(explored, oracle):
    return {name: audit(graph, oracle)[0] for name, graph in explored.items()}


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
