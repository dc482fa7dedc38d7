"""Deterministic app simulator standing in for real devices."""

from __future__ import annotations

from importlib import resources

from .session import (
    ScreenRender,
    Session,
    SimState,
    TaskProgress,
    advance,
    check_task,
    render_state,
    reset,
    step,
    template_render,
)
from .spec import (
    AppSpec,
    ScreenSpec,
    StatePredicate,
    TaskSpec,
    TransitionSpec,
    app_from_dict,
    load_app,
    load_tasks,
    task_from_dict,
    validate_app,
    validate_task,
)
from .truth import compare_to_truth, ground_truth_graph, reachable_templates

SAMPLE_APPS = ("maps", "settings", "transit", "notes", "shop")


def sample_app_path(name: str):
    return resources.files(__package__) / "apps" / f"{name}.json"


def sample_tasks_path(name: str):
    return resources.files(__package__) / "apps" / f"{name}.tasks.json"


def sample_app(name: str) -> AppSpec:
    return load_app(sample_app_path(name))


def sample_tasks(name: str) -> list[TaskSpec]:
    return load_tasks(sample_tasks_path(name))


def sample_suite() -> list[TaskSpec]:
    return [t for name in SAMPLE_APPS for t in sample_tasks(name)]


__all__ = [
    "AppSpec", "SAMPLE_APPS", "ScreenRender", "ScreenSpec", "Session", "SimState", "StatePredicate",
    "TaskProgress", "TaskSpec", "TransitionSpec", "advance", "app_from_dict", "check_task",
    "compare_to_truth", "ground_truth_graph", "load_app", "load_tasks", "reachable_templates",
    "render_state", "reset", "sample_app", "sample_app_path", "sample_suite", "sample_tasks",
    "sample_tasks_path", "step", "task_from_dict", "template_render", "validate_app", "validate_task",
]
