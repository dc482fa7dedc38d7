"""Declarative app and task specs for the simulator, with validation.

App files are JSON documents (see docs/app-spec.md). Validation errors carry
a dotted path to the offending field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import InvalidNode, SpecValidationError
from ..graph import ACTION_KINDS, DIRECTIONS, UiElement

APP_SCHEMA_VERSION = 1
GUARD_OPS = frozenset({"eq", "ne"})
EFFECT_OPS = frozenset({"set", "append", "clear"})
TRIGGER_KINDS = frozenset({"tap", "type_text", "swipe"})
APPEND_SEPARATOR = "; "


@dataclass(frozen=True)
class Guard:
    field: str
    op: str
    value: str

    def holds(self, values: dict[str, str]) -> bool:
        current = values.get(self.field, "")
        return current == self.value if self.op == "eq" else current != self.value


@dataclass(frozen=True)
class Effect:
    op: str
    field: str
    # Literal, "$text" (typed text) or "$from.<field>" (source screen value).
    value: str = ""


@dataclass(frozen=True)
class Trigger:
    element: str | None
    action: str
    direction: str | None = None
    guards: tuple[Guard, ...] = ()


@dataclass(frozen=True)
class TransitionSpec:
    source: str
    trigger: Trigger
    target: str
    effects: tuple[Effect, ...] = ()

    @property
    def is_self(self) -> bool:
        return self.source == self.target


@dataclass(frozen=True)
class ScreenSpec:
    template_id: str
    title: str
    elements: tuple[UiElement, ...]
    # name -> initial value, or a tuple of choices drawn per visit from the session RNG
    dynamic_fields: dict[str, str | tuple[str, ...]] = field(default_factory=dict)
    affordances: dict[str, tuple[str, ...]] = field(default_factory=dict)
    # sample texts for type_text affordances
    inputs: dict[str, tuple[str, ...]] = field(default_factory=dict)
    facts: tuple[str, ...] = ()
    lookalike_of: str | None = None

    def element(self, element_id: str | None) -> UiElement | None:
        for element in self.elements:
            if element.element_id == element_id:
                return element
        return None

    def focused_field(self) -> UiElement | None:
        for element in self.elements:
            if element.kind == "text_field" and "type_text" in self.affordances.get(element.element_id, ()):
                return element
        return None

    def random_fields(self) -> set[str]:
        return {k for k, v in self.dynamic_fields.items() if isinstance(v, tuple)}


@dataclass(frozen=True)
class AppSpec:
    app_id: str
    title: str
    screens: dict[str, ScreenSpec]
    initial_screen: str
    transitions: tuple[TransitionSpec, ...]
    # App-wide values that survive navigation (settings, saved data).
    persistent_fields: dict[str, str] = field(default_factory=dict)

    def transitions_from(self, template_id: str) -> list[TransitionSpec]:
        return [t for t in self.transitions if t.source == template_id]


@dataclass(frozen=True)
class StatePredicate:
    screen: str | None = None
    fields: dict[str, str] = field(default_factory=dict)
    contains: dict[str, str] = field(default_factory=dict)

    def holds(self, template_id: str, values: dict[str, str]) -> bool:
        if self.screen is not None and self.screen != template_id:
            return False
        if any(values.get(k) != v for k, v in self.fields.items()):
            return False
        return all(v in values.get(k, "") for k, v in self.contains.items())

    def implies(self, other: StatePredicate) -> bool:
        """Conservative structural check that self being true makes other true."""
        if other.screen is not None and self.screen != other.screen:
            return False
        if any(self.fields.get(k) != v for k, v in other.fields.items()):
            return False
        for k, v in other.contains.items():
            if v not in self.contains.get(k, "") and v not in self.fields.get(k, ""):
                return False
        return True

    def literals(self) -> set[str]:
        return set(self.fields.values()) | set(self.contains.values())


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    app_id: str
    instruction: str
    essential_states: tuple[StatePredicate, ...]
    success: StatePredicate

    def literals(self) -> set[str]:
        out = set(self.success.literals())
        for pred in self.essential_states:
            out |= pred.literals()
        return {v for v in out if v}


# -- parsing -------------------------------------------------------------

def _require(data: dict, key: str, path: str) -> Any:
    if key not in data:
        raise SpecValidationError(f"{path}.{key}" if path else key, "missing required field")
    return data[key]


def _parse_screen(tid: str, data: dict, path: str) -> ScreenSpec:
    elements = []
    for i, raw in enumerate(_require(data, "elements", path)):
        try:
            elements.append(UiElement.from_dict(raw))
        except (InvalidNode, KeyError, TypeError) as exc:
            raise SpecValidationError(f"{path}.elements[{i}]", str(exc)) from None
    ids = [e.element_id for e in elements]
    for i, eid in enumerate(ids):
        if ids.index(eid) != i:
            raise SpecValidationError(f"{path}.elements[{i}].element_id", f"duplicate element id {eid!r}")
    dynamic: dict[str, str | tuple[str, ...]] = {}
    for name, value in data.get("dynamic_fields", {}).items():
        if isinstance(value, dict):
            choices = value.get("choices")
            if not choices or not all(isinstance(c, str) for c in choices):
                raise SpecValidationError(f"{path}.dynamic_fields.{name}", "choices must be non-empty strings")
            dynamic[name] = tuple(choices)
        elif isinstance(value, str) or value is None:
            dynamic[name] = value or ""
        else:
            raise SpecValidationError(f"{path}.dynamic_fields.{name}", "must be a string or {choices: [...]}")
    affordances = {}
    for eid, kinds in data.get("affordances", {}).items():
        if eid not in ids:
            raise SpecValidationError(f"{path}.affordances.{eid}", "unknown element")
        for kind in kinds:
            if kind not in ACTION_KINDS:
                raise SpecValidationError(f"{path}.affordances.{eid}", f"unknown action kind {kind!r}")
        affordances[eid] = tuple(kinds)
    inputs = {}
    for eid, texts in data.get("inputs", {}).items():
        if "type_text" not in affordances.get(eid, ()):
            raise SpecValidationError(f"{path}.inputs.{eid}", "element has no type_text affordance")
        if not texts:
            raise SpecValidationError(f"{path}.inputs.{eid}", "needs at least one sample text")
        inputs[eid] = tuple(texts)
    return ScreenSpec(
        template_id=tid,
        title=_require(data, "title", path),
        elements=tuple(elements),
        dynamic_fields=dynamic,
        affordances=affordances,
        inputs=inputs,
        facts=tuple(data.get("facts", ())),
        lookalike_of=data.get("lookalike_of"),
    )


def _parse_transition(data: dict, path: str) -> TransitionSpec:
    trig = _require(data, "trigger", path)
    guards = []
    for j, g in enumerate(trig.get("guard", [])):
        gpath = f"{path}.trigger.guard[{j}]"
        if g.get("op") not in GUARD_OPS:
            raise SpecValidationError(f"{gpath}.op", f"must be one of {sorted(GUARD_OPS)}")
        guards.append(Guard(_require(g, "field", gpath), g["op"], str(g.get("value", ""))))
    effects = []
    for j, e in enumerate(data.get("effects", [])):
        epath = f"{path}.effects[{j}]"
        if e.get("op") not in EFFECT_OPS:
            raise SpecValidationError(f"{epath}.op", f"must be one of {sorted(EFFECT_OPS)}")
        effects.append(Effect(e["op"], _require(e, "field", epath), str(e.get("value", ""))))
    return TransitionSpec(
        source=_require(data, "from", path),
        trigger=Trigger(trig.get("element"), _require(trig, "action", f"{path}.trigger"),
                        trig.get("direction"), tuple(guards)),
        target=_require(data, "to", path),
        effects=tuple(effects),
    )


def _visible_names(app: AppSpec, screen: ScreenSpec) -> set[str]:
    return set(screen.dynamic_fields) | set(app.persistent_fields)


def validate_app(app: AppSpec) -> None:
    if app.initial_screen not in app.screens:
        raise SpecValidationError("initial_screen", f"unknown screen {app.initial_screen!r}")
    titles: dict[str, str] = {}
    for tid, screen in app.screens.items():
        if screen.title in titles:
            raise SpecValidationError(f"screens.{tid}.title", f"duplicates the title of {titles[screen.title]!r}")
        titles[screen.title] = tid
        if screen.lookalike_of is not None and screen.lookalike_of not in app.screens:
            raise SpecValidationError(f"screens.{tid}.lookalike_of", f"unknown screen {screen.lookalike_of!r}")
        for name in screen.dynamic_fields:
            if name in app.persistent_fields and isinstance(screen.dynamic_fields[name], tuple):
                raise SpecValidationError(f"screens.{tid}.dynamic_fields.{name}", "persistent fields cannot be random")
    seen: dict[tuple, int] = {}
    for i, t in enumerate(app.transitions):
        path = f"transitions[{i}]"
        if t.source not in app.screens:
            raise SpecValidationError(f"{path}.from", f"unknown screen {t.source!r}")
        if t.target not in app.screens:
            raise SpecValidationError(f"{path}.to", f"unknown screen {t.target!r}")
        source = app.screens[t.source]
        target = app.screens[t.target]
        trig = t.trigger
        if trig.action not in TRIGGER_KINDS:
            raise SpecValidationError(f"{path}.trigger.action", f"must be one of {sorted(TRIGGER_KINDS)}")
        if trig.element is None:
            if trig.action != "swipe":
                raise SpecValidationError(f"{path}.trigger.element", "only swipe triggers may omit the element")
        else:
            if source.element(trig.element) is None:
                raise SpecValidationError(f"{path}.trigger.element",
                                          f"unknown element {trig.element!r} on {t.source!r}")
            if trig.action not in source.affordances.get(trig.element, ()):
                raise SpecValidationError(f"{path}.trigger.action",
                                          f"element {trig.element!r} does not afford {trig.action!r}")
        if trig.direction is not None and trig.direction not in DIRECTIONS:
            raise SpecValidationError(f"{path}.trigger.direction", f"unknown direction {trig.direction!r}")
        for j, g in enumerate(trig.guards):
            if g.field not in _visible_names(app, source):
                raise SpecValidationError(f"{path}.trigger.guard[{j}].field", f"unknown field {g.field!r}")
        for j, e in enumerate(t.effects):
            # effects must stay observable, so the target has to display the field
            if e.field not in target.dynamic_fields:
                raise SpecValidationError(f"{path}.effects[{j}].field",
                                          f"{e.field!r} is not a dynamic field of {t.target!r}")
            if e.value == "$text" and trig.action != "type_text":
                raise SpecValidationError(f"{path}.effects[{j}].value", "$text needs a type_text trigger")
            if e.value.startswith("$from."):
                ref = e.value[len("$from."):]
                if ref not in _visible_names(app, source):
                    raise SpecValidationError(f"{path}.effects[{j}].value", f"unknown source field {ref!r}")
        key = (t.source, trig.element, trig.action, trig.direction, frozenset(trig.guards))
        if key in seen:
            raise SpecValidationError(path, f"nondeterministic: same trigger as transitions[{seen[key]}]")
        seen[key] = i


def app_from_dict(data: dict[str, Any]) -> AppSpec:
    version = data.get("schema_version")
    if version != APP_SCHEMA_VERSION:
        raise SpecValidationError("schema_version", f"unsupported version {version!r}")
    screens_raw = _require(data, "screens", "")
    screens = {tid: _parse_screen(tid, raw, f"screens.{tid}") for tid, raw in screens_raw.items()}
    transitions = tuple(_parse_transition(raw, f"transitions[{i}]")
                        for i, raw in enumerate(data.get("transitions", [])))
    app = AppSpec(
        app_id=_require(data, "app_id", ""),
        title=data.get("title", data["app_id"]),
        screens=screens,
        initial_screen=_require(data, "initial_screen", ""),
        transitions=transitions,
        persistent_fields={k: str(v) for k, v in data.get("persistent_fields", {}).items()},
    )
    validate_app(app)
    return app


def _parse_predicate(data: dict, path: str) -> StatePredicate:
    if not isinstance(data, dict):
        raise SpecValidationError(path, "predicate must be an object")
    return StatePredicate(data.get("screen"), dict(data.get("fields", {})), dict(data.get("contains", {})))


def task_from_dict(data: dict[str, Any], path: str = "task") -> TaskSpec:
    essentials = tuple(_parse_predicate(p, f"{path}.essential_states[{i}]")
                       for i, p in enumerate(_require(data, "essential_states", path)))
    if not essentials:
        raise SpecValidationError(f"{path}.essential_states", "needs at least one essential state")
    success = _parse_predicate(_require(data, "success", path), f"{path}.success")
    if not success.implies(essentials[-1]):
        raise SpecValidationError(f"{path}.success", "must imply the last essential state")
    return TaskSpec(
        task_id=_require(data, "task_id", path),
        app_id=_require(data, "app_id", path),
        instruction=_require(data, "instruction", path),
        essential_states=essentials,
        success=success,
    )


def validate_task(task: TaskSpec, app: AppSpec, path: str = "task") -> None:
    if task.app_id != app.app_id:
        raise SpecValidationError(f"{path}.app_id", f"task targets {task.app_id!r}, not {app.app_id!r}")
    for i, pred in enumerate((*task.essential_states, task.success)):
        if pred.screen is not None and pred.screen not in app.screens:
            raise SpecValidationError(f"{path}.predicates[{i}].screen", f"unknown screen {pred.screen!r}")


def load_app(path: str | os.PathLike) -> AppSpec:
    return app_from_dict(json.loads(Path(path).read_text()))


def load_tasks(path: str | os.PathLike) -> list[TaskSpec]:
    """Read a tasks file ({"tasks": [...]}) or a single task object."""
    data = json.loads(Path(path).read_text())
    if "tasks" in data:
        return [task_from_dict(t, f"tasks[{i}]") for i, t in enumerate(data["tasks"])]
    return [task_from_dict(data)]
