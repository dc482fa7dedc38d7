"""Deterministic simulated device sessions.

The transition function is pure over :class:`SimState`; :class:`Session`
adds the seeded RNG for per-visit dynamic content, the step counter and the
history used to latch task checkpoints.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import AppMismatch, SessionClosed, SpecValidationError
from ..graph import DeviceAction, UiElement
from .spec import APPEND_SEPARATOR, AppSpec, Effect, ScreenSpec, TaskSpec, TransitionSpec, validate_app

Draw = Callable[[tuple[str, ...]], str]


@dataclass(frozen=True)
class Frame:
    template_id: str
    fields: tuple[tuple[str, str], ...]

    def values(self) -> dict[str, str]:
        return dict(self.fields)


@dataclass(frozen=True)
class SimState:
    stack: tuple[Frame, ...]
    persistent: tuple[tuple[str, str], ...]

    @property
    def top(self) -> Frame:
        return self.stack[-1]


@dataclass(frozen=True)
class ScreenRender:
    """What a device shows: text, elements and a content hash.

    ``template_id`` is simulator ground truth; only oracle backends may read it.
    ``sim`` links a live render back to its session and is never serialized.
    """

    app_id: str
    template_id: str
    title: str
    text_lines: tuple[str, ...]
    elements: tuple[UiElement, ...]
    fields: dict[str, str]
    screenshot_key: str
    sim: Any = field(default=None, compare=False, repr=False)

    def public_text(self) -> str:
        return "\n".join(self.text_lines)

    def element(self, element_id: str | None) -> UiElement | None:
        for element in self.elements:
            if element.element_id == element_id:
                return element
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "template_id": self.template_id,
            "title": self.title,
            "text_lines": list(self.text_lines),
            "elements": [e.to_dict() for e in self.elements],
            "fields": dict(self.fields),
            "screenshot_key": self.screenshot_key,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScreenRender:
        return cls(
            app_id=data["app_id"],
            template_id=data["template_id"],
            title=data["title"],
            text_lines=tuple(data["text_lines"]),
            elements=tuple(UiElement.from_dict(e) for e in data["elements"]),
            fields=dict(data["fields"]),
            screenshot_key=data["screenshot_key"],
        )


@dataclass(frozen=True)
class TaskProgress:
    achieved_essential: int
    total_essential: int
    success: bool

    @property
    def achieved_count(self) -> int:
        return bin(self.achieved_essential).count("1")


# -- pure state machine ----------------------------------------------------

def first_choice(choices: tuple[str, ...]) -> str:
    return choices[0]


def new_frame(app: AppSpec, template_id: str, draw: Draw) -> Frame:
    screen = app.screens[template_id]
    values = []
    for name, initial in screen.dynamic_fields.items():
        if name in app.persistent_fields:
            continue
        values.append((name, draw(initial) if isinstance(initial, tuple) else initial))
    return Frame(template_id, tuple(values))


def initial_state(app: AppSpec, draw: Draw = first_choice) -> SimState:
    return SimState((new_frame(app, app.initial_screen, draw),), tuple(app.persistent_fields.items()))


def visible_values(app: AppSpec, state: SimState) -> dict[str, str]:
    """Dynamic values shown on the top screen, in declaration order."""
    screen = app.screens[state.top.template_id]
    frame = state.top.values()
    persistent = dict(state.persistent)
    out = {}
    for name in screen.dynamic_fields:
        out[name] = persistent[name] if name in persistent else frame.get(name, "")
    return out


def predicate_values(app: AppSpec, state: SimState) -> dict[str, str]:
    """Values task predicates see: top-screen fields plus every persistent field."""
    values = dict(state.persistent)
    values.update(visible_values(app, state))
    return values


def _focused_target(screen: ScreenSpec, action: DeviceAction) -> str | None:
    if action.kind == "type_text" and action.target_element is None:
        focused = screen.focused_field()
        return focused.element_id if focused else None
    if action.kind == "tap" and action.target_element is None and action.point is not None:
        x, y = action.point
        for element in screen.elements:
            if element.contains(x, y):
                return element.element_id
        return None
    return action.target_element


def matching_transition(app: AppSpec, state: SimState, action: DeviceAction) -> TransitionSpec | None:
    screen = app.screens[state.top.template_id]
    element = _focused_target(screen, action)
    if element is not None:
        if screen.element(element) is None or action.kind not in screen.affordances.get(element, ()):
            return None
    elif action.kind != "swipe":
        return None
    values = predicate_values(app, state)
    hits = []
    for t in app.transitions_from(screen.template_id):
        trig = t.trigger
        if trig.element != element or trig.action != action.kind:
            continue
        if trig.direction is not None and trig.direction != action.direction:
            continue
        if all(g.holds(values) for g in trig.guards):
            hits.append(t)
    if len(hits) > 1:
        raise SpecValidationError(f"screens.{screen.template_id}",
                                  f"{len(hits)} transitions match {action.to_dict()}")
    return hits[0] if hits else None


def _apply_effects(effects: tuple[Effect, ...], frame: dict[str, str], persistent: dict[str, str],
                   source_values: dict[str, str], action: DeviceAction) -> None:
    for effect in effects:
        if effect.value == "$text":
            value = action.text or ""
        elif effect.value.startswith("$from."):
            value = source_values.get(effect.value[len("$from."):], "")
        else:
            value = effect.value
        store = persistent if effect.field in persistent else frame
        if effect.op == "set":
            store[effect.field] = value
        elif effect.op == "append":
            current = store.get(effect.field, "")
            store[effect.field] = f"{current}{APPEND_SEPARATOR}{value}" if current else value
        else:
            store[effect.field] = ""


def advance(app: AppSpec, state: SimState, action: DeviceAction, draw: Draw = first_choice) -> SimState:
    """Apply one device action. Unmatched actions leave the state unchanged."""
    if action.kind == "wait":
        return state
    if action.kind == "back":
        return SimState(state.stack[:-1], state.persistent) if len(state.stack) > 1 else state
    if action.kind in ("home", "open_app"):
        if action.kind == "open_app" and action.text != app.app_id:
            return state
        return SimState((new_frame(app, app.initial_screen, draw),), state.persistent)
    transition = matching_transition(app, state, action)
    if transition is None:
        return state
    source_values = predicate_values(app, state)
    persistent = dict(state.persistent)
    if transition.is_self:
        frame = state.top.values()
        _apply_effects(transition.effects, frame, persistent, source_values, action)
        top = Frame(state.top.template_id, tuple(frame.items()))
        return SimState(state.stack[:-1] + (top,), tuple(persistent.items()))
    pushed = new_frame(app, transition.target, draw)
    frame = pushed.values()
    _apply_effects(transition.effects, frame, persistent, source_values, action)
    # keep declaration order of the target's fields
    ordered = tuple((name, frame[name]) for name, _ in pushed.fields)
    return SimState(state.stack + (Frame(transition.target, ordered),), tuple(persistent.items()))


def render_state(app: AppSpec, state: SimState, sim: Any = None) -> ScreenRender:
    screen = app.screens[state.top.template_id]
    values = visible_values(app, state)
    lines = [screen.title]
    lines += [f"{name}: {value}" for name, value in values.items()]
    lines += [f"[{e.kind}] {e.label}" for e in screen.elements]
    canonical = "\n".join([app.app_id, *lines])
    return ScreenRender(
        app_id=app.app_id,
        template_id=screen.template_id,
        title=screen.title,
        text_lines=tuple(lines),
        elements=screen.elements,
        fields=values,
        screenshot_key=hashlib.sha256(canonical.encode()).hexdigest()[:16],
        sim=sim,
    )


def template_render(app: AppSpec, template_id: str) -> ScreenRender:
    """Render of a template with its initial values, outside any session."""
    state = SimState((new_frame(app, template_id, first_choice),), tuple(app.persistent_fields.items()))
    return render_state(app, state)


# -- sessions ----------------------------------------------------------------

@dataclass(frozen=True)
class SimContext:
    session: Session
    step_index: int


def _holds(app: AppSpec, state: SimState, pred) -> bool:
    return pred.holds(state.top.template_id, predicate_values(app, state))


def essential_mask(app: AppSpec, task: TaskSpec, state: SimState, mask: int = 0) -> int:
    """Latch checkpoints in order: checkpoint i needs i-1 latched first."""
    for i, pred in enumerate(task.essential_states):
        if mask & (1 << i):
            continue
        if i > 0 and not mask & (1 << (i - 1)):
            break
        if not _holds(app, state, pred):
            break
        mask |= 1 << i
    return mask


def task_complete(app: AppSpec, task: TaskSpec, state: SimState, mask: int) -> bool:
    full = (1 << len(task.essential_states)) - 1
    return mask == full and _holds(app, state, task.success)


class Session:
    """One simulated device running one app. Not thread-safe; use one per thread."""

    def __init__(self, app: AppSpec, seed: int = 0):
        self.app = app
        self.seed = seed
        self._rng = random.Random(f"{app.app_id}:{seed}")
        self.state = initial_state(app, self._draw)
        self.history: list[SimState] = [self.state]
        self.step_count = 0
        self.closed = False
        self._latches: dict[str, tuple[int, int]] = {}

    def _draw(self, choices: tuple[str, ...]) -> str:
        return self._rng.choice(choices)

    def current(self) -> ScreenRender:
        return render_state(self.app, self.state, SimContext(self, self.step_count))

    def step(self, action: DeviceAction) -> ScreenRender:
        if self.closed:
            raise SessionClosed(f"session for {self.app.app_id} is closed")
        self.state = advance(self.app, self.state, action, self._draw)
        self.history.append(self.state)
        self.step_count += 1
        return self.current()

    def close(self) -> None:
        self.closed = True

    def progress(self, task: TaskSpec) -> TaskProgress:
        mask, seen = self._latches.get(task.task_id, (0, 0))
        for state in self.history[seen:]:
            mask = essential_mask(self.app, task, state, mask)
        self._latches[task.task_id] = (mask, len(self.history))
        return TaskProgress(mask, len(task.essential_states), task_complete(self.app, task, self.state, mask))


def reset(app: AppSpec, seed: int = 0) -> tuple[Session, ScreenRender]:
    validate_app(app)
    session = Session(app, seed)
    return session, session.current()


def step(session: Session, action: DeviceAction) -> ScreenRender:
    return session.step(action)


def check_task(session: Session, task: TaskSpec) -> TaskProgress:
    """Latched checkpoint progress plus success on the current state."""
    if task.app_id != session.app.app_id:
        raise AppMismatch(f"task {task.task_id} targets {task.app_id}, session runs {session.app.app_id}")
    return session.progress(task)
