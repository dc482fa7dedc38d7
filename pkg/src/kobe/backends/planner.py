"""Breadth-first task planner over the simulator's concrete state space.

Used by the oracle backend to know the next correct action from any state.
Plans first try element actions only and fall back to also allowing the
system back button.
"""

from __future__ import annotations

import threading
from collections import deque

from ..graph import DeviceAction
from ..simenv.session import SimState, advance, essential_mask, first_choice, task_complete
from ..simenv.spec import AppSpec, TaskSpec

MAX_DEPTH = 30
MAX_STATES = 50_000


def element_actions(app: AppSpec, template_id: str, extra_texts: frozenset[str] = frozenset()) -> list[DeviceAction]:
    """Every element action the screen affords, in element then kind order."""
    screen = app.screens[template_id]
    out = []
    for element in screen.elements:
        eid = element.element_id
        for kind in screen.affordances.get(eid, ()):
            if kind == "tap":
                out.append(DeviceAction.tap(eid))
            elif kind == "type_text":
                texts = list(screen.inputs.get(eid, ()))
                texts += sorted(extra_texts - set(texts))
                out.extend(DeviceAction.type_text(t, eid) for t in texts or ["text"])
            elif kind == "swipe":
                directions = []
                for t in app.transitions_from(template_id):
                    d = t.trigger.direction
                    if t.trigger.element == eid and t.trigger.action == "swipe" and d and d not in directions:
                        directions.append(d)
                out.extend(DeviceAction.swipe(d, eid) for d in directions or ["up"])
    return out


class TaskPlanner:
    """Shortest action plans for tasks on one app; thread-safe memoization."""

    def __init__(self, app: AppSpec):
        self.app = app
        self._cache: dict[tuple, list[DeviceAction] | None] = {}
        self._lock = threading.Lock()

    def _key(self, state: SimState, mask: int, with_system: bool) -> tuple:
        def strip(frame):
            random_fields = self.app.screens[frame.template_id].random_fields()
            return (frame.template_id, tuple(f for f in frame.fields if f[0] not in random_fields))
        # Without back, frames under the top can never matter again.
        frames = tuple(strip(f) for f in state.stack) if with_system else (strip(state.top),)
        return frames, state.persistent, mask

    def plan(self, task: TaskSpec, state: SimState, mask: int) -> list[DeviceAction] | None:
        """Actions reaching task completion from ``state``; [] if already complete, None if unreachable."""
        cache_key = (task.task_id, self._key(state, mask, True))
        with self._lock:
            if cache_key in self._cache:
                return self._cache[cache_key]
        result = self._search(task, state, mask, with_system=False)
        if result is None:
            result = self._search(task, state, mask, with_system=True)
        with self._lock:
            self._cache[cache_key] = result
        return result

    def _search(self, task: TaskSpec, start: SimState, mask: int, with_system: bool) -> list[DeviceAction] | None:
        mask = essential_mask(self.app, task, start, mask)
        if task_complete(self.app, task, start, mask):
            return []
        texts = frozenset(task.literals())
        seen = {self._key(start, mask, with_system)}
        queue = deque([(start, mask, [])])
        while queue and len(seen) < MAX_STATES:
            state, current_mask, path = queue.popleft()
            if len(path) >= MAX_DEPTH:
                continue
            actions = element_actions(self.app, state.top.template_id, texts)
            if with_system:
                actions.append(DeviceAction("back"))
            for action in actions:
                nxt = advance(self.app, state, action, first_choice)
                if nxt == state:
                    continue
                next_mask = essential_mask(self.app, task, nxt, current_mask)
                key = self._key(nxt, next_mask, with_system)
                if key in seen:
                    continue
                seen.add(key)
                if task_complete(self.app, task, nxt, next_mask):
                    return path + [action]
                queue.append((nxt, next_mask, path + [action]))
        return None
