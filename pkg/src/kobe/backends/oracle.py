"""Deterministic oracle backend bound to simulator ground truth.

Every answer is a pure function of the request and the seed, so runs are
reproducible across processes. The oracle reads ``ScreenRender.template_id``
and, for task decisions, the live session behind a render.
"""

from __future__ import annotations

import hashlib
import random
from typing import Any, Iterable

import numpy as np

from ..errors import BackendError, NothingToExplore
from ..graph import DeviceAction, UiNode, id_key, template_params
from ..simenv import phrasing
from ..simenv.session import ScreenRender, SimContext
from ..simenv.spec import AppSpec, TaskSpec
from .base import Backend, NormalizedGroup, OptionChoice, PageDescription, PlannedStep
from .planner import TaskPlanner, element_actions

DEFAULT_DIM = 64
LOOKALIKE_COSINE = 0.91


def _seeded_rng(*parts: Any) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _coin(*parts: Any) -> float:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


class OracleBackend(Backend):
    """Oracle for every capability over a set of simulator apps.

    Args:
        apps: the app specs the oracle may be asked about.
        seed: mixes into every hash, so different seeds give different
            (but still deterministic) embeddings and degraded answers.
        dim: embedding dimension.
        fallback_accuracy: probability that ``fallback_plan`` answers
            correctly; the coin is keyed on (seed, task, screenshot), so a
            wrong answer repeats whenever the same situation recurs.
    """

    name = "oracle"

    def __init__(self, apps: Iterable[AppSpec], seed: int = 0, dim: int = DEFAULT_DIM,
                 fallback_accuracy: float = 1.0, **kwargs):
        super().__init__(**kwargs)
        self.apps = {app.app_id: app for app in apps}
        self.seed = seed
        self.dim = dim
        self.fallback_accuracy = fallback_accuracy
        self._planners = {app_id: TaskPlanner(app) for app_id, app in self.apps.items()}
        self._vectors: dict[tuple[str, str], list[float]] = {}
        self._descriptions: dict[str, tuple[str, str]] = {}
        for app in self.apps.values():
            self._build_vectors(app)

    # -- embeddings --------------------------------------------------------

    def _build_vectors(self, app: AppSpec) -> None:
        templates = sorted(app.screens)
        if len(templates) > self.dim:
            raise BackendError(f"{app.app_id} has more templates than embedding dimensions")
        # Orthonormalize seeded draws so distinct templates are exactly orthogonal.
        raw = np.stack([_seeded_rng(self.seed, "tmpl", app.app_id, t).standard_normal(self.dim)
                        for t in templates])
        basis, _ = np.linalg.qr(raw.T)
        vectors = {t: basis[:, i] for i, t in enumerate(templates)}
        for t in templates:
            twin = app.screens[t].lookalike_of
            if twin is not None:
                vectors[t] = _unit(LOOKALIKE_COSINE * vectors[twin]
                                   + np.sqrt(1 - LOOKALIKE_COSINE**2) * vectors[t])
        for t, v in vectors.items():
            self._vectors[(app.app_id, t)] = [float(x) for x in v]
            description = phrasing.page_description(app.screens[t].title, app.title)
            self._descriptions[description] = (app.app_id, t)

    def template_vector(self, app_id: str, template_id: str) -> list[float]:
        return self._vectors[(app_id, template_id)]

    def _lookup_template(self, key: str) -> tuple[str, str] | None:
        if key.startswith("tmpl:"):
            name = key[len("tmpl:"):]
            if "/" in name:
                app_id, tid = name.split("/", 1)
                return (app_id, tid) if (app_id, tid) in self._vectors else None
            hits = [k for k in self._vectors if k[1] == name]
            return hits[0] if len(hits) == 1 else None
        return self._descriptions.get(key)

    def _embed(self, text: str) -> list[float]:
        found = self._lookup_template(text)
        if found is not None:
            return self._vectors[found]
        return [float(x) for x in _unit(_seeded_rng(self.seed, "text", text).standard_normal(self.dim))]

    def _embed_screen(self, screen: ScreenRender) -> list[float]:
        return self.template_vector(screen.app_id, screen.template_id)

    # -- helpers -----------------------------------------------------------

    def _app(self, app_id: str) -> AppSpec:
        try:
            return self.apps[app_id]
        except KeyError:
            raise BackendError(f"oracle knows no app {app_id!r}") from None

    def _live(self, screen: ScreenRender) -> SimContext:
        ctx = screen.sim
        if not isinstance(ctx, SimContext):
            raise BackendError("oracle task decisions need a live simulator render")
        if ctx.step_index != ctx.session.step_count:
            raise BackendError("render is stale: the session moved on")
        return ctx

    def _plan(self, task: TaskSpec, screen: ScreenRender) -> list[DeviceAction] | None:
        ctx = self._live(screen)
        mask = ctx.session.progress(task).achieved_essential
        return self._planners[task.app_id].plan(task, ctx.session.state, mask)

    # -- exploration capabilities -------------------------------------------

    def _describe_page(self, screen: ScreenRender) -> PageDescription:
        app = self._app(screen.app_id)
        spec = app.screens[screen.template_id]
        return PageDescription(
            description=phrasing.page_description(spec.title, app.title),
            state_snapshot=dict(screen.fields),
            elements=list(screen.elements),
        )

    def _variants(self, screen: ScreenRender, element_id: str) -> list[DeviceAction]:
        app = self._app(screen.app_id)
        actions = [a for a in element_actions(app, screen.template_id) if a.target_element == element_id]
        return actions or [DeviceAction.tap(element_id)]

    def _plan_exploration(self, screen: ScreenRender, node: UiNode, outgoing, unexplored, exhausted) -> PlannedStep:
        skip = set(exhausted)
        for element in sorted(unexplored, key=lambda e: e.element_id):
            for action in self._variants(screen, element.element_id):
                instruction = phrasing.phrase(action, screen.elements)
                if instruction not in skip:
                    return PlannedStep(instruction, element.element_id)
        tried = {edge.action for edge in outgoing}
        for element in sorted(screen.elements, key=lambda e: e.element_id):
            for action in self._variants(screen, element.element_id):
                instruction = phrasing.phrase(action, screen.elements)
                if action not in tried and instruction not in skip:
                    return PlannedStep(instruction, element.element_id)
        replayable = [e for e in outgoing if e.instruction not in skip]
        if replayable:
            edge = min(replayable, key=lambda e: (e.traversal_count, id_key(e.edge_id)))
            return PlannedStep(edge.instruction, edge.action.target_element)
        raise NothingToExplore(f"nothing to explore on {node.node_id}")

    def _verify_node_match(self, current: ScreenRender, candidate: UiNode, reference: dict) -> bool:
        return (reference["app_id"], reference["template_id"]) == (current.app_id, current.template_id)

    def _ground_instruction(self, screen: ScreenRender, instruction: str) -> DeviceAction:
        return phrasing.ground(instruction, screen.elements)

    # -- runtime capabilities --------------------------------------------

    def _select_node(self, screen: ScreenRender, candidates: list[dict[str, Any]]) -> str | None:
        for candidate in candidates:
            ref = candidate.get("reference")
            if ref and (ref["app_id"], ref["template_id"]) == (screen.app_id, screen.template_id):
                return candidate["node_id"]
        return None

    @staticmethod
    def _option_params(option, action: DeviceAction) -> dict[str, str] | None | bool:
        """Params that make ``option`` perform ``action``; False when it cannot."""
        opt_action = option.action
        if opt_action == action:
            return option.params
        if (option.template and action.kind == "type_text" and opt_action.kind == "type_text"
                and opt_action.target_element == action.target_element):
            names = template_params(option.template)
            slot = next((k for k, v in (option.params or {}).items() if v == opt_action.text),
                        names[0] if names else None)
            if slot is None:
                return False
            params = dict(option.params or {})
            params[slot] = action.text
            return params
        return False

    def _select_option(self, task: TaskSpec, screen: ScreenRender, node: UiNode, options, memory) -> OptionChoice:
        plan = self._plan(task, screen)
        if plan == []:
            return OptionChoice(0)
        if plan is None:
            return OptionChoice(len(options) - 1, instruction=phrasing.BACK_INSTRUCTION)
        wanted = plan[0]
        for i, option in enumerate(options):
            if option.kind not in ("SelfLoop", "Transition"):
                continue
            params = self._option_params(option, wanted)
            if params is not False:
                return OptionChoice(i, params=params)
        return OptionChoice(len(options) - 1, instruction=phrasing.phrase(wanted, screen.elements))

    def _extract_facts(self, task: TaskSpec, screen: ScreenRender, recent_actions) -> list[str]:
        app = self._app(screen.app_id)
        relevant = set()
        for pred in (*task.essential_states, task.success):
            relevant |= set(pred.fields) | set(pred.contains)
        typed = {e.field for t in app.transitions if t.trigger.action == "type_text" for e in t.effects}
        facts = []
        for name, value in screen.fields.items():
            if name in relevant and value:
                facts.append(f"{name} '{value}' entered" if name in typed else f"{name} is {value}")
        facts.extend(app.screens[screen.template_id].facts)
        return facts[:5]

    def _fallback_plan(self, task: TaskSpec, screen: ScreenRender, history, memory) -> str:
        plan = self._plan(task, screen)
        if plan == []:
            correct = phrasing.COMPLETE_SENTINEL
        elif plan is None:
            correct = phrasing.BACK_INSTRUCTION
        else:
            correct = phrasing.phrase(plan[0], screen.elements)
        if self.fallback_accuracy >= 1.0:
            return correct
        if _coin(self.seed, "fallback", task.task_id, screen.screenshot_key) < self.fallback_accuracy:
            return correct
        app = self._app(screen.app_id)
        wrong = [phrasing.phrase(a, screen.elements)
                 for a in element_actions(app, screen.template_id, frozenset(task.literals()))]
        wrong.append(phrasing.BACK_INSTRUCTION)
        wrong = [w for w in dict.fromkeys(wrong) if w != correct]
        if not wrong:
            return correct
        rng = random.Random(f"{self.seed}:wrong:{task.task_id}:{screen.screenshot_key}")
        return rng.choice(wrong)

    # -- audit capabilities ---------------------------------------------------

    def _audit_pair(self, edge, source: UiNode, target: UiNode,
                    source_reference: dict | None, target_reference: dict | None) -> bool:
        if not source_reference or not target_reference:
            return True
        app = self._app(source_reference["app_id"])
        src, dst = source_reference["template_id"], target_reference["template_id"]
        action = edge.action
        if action.kind == "back":
            return True
        if action.kind in ("home", "open_app"):
            return dst == app.initial_screen or src == dst
        if action.kind == "wait":
            return src == dst
        element = action.target_element
        if element is None and action.kind == "type_text":
            focused = app.screens[src].focused_field()
            element = focused.element_id if focused else None
        matches = [t for t in app.transitions_from(src)
                   if t.trigger.element == element and t.trigger.action == action.kind
                   and (t.trigger.direction is None or t.trigger.direction == action.direction)]
        if any(t.target == dst for t in matches):
            return True
        # A self-loop is plausible when the action may be a dead tap.
        return src == dst and (not matches or any(t.trigger.guards for t in matches))

    def _normalize_instruction(self, edges, source_reference: dict | None) -> NormalizedGroup | None:
        first = edges[0].action
        if first.kind != "type_text" or any(e.action.text is None for e in edges):
            return None
        name = "value"
        if source_reference:
            app = self._app(source_reference["app_id"])
            for t in app.transitions_from(source_reference["template_id"]):
                if t.trigger.element == first.target_element and t.trigger.action == "type_text":
                    fields = [e.field for e in t.effects if e.value == "$text"]
                    if fields:
                        name = fields[0]
                    break
        templates = set()
        for edge in edges:
            text = edge.action.text
            if edge.instruction.count(text) != 1:
                return None
            templates.add(edge.instruction.replace(text, "{" + name + "}"))
        if len(templates) != 1:
            return None
        return NormalizedGroup(templates.pop(), [{name: e.action.text} for e in edges])
