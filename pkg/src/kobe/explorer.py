"""Autonomous exploration: observe, identify, plan, act, record.

Each loop iteration issues exactly one device action and saves the graph, so
an interrupted run can resume from the file. Resumption replays the stored
action log on a fresh session, which restores the simulator (including its
RNG) to the interrupted state; the replayed steps do not consume budget.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .backends.base import Backend, PlannedStep
from .errors import GroundingFailed, NoCandidate, NoPath, NothingToExplore
from .graph import DeviceAction, KnowledgeGraph, SchemaDeltaEntry, UiEdge, UiElement, UiNode, id_key, save
from .simenv.phrasing import HOME_INSTRUCTION

logger = logging.getLogger(__name__)


@dataclass
class ExplorationConfig:
    step_budget: int
    similarity_threshold: float = 0.85
    reexplore_interval: int = 25
    save_path: str | Path | None = None
    seed: int = 0
    trace_path: str | Path | None = None

    def __post_init__(self):
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")
        if not 0 < self.similarity_threshold < 1:
            raise ValueError("similarity_threshold must lie in (0, 1)")
        if self.reexplore_interval < 1:
            raise ValueError("reexplore_interval must be >= 1")


@dataclass(frozen=True)
class IdentifyOutcome:
    kind: str  # "Matched" or "Created"
    node_id: str
    similarity: float
    verified: bool

    def __post_init__(self):
        if self.kind not in ("Matched", "Created"):
            raise ValueError(f"unknown outcome kind {self.kind!r}")


@dataclass
class ScreenObservation:
    """One observation x_t: the render plus what the backend made of it."""

    render: Any
    description: str
    state_snapshot: dict[str, str]
    elements: list[UiElement]
    embedding: list[float]
    visual_embedding: list[float] | None = None


def observe(screen, backend: Backend) -> ScreenObservation:
    page = backend.describe_page(screen)
    return ScreenObservation(
        render=screen,
        description=page.description,
        state_snapshot=dict(page.state_snapshot),
        elements=list(page.elements),
        embedding=backend.embed(page.description),
        visual_embedding=backend.embed_screen(screen),
    )


def cosine(a, b) -> float:
    # both sides are unit vectors by construction
    return float(sum(x * y for x, y in zip(a, b)))


def shot_of(graph: KnowledgeGraph, node: UiNode) -> dict | None:
    return graph.shots.get(node.reference_screenshot)


def identify_or_create(graph: KnowledgeGraph, observation: ScreenObservation, backend: Backend,
                       threshold: float = 0.85) -> IdentifyOutcome:
    """Match the observation to its most similar node, or add a new node."""
    best, best_sim = None, -math.inf
    for node in graph.sorted_nodes():
        if node.embedding is None:
            continue
        sim = cosine(observation.embedding, node.embedding)
        if sim > best_sim:
            best, best_sim = node, sim
    verified = False
    if best is not None and best_sim >= threshold:
        verified = backend.verify_node_match(observation.render, best, shot_of(graph, best))
        if verified:
            best.visit_count += 1
            best.state_snapshot = dict(observation.state_snapshot)
            known = best.element_ids()
            best.elements.extend(e for e in observation.elements if e.element_id not in known)
            graph._touch()
            return IdentifyOutcome("Matched", best.node_id, best_sim, True)
    render = observation.render
    graph.shots.setdefault(render.screenshot_key, render.to_dict())
    node_id = graph.add_node(UiNode(
        description=observation.description,
        state_snapshot=dict(observation.state_snapshot),
        reference_screenshot=render.screenshot_key,
        elements=list(observation.elements),
        embedding=list(observation.embedding),
        visual_embedding=list(observation.visual_embedding) if observation.visual_embedding else None,
    ))
    return IdentifyOutcome("Created", node_id, best_sim if best is not None else 0.0, verified)


def plan_next_action(graph: KnowledgeGraph, node_id: str, backend: Backend, screen,
                     exhausted: list[str] | tuple[str, ...] = ()) -> PlannedStep:
    node = graph.get_node(node_id)
    loops, transitions = graph.outgoing(node_id)
    if not node.elements and not loops and not transitions:
        raise NothingToExplore(f"{node_id} has no elements and no outgoing edges")
    return backend.plan_exploration(screen, node, loops + transitions,
                                    graph.unexplored_elements(node_id), exhausted)


def reexplore_target(graph: KnowledgeGraph, exclude: frozenset[str] | set[str] = frozenset()) -> str:
    """Node with the lowest explored-element ratio; ties by visit_count then id."""
    best_key, best = None, None
    for node in graph.sorted_nodes():
        if not node.elements or node.node_id in exclude:
            continue
        ratio = len(node.explored_element_ids) / len(node.elements)
        if ratio >= 1.0:
            continue
        key = (ratio, node.visit_count, id_key(node.node_id))
        if best_key is None or key < best_key:
            best_key, best = key, node.node_id
    if best is None:
        raise NoCandidate("every node is fully explored")
    return best


def schema_delta(before: dict[str, str], after: dict[str, str]) -> list[SchemaDeltaEntry]:
    entries = []
    for name in list(before) + [k for k in after if k not in before]:
        old, new = before.get(name), after.get(name)
        if old != new:
            entries.append(SchemaDeltaEntry(name, old, new, f"{name} changes from {old!r} to {new!r}"))
    return entries


def _explored_element(node: UiNode, action: DeviceAction) -> str | None:
    element = action.target_element
    if element is None and action.kind == "type_text":
        fields = [e for e in node.elements if e.kind == "text_field"]
        element = fields[0].element_id if fields else None
    return element if element is not None and node.element(element) is not None else None


class Explorer:
    """Stepwise explorer over one session and one graph."""

    def __init__(self, session, graph: KnowledgeGraph, config: ExplorationConfig, backend: Backend,
                 on_step: Callable[[int], None] | None = None):
        self.session = session
        self.graph = graph
        self.config = config
        self.backend = backend
        self.on_step = on_step
        self.screen = None

    # -- state ---------------------------------------------------------------

    @property
    def state(self) -> dict[str, Any]:
        return self.graph.explorer_state

    def _start(self) -> None:
        if self.graph.explorer_state is None:
            if self.session.step_count != 0:
                raise ValueError("exploration must start from a fresh session")
            self.graph.explorer_state = {"current": None, "actions": [], "exhausted": {}, "nav": None,
                                         "blocked": []}
        actions = self.state["actions"]
        if self.session.step_count == 0 and actions:
            for data in actions:
                self.session.step(DeviceAction.from_dict(data))
        elif self.session.step_count != len(actions):
            raise ValueError("session does not match the graph's action log")
        self.screen = self.session.current()
        if self.state["current"] is None:
            outcome = identify_or_create(self.graph, observe(self.screen, self.backend), self.backend,
                                         self.config.similarity_threshold)
            self.state["current"] = outcome.node_id
            self._save()

    def _save(self) -> None:
        if self.config.save_path:
            save(self.graph, self.config.save_path)

    def _trace(self, entry: dict[str, Any]) -> None:
        if self.config.trace_path:
            with open(self.config.trace_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _block(self, target: str) -> None:
        # unreachable for now; unblocked as soon as the graph learns something new
        self.state["blocked"].append(target)
        self.state["nav"] = None

    def _exhaust(self, instruction: str) -> None:
        self.state["exhausted"].setdefault(self.screen.screenshot_key, []).append(instruction)

    # -- decisions -----------------------------------------------------------

    def _start_navigation(self, current: str) -> bool:
        try:
            target = reexplore_target(self.graph, set(self.state["blocked"]))
        except NoCandidate:
            return False
        if target == current:
            return False
        try:
            path = self.graph.shortest_action_path(current, target)
        except NoPath:
            # nothing leads there from here; restart the app and route from its first screen
            self.state["nav"] = {"target": target, "path": [], "restart": True}
            return True
        self.state["nav"] = {"target": target, "path": [e.edge_id for e in path], "restart": False}
        return True

    def _decide(self) -> tuple[str, DeviceAction, str, str | None] | None:
        """(mode, action, instruction, expected node) for the next step, or None to retry."""
        current = self.state["current"]
        nav = self.state["nav"]
        if nav is None and self.graph.exploration_steps_used % self.config.reexplore_interval == 0 \
                and self.graph.exploration_steps_used > 0:
            self._start_navigation(current)
            nav = self.state["nav"]
        if nav is not None:
            if nav["restart"]:
                return "restart", DeviceAction("home"), HOME_INSTRUCTION, None
            edge = self.graph.edges.get(nav["path"][0]) if nav["path"] else None
            exhausted = self.state["exhausted"].get(self.screen.screenshot_key, [])
            if edge is not None and edge.reliable and edge.source == current \
                    and edge.instruction not in exhausted:
                return "navigate", edge.action, edge.instruction, edge.target
            self._block(nav["target"])
        exhausted = self.state["exhausted"].get(self.screen.screenshot_key, [])
        try:
            step = plan_next_action(self.graph, current, self.backend, self.screen, exhausted)
        except NothingToExplore:
            step = None
        loops, transitions = self.graph.outgoing(current)
        replay = step is not None and any(e.instruction == step.instruction for e in loops + transitions)
        if (step is None or replay) and self._start_navigation(current):
            return None
        if step is None:
            return "restart", DeviceAction("home"), HOME_INSTRUCTION, None
        try:
            action = self.backend.ground_instruction(self.screen, step.instruction)
        except GroundingFailed:
            logger.info("could not ground %r; skipping it on this screen", step.instruction)
            self._exhaust(step.instruction)
            return None
        return "plan", action, step.instruction, None

    # -- one step -----------------------------------------------------------

    def step(self) -> None:
        decision = None
        for _ in range(1000):
            decision = self._decide()
            if decision is not None:
                break
        if decision is None:
            raise NothingToExplore("explorer could not settle on an action")
        mode, action, instruction, expected = decision
        source_id = self.state["current"]
        before = self.screen
        after = self.session.step(action)
        self.graph.exploration_steps_used += 1
        self.state["actions"].append(action.to_dict())
        self.screen = after
        known = (self.graph.counters["node"], self.graph.counters["edge"])
        outcome = identify_or_create(self.graph, observe(after, self.backend), self.backend,
                                     self.config.similarity_threshold)
        target_id = outcome.node_id
        self.state["current"] = target_id
        edge_id = None
        source = self.graph.nodes[source_id]
        if mode == "restart":
            nav = self.state["nav"]
            if nav is not None:
                nav["restart"] = False
                try:
                    nav["path"] = [e.edge_id for e in self.graph.shortest_action_path(target_id, nav["target"])]
                except NoPath:
                    self._block(nav["target"])
                if self.state["nav"] is not None and not nav["path"]:
                    self.state["nav"] = None
        else:
            element = _explored_element(source, action)
            if element is not None:
                source.explored_element_ids.add(element)
            if target_id == source_id and after.screenshot_key == before.screenshot_key:
                # dead action: nothing to record, and not worth repeating here
                self._exhaust(instruction)
            else:
                delta = schema_delta(dict(before.fields), dict(after.fields)) if target_id == source_id else None
                target = self.graph.nodes[target_id]
                observation = (f"Stays on {target.description} with updated state" if target_id == source_id
                               else f"Opens {target.description}")
                edge_id = self.graph.add_edge(UiEdge(
                    source=source_id, target=target_id, action=action, instruction=instruction,
                    target_observation=observation, schema_delta=delta or None,
                ))
            if mode == "navigate":
                nav = self.state["nav"]
                if target_id != expected:
                    logger.info("navigation to %s diverged at %s", nav["target"], target_id)
                    self._block(nav["target"])
                else:
                    nav["path"].pop(0)
                    if not nav["path"]:
                        self.state["nav"] = None
        if (self.graph.counters["node"], self.graph.counters["edge"]) != known:
            self.state["blocked"] = []
        self._save()
        self._trace({"step": self.graph.exploration_steps_used, "mode": mode, "node": source_id,
                     "target": target_id, "action": action.to_dict(), "instruction": instruction,
                     "edge": edge_id, "outcome": outcome.kind})
        if self.on_step is not None:
            self.on_step(self.graph.exploration_steps_used)

    def run(self) -> KnowledgeGraph:
        self._start()
        while self.graph.exploration_steps_used < self.config.step_budget:
            self.step()
        return self.graph


def explore(session, graph: KnowledgeGraph, config: ExplorationConfig, backend: Backend,
            on_step: Callable[[int], None] | None = None) -> KnowledgeGraph:
    """Explore until the step budget is spent. ``graph`` may be a saved partial run.

    The graph is saved after every step when ``config.save_path`` is set, so
    any exception leaves a loadable partial graph behind.
    """
    return Explorer(session, graph, config, backend, on_step).run()


def navigate_to(session, graph: KnowledgeGraph, target: str, backend: Backend,
                threshold: float = 0.85) -> bool:
    """Replay the shortest known path to ``target``, re-identifying after each step.

    Returns False as soon as an identification leaves the path. The graph is
    treated as read-only here; no nodes or edges are recorded.
    """
    screen = session.current()
    current = _identify_readonly(graph, screen, backend, threshold)
    if current is None:
        return False
    if current == target:
        return True
    for edge in graph.shortest_action_path(current, target):
        screen = session.step(edge.action)
        if _identify_readonly(graph, screen, backend, threshold) != edge.target:
            return False
    return True


def _identify_readonly(graph: KnowledgeGraph, screen, backend: Backend, threshold: float) -> str | None:
    observation = observe(screen, backend)
    ranked = sorted((node for node in graph.nodes.values() if node.embedding is not None),
                    key=lambda n: (-cosine(observation.embedding, n.embedding), id_key(n.node_id)))
    for node in ranked[:1]:
        if cosine(observation.embedding, node.embedding) >= threshold and \
                backend.verify_node_match(screen, node, shot_of(graph, node)):
            return node.node_id
    return None
