"""Ground-truth graphs derived from app specs, and graph-vs-truth comparison."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..graph import DeviceAction, KnowledgeGraph, SchemaDeltaEntry, UiEdge, UiNode
from .phrasing import page_description, phrase
from .session import template_render
from .spec import AppSpec, TransitionSpec, validate_app

# (source template, target template, action kind, target element, direction)
EdgeKey = tuple[str, str, str, str | None, str | None]


def reachable_templates(app: AppSpec) -> list[str]:
    """Templates reachable from the initial screen, in BFS order (guards ignored)."""
    order = [app.initial_screen]
    seen = {app.initial_screen}
    queue = deque(order)
    while queue:
        current = queue.popleft()
        for t in app.transitions_from(current):
            if t.target not in seen:
                seen.add(t.target)
                order.append(t.target)
                queue.append(t.target)
    return order


def canonical_action(app: AppSpec, transition: TransitionSpec) -> DeviceAction:
    trig = transition.trigger
    if trig.action == "tap":
        return DeviceAction.tap(trig.element)
    if trig.action == "type_text":
        screen = app.screens[transition.source]
        text = screen.inputs.get(trig.element, ("text",))[0]
        return DeviceAction.type_text(text, trig.element)
    return DeviceAction.swipe(trig.direction or "up", trig.element)


def _effect_delta(transition: TransitionSpec) -> list[SchemaDeltaEntry]:
    entries = []
    for effect in transition.effects:
        if effect.op == "clear":
            desc = f"clear {effect.field}"
        elif effect.value == "$text":
            desc = f"{effect.op} {effect.field} to the typed text"
        else:
            desc = f"{effect.op} {effect.field} to {effect.value!r}"
        entries.append(SchemaDeltaEntry(effect.field, description=desc))
    return entries


def ground_truth_graph(app: AppSpec) -> KnowledgeGraph:
    """One node per reachable template, one edge per reachable transition."""
    validate_app(app)
    graph = KnowledgeGraph(app_id=app.app_id)
    node_of: dict[str, str] = {}
    for tid in reachable_templates(app):
        screen = app.screens[tid]
        render = template_render(app, tid)
        graph.shots[render.screenshot_key] = render.to_dict()
        node_of[tid] = graph.add_node(UiNode(
            description=page_description(screen.title, app.title),
            state_snapshot=dict(render.fields),
            reference_screenshot=render.screenshot_key,
            elements=list(screen.elements),
            explored_element_ids={e for e in screen.affordances},
        ))
    for t in app.transitions:
        if t.source not in node_of:
            continue
        action = canonical_action(app, t)
        target_title = app.screens[t.target].title
        graph.add_edge(UiEdge(
            source=node_of[t.source],
            target=node_of[t.target],
            action=action,
            instruction=phrase(action, app.screens[t.source].elements),
            target_observation=(f"Stays on {target_title} with updated state" if t.is_self
                                else f"Opens {target_title}"),
            schema_delta=_effect_delta(t) if t.is_self and t.effects else None,
        ))
    return graph


def node_templates(graph: KnowledgeGraph) -> dict[str, str | None]:
    """Map node ids to simulator templates via their reference screenshots."""
    out = {}
    for node_id, node in graph.nodes.items():
        shot = graph.shots.get(node.reference_screenshot)
        out[node_id] = shot.get("template_id") if shot else None
    return out


def edge_keys(graph: KnowledgeGraph, reliable_only: bool = False) -> set[EdgeKey]:
    templates = node_templates(graph)
    keys = set()
    for edge in graph.edges.values():
        if reliable_only and not edge.reliable:
            continue
        src, dst = templates.get(edge.source), templates.get(edge.target)
        if src is None or dst is None:
            continue
        keys.add((src, dst, edge.action.kind, edge.action.target_element, edge.action.direction))
    return keys


@dataclass(frozen=True)
class Coverage:
    node_recall: float
    edge_recall: float
    missing_templates: tuple[str, ...]
    missing_edges: tuple[EdgeKey, ...]
    extra_edges: int
    duplicate_nodes: int


def compare_to_truth(graph: KnowledgeGraph, app: AppSpec) -> Coverage:
    truth = ground_truth_graph(app)
    truth_templates = set(node_templates(truth).values())
    found = [t for t in node_templates(graph).values() if t is not None]
    truth_edges = edge_keys(truth)
    got_edges = edge_keys(graph)
    missing_t = sorted(truth_templates - set(found))
    missing_e = sorted(truth_edges - got_edges, key=str)
    return Coverage(
        node_recall=1 - len(missing_t) / len(truth_templates),
        edge_recall=1 - len(missing_e) / len(truth_edges) if truth_edges else 1.0,
        missing_templates=tuple(missing_t),
        missing_edges=tuple(missing_e),
        extra_edges=len(got_edges - truth_edges),
        duplicate_nodes=len(found) - len(set(found)),
    )
