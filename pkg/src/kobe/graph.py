"""App knowledge graph: data model, invariants, persistence and queries.

A graph holds semantic UI states (nodes) and observed one-step transitions
(edges) for a single app. Node and edge ids are zero-padded monotonic
counters (``n0001``, ``e0001``) that are never reused within a graph's
lifetime, even after deletion.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import re
import tempfile
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

from .errors import (
    CorruptFile,
    DanglingEndpoint,
    DuplicateId,
    InvalidEdge,
    InvalidNode,
    NoPath,
    UnknownNode,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCREEN_WIDTH = 1080
SCREEN_HEIGHT = 2400
NORM_TOLERANCE = 1e-6

ELEMENT_KINDS = frozenset({"button", "text_field", "list_item", "toggle", "tab", "other"})
ACTION_KINDS = frozenset({"tap", "type_text", "swipe", "back", "home", "wait", "open_app"})
DIRECTIONS = frozenset({"up", "down", "left", "right"})

# Fields each action kind may carry: (required, optional).
_ACTION_FIELDS: dict[str, tuple[frozenset[str], frozenset[str]]] = {
    "tap": (frozenset(), frozenset({"target_element", "point"})),
    "type_text": (frozenset({"text"}), frozenset({"target_element"})),
    "swipe": (frozenset({"direction"}), frozenset({"target_element"})),
    "back": (frozenset(), frozenset()),
    "home": (frozenset(), frozenset()),
    "wait": (frozenset(), frozenset()),
    "open_app": (frozenset({"text"}), frozenset()),
}

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def id_key(identifier: str) -> tuple[int, str]:
    """Sort key ordering ``n0002`` before ``n0010`` and ``n10000``."""
    digits = identifier[1:]
    if digits.isdigit():
        return (int(digits), identifier)
    return (-1, identifier)


def render_template(template: str, params: dict[str, str]) -> str:
    """Substitute ``{param}`` placeholders. Raises KeyError on a missing param."""
    return _PLACEHOLDER.sub(lambda m: params[m.group(1)], template)


def template_params(template: str) -> list[str]:
    return _PLACEHOLDER.findall(template)


def is_unit(vector: Iterable[float]) -> bool:
    values = list(vector)
    if not values or not all(math.isfinite(v) for v in values):
        return False
    return abs(math.sqrt(sum(v * v for v in values)) - 1.0) <= NORM_TOLERANCE


@dataclass(frozen=True)
class UiElement:
    element_id: str
    label: str
    kind: str = "button"
    region: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "region", tuple(int(v) for v in self.region))
        if not self.element_id:
            raise InvalidNode("element_id must be non-empty")
        if self.kind not in ELEMENT_KINDS:
            raise InvalidNode(f"unknown element kind {self.kind!r}")
        if len(self.region) != 4:
            raise InvalidNode(f"element {self.element_id}: region needs 4 ints")
        left, top, right, bottom = self.region
        if not (0 <= left <= right <= SCREEN_WIDTH and 0 <= top <= bottom <= SCREEN_HEIGHT):
            raise InvalidNode(f"element {self.element_id}: region {self.region} outside screen")

    def contains(self, x: int, y: int) -> bool:
        left, top, right, bottom = self.region
        return left <= x < right and top <= y < bottom

    def to_dict(self) -> dict[str, Any]:
        return {
            "element_id": self.element_id,
            "label": self.label,
            "kind": self.kind,
            "region": list(self.region),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> UiElement:
        return cls(data["element_id"], data["label"], data.get("kind", "button"),
                   tuple(data.get("region", (0, 0, 0, 0))))


@dataclass(frozen=True)
class DeviceAction:
    """One executable device action. Only the fields its kind needs are set."""

    kind: str
    target_element: str | None = None
    point: tuple[int, int] | None = None
    text: str | None = None
    direction: str | None = None

    def __post_init__(self):
        if self.point is not None:
            object.__setattr__(self, "point", tuple(int(v) for v in self.point))
        if self.kind not in ACTION_KINDS:
            raise InvalidEdge(f"unknown action kind {self.kind!r}")
        required, optional = _ACTION_FIELDS[self.kind]
        present = {name for name in ("target_element", "point", "text", "direction")
                   if getattr(self, name) is not None}
        if missing := required - present:
            raise InvalidEdge(f"{self.kind} requires {sorted(missing)}")
        if extra := present - required - optional:
            raise InvalidEdge(f"{self.kind} does not take {sorted(extra)}")
        if self.kind == "tap" and not present:
            raise InvalidEdge("tap requires target_element or point")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise InvalidEdge(f"unknown swipe direction {self.direction!r}")

    @classmethod
    def tap(cls, element_id: str) -> DeviceAction:
        return cls("tap", target_element=element_id)

    @classmethod
    def type_text(cls, text: str, element_id: str | None = None) -> DeviceAction:
        return cls("type_text", target_element=element_id, text=text)

    @classmethod
    def swipe(cls, direction: str, element_id: str | None = None) -> DeviceAction:
        return cls("swipe", target_element=element_id, direction=direction)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        for name in ("target_element", "point", "text", "direction"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value) if name == "point" else value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DeviceAction:
        point = data.get("point")
        return cls(
            data["kind"],
            target_element=data.get("target_element"),
            point=tuple(point) if point is not None else None,
            text=data.get("text"),
            direction=data.get("direction"),
        )


@dataclass(frozen=True)
class SchemaDeltaEntry:
    field_name: str
    before: str | None = None
    after: str | None = None
    description: str = ""

    def __post_init__(self):
        if not (self.before or self.after or self.description):
            raise InvalidEdge(f"schema delta for {self.field_name!r} is empty")

    def summary(self) -> str:
        return self.description or f"{self.field_name}: {self.before!r} -> {self.after!r}"

    def to_dict(self) -> dict[str, Any]:
        return {"field_name": self.field_name, "before": self.before,
                "after": self.after, "description": self.description}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SchemaDeltaEntry:
        return cls(data["field_name"], data.get("before"), data.get("after"),
                   data.get("description", ""))


@dataclass
class UiNode:
    description: str
    state_snapshot: dict[str, str] = field(default_factory=dict)
    reference_screenshot: str = ""
    elements: list[UiElement] = field(default_factory=list)
    embedding: list[float] | None = None
    # Embedding of the reference screenshot, used by runtime retrieval.
    visual_embedding: list[float] | None = None
    visit_count: int = 1
    explored_element_ids: set[str] = field(default_factory=set)
    node_id: str = ""

    def element(self, element_id: str) -> UiElement | None:
        for element in self.elements:
            if element.element_id == element_id:
                return element
        return None

    def element_ids(self) -> set[str]:
        return {e.element_id for e in self.elements}

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "description": self.description,
            "state_snapshot": dict(self.state_snapshot),
            "reference_screenshot": self.reference_screenshot,
            "elements": [e.to_dict() for e in self.elements],
            "embedding": self.embedding,
            "visual_embedding": self.visual_embedding,
            "visit_count": self.visit_count,
            "explored_element_ids": sorted(self.explored_element_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> UiNode:
        return cls(
            node_id=data["node_id"],
            description=data["description"],
            state_snapshot=dict(data.get("state_snapshot", {})),
            reference_screenshot=data.get("reference_screenshot", ""),
            elements=[UiElement.from_dict(e) for e in data.get("elements", [])],
            embedding=data.get("embedding"),
            visual_embedding=data.get("visual_embedding"),
            visit_count=data.get("visit_count", 1),
            explored_element_ids=set(data.get("explored_element_ids", [])),
        )


@dataclass
class UiEdge:
    source: str
    target: str
    action: DeviceAction
    instruction: str
    target_observation: str = ""
    instruction_template: str | None = None
    params: dict[str, str] | None = None
    schema_delta: list[SchemaDeltaEntry] | None = None
    reliable: bool = True
    traversal_count: int = 1
    edge_id: str = ""

    @property
    def is_self_loop(self) -> bool:
        return self.source == self.target

    def display_instruction(self) -> str:
        return self.instruction_template or self.instruction

    def to_dict(self) -> dict[str, Any]:
        return {
            "edge_id": self.edge_id,
            "source": self.source,
            "target": self.target,
            "action": self.action.to_dict(),
            "instruction": self.instruction,
            "instruction_template": self.instruction_template,
            "params": self.params,
            "target_observation": self.target_observation,
            "schema_delta": ([d.to_dict() for d in self.schema_delta]
                             if self.schema_delta is not None else None),
            "reliable": self.reliable,
            "traversal_count": self.traversal_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> UiEdge:
        delta = data.get("schema_delta")
        return cls(
            edge_id=data["edge_id"],
            source=data["source"],
            target=data["target"],
            action=DeviceAction.from_dict(data["action"]),
            instruction=data["instruction"],
            instruction_template=data.get("instruction_template"),
            params=data.get("params"),
            target_observation=data.get("target_observation", ""),
            schema_delta=[SchemaDeltaEntry.from_dict(d) for d in delta] if delta is not None else None,
            reliable=data.get("reliable", True),
            traversal_count=data.get("traversal_count", 1),
        )


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    self_loop_count: int
    unreliable_count: int
    avg_out_degree: float


@dataclass
class KnowledgeGraph:
    app_id: str
    schema_version: int = SCHEMA_VERSION
    nodes: dict[str, UiNode] = field(default_factory=dict)
    edges: dict[str, UiEdge] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=lambda: {"node": 0, "edge": 0})
    embedding_dim: int | None = None
    exploration_steps_used: int = 0
    # Resumable explorer bookkeeping; opaque to the graph.
    explorer_state: dict[str, Any] | None = None
    # Reference screenshots keyed by content hash.
    shots: dict[str, dict[str, Any]] = field(default_factory=dict)
    created_at: str = field(default_factory=_now, compare=False)
    updated_at: str = field(default_factory=_now, compare=False)

    # -- mutation --------------------------------------------------------

    def _touch(self) -> None:
        self.updated_at = _now()

    def _check_vector(self, node: UiNode, vector: list[float] | None, name: str) -> None:
        if vector is None:
            return
        if not is_unit(vector):
            raise InvalidNode(f"{name} of node must be finite with unit L2 norm")
        if self.embedding_dim is not None and len(vector) != self.embedding_dim:
            raise InvalidNode(f"{name} dimension {len(vector)} != graph dimension {self.embedding_dim}")

    def validate_node(self, node: UiNode) -> None:
        ids = [e.element_id for e in node.elements]
        if len(ids) != len(set(ids)):
            raise InvalidNode("element ids must be unique within a node")
        if not node.explored_element_ids <= set(ids):
            raise InvalidNode("explored_element_ids must be a subset of element ids")
        if node.visit_count < 1:
            raise InvalidNode("visit_count must be >= 1")
        self._check_vector(node, node.embedding, "embedding")
        self._check_vector(node, node.visual_embedding, "visual_embedding")
        vectors = [v for v in (node.embedding, node.visual_embedding) if v is not None]
        if len({len(v) for v in vectors}) > 1:
            raise InvalidNode("embedding dimensions differ within a node")

    def add_node(self, node: UiNode) -> str:
        """Store ``node`` under a fresh ``n####`` id (or its explicit id) and return the id."""
        self.validate_node(node)
        if node.node_id:
            if node.node_id in self.nodes:
                raise DuplicateId(f"node id {node.node_id} already present")
            number = id_key(node.node_id)[0]
            self.counters["node"] = max(self.counters["node"], number)
        else:
            self.counters["node"] += 1
            node.node_id = f"n{self.counters['node']:04d}"
        for vector in (node.embedding, node.visual_embedding):
            if vector is not None and self.embedding_dim is None:
                self.embedding_dim = len(vector)
        self.nodes[node.node_id] = node
        self._touch()
        return node.node_id

    def find_edge(self, source: str, target: str, action: DeviceAction) -> UiEdge | None:
        for edge in self.edges.values():
            if edge.source == source and edge.target == target and edge.action == action:
                return edge
        return None

    def add_edge(self, edge: UiEdge) -> str:
        """Store ``edge``; an existing (source, target, action) edge absorbs it instead.

        Returns the id of the stored or absorbing edge.
        """
        for endpoint in (edge.source, edge.target):
            if endpoint not in self.nodes:
                raise DanglingEndpoint(f"edge endpoint {endpoint} is not a node")
        if edge.instruction_template is not None:
            try:
                rendered = render_template(edge.instruction_template, edge.params or {})
            except KeyError as exc:
                raise InvalidEdge(f"template parameter {exc} missing") from None
            if rendered != edge.instruction:
                raise InvalidEdge("template substitution does not reproduce the instruction")
        existing = self.find_edge(edge.source, edge.target, edge.action)
        if existing is not None:
            existing.traversal_count += 1
            self._touch()
            return existing.edge_id
        if edge.is_self_loop and not edge.schema_delta:
            logger.warning("self-loop on %s (%s) carries no schema delta", edge.source, edge.instruction)
        if edge.edge_id:
            if edge.edge_id in self.edges:
                raise DuplicateId(f"edge id {edge.edge_id} already present")
            self.counters["edge"] = max(self.counters["edge"], id_key(edge.edge_id)[0])
        else:
            self.counters["edge"] += 1
            edge.edge_id = f"e{self.counters['edge']:04d}"
        self.edges[edge.edge_id] = edge
        self._touch()
        return edge.edge_id

    def remove_edge(self, edge_id: str) -> UiEdge:
        edge = self.edges.pop(edge_id)
        self._touch()
        return edge

    def remove_node(self, node_id: str, repoint_to: str | None = None) -> UiNode:
        """Delete a node. Incident edges are deleted, or re-pointed to ``repoint_to``."""
        node = self.get_node(node_id)
        if repoint_to is not None:
            self.get_node(repoint_to)
        for edge in list(self.edges.values()):
            if node_id not in (edge.source, edge.target):
                continue
            if repoint_to is None:
                del self.edges[edge.edge_id]
                continue
            if edge.source == node_id:
                edge.source = repoint_to
            if edge.target == node_id:
                edge.target = repoint_to
        del self.nodes[node_id]
        self._touch()
        return node

    # -- queries ---------------------------------------------------------

    def get_node(self, node_id: str) -> UiNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id}") from None

    def sorted_nodes(self) -> list[UiNode]:
        return [self.nodes[k] for k in sorted(self.nodes, key=id_key)]

    def sorted_edges(self) -> list[UiEdge]:
        return [self.edges[k] for k in sorted(self.edges, key=id_key)]

    def outgoing(self, node_id: str) -> tuple[list[UiEdge], list[UiEdge]]:
        """Reliable outgoing edges of a node as (self_loops, transitions), each by edge id."""
        self.get_node(node_id)
        loops, transitions = [], []
        for edge in self.sorted_edges():
            if edge.source != node_id or not edge.reliable:
                continue
            (loops if edge.is_self_loop else transitions).append(edge)
        return loops, transitions

    def unexplored_elements(self, node_id: str) -> list[UiElement]:
        node = self.get_node(node_id)
        pending = [e for e in node.elements if e.element_id not in node.explored_element_ids]
        return sorted(pending, key=lambda e: e.element_id)

    def shortest_action_path(self, start: str, goal: str) -> list[UiEdge]:
        """Fewest-edge path over reliable, non-self-loop edges.

        Ties resolve to the lexicographically smallest edge-id sequence.
        """
        self.get_node(start)
        self.get_node(goal)
        if start == goal:
            return []
        usable = [e for e in self.sorted_edges() if e.reliable and not e.is_self_loop]
        incoming: dict[str, list[UiEdge]] = {}
        outgoing: dict[str, list[UiEdge]] = {}
        for edge in usable:
            incoming.setdefault(edge.target, []).append(edge)
            outgoing.setdefault(edge.source, []).append(edge)
        # Distance to goal for every node that can reach it.
        dist = {goal: 0}
        queue = deque([goal])
        while queue:
            current = queue.popleft()
            for edge in incoming.get(current, []):
                if edge.source not in dist:
                    dist[edge.source] = dist[current] + 1
                    queue.append(edge.source)
        if start not in dist:
            raise NoPath(f"no path from {start} to {goal}")
        path = []
        current = start
        while current != goal:
            # outgoing lists are in edge-id order, so the first hit is the smallest id
            edge = next(e for e in outgoing[current] if dist.get(e.target) == dist[current] - 1)
            path.append(edge)
            current = edge.target
        return path

    def stats(self) -> GraphStats:
        node_count = len(self.nodes)
        edge_count = len(self.edges)
        return GraphStats(
            node_count=node_count,
            edge_count=edge_count,
            self_loop_count=sum(e.is_self_loop for e in self.edges.values()),
            unreliable_count=sum(not e.reliable for e in self.edges.values()),
            avg_out_degree=edge_count / node_count if node_count else 0.0,
        )

    def validate(self) -> None:
        """Check every graph invariant; raises the matching GraphError."""
        for node_id, node in self.nodes.items():
            if node.node_id != node_id:
                raise InvalidNode(f"node stored under {node_id} has id {node.node_id}")
            self.validate_node(node)
        for edge_id, edge in self.edges.items():
            if edge.edge_id != edge_id:
                raise InvalidEdge(f"edge stored under {edge_id} has id {edge.edge_id}")
            for endpoint in (edge.source, edge.target):
                if endpoint not in self.nodes:
                    raise DanglingEndpoint(f"edge {edge_id} endpoint {endpoint} is not a node")
            if edge.instruction_template is not None:
                if render_template(edge.instruction_template, edge.params or {}) != edge.instruction:
                    raise InvalidEdge(f"edge {edge_id} template does not reproduce its instruction")

    def copy(self) -> KnowledgeGraph:
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        """Content hash over everything except timestamps."""
        doc = self.to_dict()
        doc["meta"].pop("created_at")
        doc["meta"].pop("updated_at")
        doc["shot_payloads"] = self.shots
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "app_id": self.app_id,
            "counters": dict(self.counters),
            "meta": {
                "created_at": self.created_at,
                "updated_at": self.updated_at,
                "embedding_dim": self.embedding_dim,
                "exploration_steps_used": self.exploration_steps_used,
                "explorer_state": self.explorer_state,
            },
            "nodes": {n.node_id: n.to_dict() for n in self.sorted_nodes()},
            "edges": {e.edge_id: e.to_dict() for e in self.sorted_edges()},
            "shots": sorted(self.shots),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], shots: dict[str, dict[str, Any]] | None = None) -> KnowledgeGraph:
        meta = data.get("meta", {})
        graph = cls(
            app_id=data["app_id"],
            schema_version=data["schema_version"],
            counters={"node": int(data["counters"]["node"]), "edge": int(data["counters"]["edge"])},
            embedding_dim=meta.get("embedding_dim"),
            exploration_steps_used=meta.get("exploration_steps_used", 0),
            explorer_state=meta.get("explorer_state"),
            shots=dict(shots or {}),
        )
        graph.nodes = {k: UiNode.from_dict(v) for k, v in data["nodes"].items()}
        graph.edges = {k: UiEdge.from_dict(v) for k, v in data["edges"].items()}
        if "created_at" in meta:
            graph.created_at = meta["created_at"]
        if "updated_at" in meta:
            graph.updated_at = meta["updated_at"]
        return graph


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def shots_dir(path: str | os.PathLike) -> Path:
    return Path(path).parent / "shots"


def save(graph: KnowledgeGraph, path: str | os.PathLike) -> None:
    """Atomically write ``graph`` to ``path``; screenshots go to a sibling ``shots/`` dir."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if graph.shots:
        shot_root = shots_dir(path)
        shot_root.mkdir(exist_ok=True)
        for key, payload in graph.shots.items():
            target = shot_root / f"{key}.json"
            if not target.exists():
                _atomic_write(target, json.dumps(payload, sort_keys=True).encode())
    blob = json.dumps(graph.to_dict(), indent=1, sort_keys=False)
    _atomic_write(path, blob.encode())


def load(path: str | os.PathLike) -> KnowledgeGraph:
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFile(f"{path} is not UTF-8", exc.start) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CorruptFile(f"{path}: {exc.msg}", offset) from None
    if not isinstance(data, dict) or "schema_version" not in data:
        raise CorruptFile(f"{path}: not a graph document")
    if data["schema_version"] != SCHEMA_VERSION:
        raise VersionMismatch(
            f"{path}: schema_version {data['schema_version']} unsupported (expected {SCHEMA_VERSION})")
    shots = {}
    shot_root = shots_dir(path)
    for key in data.get("shots", []):
        shot_path = shot_root / f"{key}.json"
        if shot_path.exists():
            shots[key] = json.loads(shot_path.read_text())
        else:
            logger.warning("screenshot %s referenced by %s is missing", key, path)
    try:
        graph = KnowledgeGraph.from_dict(data, shots)
        graph.validate()
    except (KeyError, TypeError, ValueError, InvalidNode, InvalidEdge, DanglingEndpoint) as exc:
        raise CorruptFile(f"{path}: invalid graph content ({exc})") from None
    return graph
