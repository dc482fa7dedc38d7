"""Post-hoc graph refinement: merge duplicate nodes, flag unreliable edges,
and normalize parallel edges into parameterized instruction templates.

``audit`` works on a copy and returns it only when every backend call
succeeded, so a failing backend never leaves a half-audited graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

from .backends.base import Backend
from .errors import BackendError
from .explorer import cosine, shot_of
from .graph import GraphStats, KnowledgeGraph, UiEdge, id_key, render_template
from .simenv.session import ScreenRender

logger = logging.getLogger(__name__)

AUDIT_THRESHOLD = 0.80
OVERLAP_THRESHOLD = 0.5


@dataclass
class AuditReport:
    merged_pairs: list[tuple[str, str, str]] = field(default_factory=list)
    flagged_edges: list[tuple[str, str]] = field(default_factory=list)
    templated_edges: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    before: GraphStats | None = None
    after: GraphStats | None = None

    def to_dict(self) -> dict:
        return {
            "merged_pairs": [list(p) for p in self.merged_pairs],
            "flagged_edges": [list(p) for p in self.flagged_edges],
            "templated_edges": [list(p) for p in self.templated_edges],
            "warnings": list(self.warnings),
            "before": vars(self.before) if self.before else None,
            "after": vars(self.after) if self.after else None,
        }


def _action_signature(edge: UiEdge) -> tuple:
    a = edge.action
    return (a.kind, a.target_element, a.direction, a.text, a.point)


def _outgoing_actions(graph: KnowledgeGraph) -> dict[str, set[tuple]]:
    out: dict[str, set[tuple]] = {n: set() for n in graph.nodes}
    for edge in graph.edges.values():
        out[edge.source].add(_action_signature(edge))
    return out


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def find_suspicious_pairs(graph: KnowledgeGraph, threshold: float = AUDIT_THRESHOLD,
                          overlap: float = OVERLAP_THRESHOLD) -> list[tuple[str, str, float]]:
    """Node pairs whose embeddings or outgoing actions look alike, highest score first."""
    actions = _outgoing_actions(graph)
    pairs = []
    for a, b in combinations(graph.sorted_nodes(), 2):
        sim = cosine(a.embedding, b.embedding) if a.embedding and b.embedding else 0.0
        jac = _jaccard(actions[a.node_id], actions[b.node_id])
        if sim >= threshold or jac >= overlap:
            pairs.append((a.node_id, b.node_id, max(sim, jac)))
    pairs.sort(key=lambda p: (-p[2], id_key(p[0]), id_key(p[1])))
    return pairs


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # the lower id survives
        keep, drop = sorted((ra, rb), key=id_key)
        self.parent[drop] = keep


def _merge_into(graph: KnowledgeGraph, keep: str, drop: str) -> None:
    kept, dropped = graph.nodes[keep], graph.nodes[drop]
    known = kept.element_ids()
    kept.elements.extend(e for e in dropped.elements if e.element_id not in known)
    kept.explored_element_ids |= dropped.explored_element_ids
    kept.visit_count += dropped.visit_count
    graph.remove_node(drop, repoint_to=keep)


def _dedupe_edges(graph: KnowledgeGraph) -> None:
    """Collapse edges that now share (source, target, action) into the lowest id."""
    survivors: dict[tuple, UiEdge] = {}
    for edge in graph.sorted_edges():
        key = (edge.source, edge.target, edge.action)
        if key in survivors:
            first = survivors[key]
            first.traversal_count += edge.traversal_count
            first.reliable = first.reliable and edge.reliable
            if first.schema_delta is None and edge.schema_delta:
                first.schema_delta = edge.schema_delta
            graph.remove_edge(edge.edge_id)
        else:
            survivors[key] = edge


def audit(graph: KnowledgeGraph, backend: Backend, threshold: float = AUDIT_THRESHOLD,
          normalize: bool = True) -> tuple[KnowledgeGraph, AuditReport]:
    """Merge verified duplicates, flag contradicted edges and template parallel edges."""
    result = graph.copy()
    report = AuditReport(before=graph.stats())
    uf = _UnionFind()
    for a, b, score in find_suspicious_pairs(result, threshold):
        node_a, node_b = result.nodes[a], result.nodes[b]
        shot_a, shot_b = shot_of(result, node_a), shot_of(result, node_b)
        if not shot_a or not shot_b:
            continue
        if backend.verify_node_match(ScreenRender.from_dict(shot_a), node_b, shot_b):
            if uf.find(a) != uf.find(b):
                report.merged_pairs.append((min(a, b, key=id_key), max(a, b, key=id_key),
                                            f"verified duplicate (score {score:.3f})"))
            uf.union(a, b)
    for node_id in sorted(result.nodes, key=id_key, reverse=True):
        root = uf.find(node_id)
        if root != node_id:
            _merge_into(result, root, node_id)
    _dedupe_edges(result)
    for edge in result.sorted_edges():
        if not edge.reliable:
            continue
        source, target = result.nodes[edge.source], result.nodes[edge.target]
        if not backend.audit_pair(edge, source, target, shot_of(result, source), shot_of(result, target)):
            edge.reliable = False
            report.flagged_edges.append((edge.edge_id, "target observation contradicts the endpoints"))
    if normalize:
        _normalize_into(result, backend, report, strict=True)
    result.validate()
    report.after = result.stats()
    return result, report


def _groups(graph: KnowledgeGraph) -> list[list[UiEdge]]:
    buckets: dict[tuple, list[UiEdge]] = {}
    for edge in graph.sorted_edges():
        a = edge.action
        # taps on one element with equal endpoints are already deduplicated
        if a.kind != "type_text":
            continue
        buckets.setdefault((edge.source, edge.target, a.kind, a.target_element), []).append(edge)
    return [group for group in buckets.values() if len(group) >= 2]


def _normalize_into(graph: KnowledgeGraph, backend: Backend, report: AuditReport, strict: bool) -> None:
    for group in _groups(graph):
        if all(e.instruction_template for e in group):
            continue
        source = graph.nodes[group[0].source]
        try:
            proposal = backend.normalize_instruction(group, shot_of(graph, source))
        except BackendError as exc:
            if strict:
                raise
            report.warnings.append(f"normalization of {[e.edge_id for e in group]} failed: {exc}")
            continue
        if proposal is None:
            continue
        try:
            rendered = [render_template(proposal.template, p) for p in proposal.params]
        except KeyError as exc:
            rendered = None
            report.warnings.append(f"template {proposal.template!r} misses parameter {exc}")
        if rendered != [e.instruction for e in group]:
            if rendered is not None:
                report.warnings.append(
                    f"template {proposal.template!r} does not reproduce {[e.edge_id for e in group]}; skipped")
            continue
        for edge, params in zip(group, proposal.params):
            edge.instruction_template = proposal.template
            edge.params = dict(params)
            report.templated_edges.append((edge.edge_id, proposal.template))


def normalize_edges(graph: KnowledgeGraph, backend: Backend) -> tuple[KnowledgeGraph, AuditReport]:
    """Template parallel edges on a copy; failing groups are skipped with a warning."""
    result = graph.copy()
    report = AuditReport(before=graph.stats())
    _normalize_into(result, backend, report, strict=False)
    result.validate()
    report.after = result.stats()
    return result, report
