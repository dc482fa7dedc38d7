from __future__ import annotations

import copy
from collections import deque

import pytest
from hypothesis import given, settings, strategies as st

from kobe.auditor import audit, find_suspicious_pairs, normalize_edges
from kobe.backends.base import NormalizedGroup
from kobe.backends.oracle import OracleBackend
from kobe.errors import BackendUnavailable
from kobe.graph import DeviceAction, KnowledgeGraph, UiEdge, UiNode
from kobe.simenv import SAMPLE_APPS
from kobe.simenv.truth import node_templates


def signatures(graph):
    names = node_templates(graph)
    return {(names[e.source], names[e.target], e.action) for e in graph.edges.values()}


def reachable(graph, start="n0001"):
    names = node_templates(graph)
    seen, queue = {start}, deque([start])
    while queue:
        current = queue.popleft()
        for edge in graph.outgoing(current)[0] + graph.outgoing(current)[1]:
            if edge.target not in seen:
                seen.add(edge.target)
                queue.append(edge.target)
    return {names[n] for n in seen}


def clone_nodes(graph, node_id, d):
    """Add ``d`` copies of a node, each with the original's outgoing edges and one stolen incoming edge."""
    g = graph.copy()
    original = g.nodes[node_id]
    incoming = [e for e in g.sorted_edges() if e.target == node_id and e.source != node_id]
    outgoing = [e for e in g.sorted_edges() if e.source == node_id]
    clones = []
    for i in range(d):
        twin = copy.deepcopy(original)
        twin.node_id = ""
        clone = g.add_node(twin)
        clones.append(clone)
        for edge in outgoing:
            target = clone if edge.target == node_id else edge.target
            g.add_edge(UiEdge(clone, target, edge.action, edge.instruction,
                              schema_delta=copy.deepcopy(edge.schema_delta)))
        if incoming:
            incoming[i % len(incoming)].target = clone
    g.validate()
    return g, clones


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("name, template", [("maps", "search"), ("settings", "network"), ("shop", "product")])
def test_clones_are_merged(explored, oracle, name, template, d):
    g = explored[name]
    target = next(n for n, t in node_templates(g).items() if t == template)
    cloned, clones = clone_nodes(g, target, d)
    result, report = audit(cloned, oracle)
    assert set(result.nodes) == set(g.nodes)
    assert signatures(result) == signatures(g)
    assert {drop for _, drop, _ in report.merged_pairs} == set(clones)
    assert all(keep == target for keep, _, _ in report.merged_pairs)
    assert reachable(result) == reachable(g)


def test_explored_graphs_need_no_merges(explored, audited):
    for name, g in explored.items():
        assert set(audited[name].nodes) == set(g.nodes)
        assert audited[name].stats().unreliable_count == 0


def test_audit_is_idempotent(audited, oracle):
    for g in audited.values():
        again, report = audit(g, oracle)
        assert again == g
        assert report.merged_pairs == report.flagged_edges == report.templated_edges == []


def test_audit_leaves_input_untouched(explored, oracle):
    g = explored["maps"]
    before = g.fingerprint()
    audit(clone_nodes(g, "n0002", 2)[0], oracle)
    assert g.fingerprint() == before


def test_lookalike_pair_suspicious_but_kept(explored, oracle):
    g = explored["transit"]
    names = node_templates(g)
    lookalikes = {names[a] for a, b, _ in find_suspicious_pairs(g)} | {names[b] for a, b, _ in find_suspicious_pairs(g)}
    assert {"pick_departure", "pick_destination"} <= lookalikes
    result, report = audit(g, oracle)
    assert report.merged_pairs == []
    assert len(result.nodes) == len(g.nodes)


def test_contradicted_edge_flagged(explored, oracle):
    g = explored["maps"].copy()
    names = node_templates(g)
    home = next(n for n, t in names.items() if t == "home")
    saved = next(n for n, t in names.items() if t == "saved")
    bogus = g.add_edge(UiEdge(home, saved, DeviceAction.tap("e1_search"), "Tap the search box"))
    result, report = audit(g, oracle)
    assert report.flagged_edges == [(bogus, "target observation contradicts the endpoints")]
    assert not result.edges[bogus].reliable
    assert bogus not in {e.edge_id for part in result.outgoing(home) for e in part}


def test_typing_edges_templated(audited):
    templates = {e.instruction_template for g in audited.values() for e in g.edges.values() if e.instruction_template}
    assert templates == {"Type {query} into the search field", "Type {draft} into the note text field"}
    for g in audited.values():
        for e in g.edges.values():
            if e.instruction_template:
                assert e.instruction_template.replace("{" + next(iter(e.params)) + "}",
                                                      next(iter(e.params.values()))) == e.instruction


class BadTemplates(OracleBackend):
    def _normalize_instruction(self, edges, source_reference):
        return NormalizedGroup("Type {x} somewhere", [{"x": e.action.text} for e in edges])


def test_unfaithful_template_skipped(explored, apps):
    g, report = normalize_edges(explored["maps"], BadTemplates(apps.values()))
    assert report.templated_edges == []
    assert len(report.warnings) == 1 and "does not reproduce" in report.warnings[0]
    assert all(e.instruction_template is None for e in g.edges.values())


class MissingParam(OracleBackend):
    def _normalize_instruction(self, edges, source_reference):
        return NormalizedGroup("Type {y} into the search field", [{"x": e.action.text} for e in edges])


def test_template_missing_param_skipped(explored, apps):
    g, report = normalize_edges(explored["maps"], MissingParam(apps.values()))
    assert report.templated_edges == []
    assert "misses parameter" in report.warnings[0]


class Offline(OracleBackend):
    def _normalize_instruction(self, edges, source_reference):
        raise BackendUnavailable("down")


def test_backend_failure_during_audit(explored, apps):
    g = explored["maps"]
    before = g.fingerprint()
    with pytest.raises(BackendUnavailable):
        audit(g, Offline(apps.values()))
    assert g.fingerprint() == before
    _, report = normalize_edges(g, Offline(apps.values()))
    assert "failed" in report.warnings[0]


def test_suspicious_pairs_examples():
    g = KnowledgeGraph("demo")
    a = g.add_node(UiNode("A", embedding=[1.0, 0.0]))
    b = g.add_node(UiNode("B", embedding=[0.8, 0.6]))
    c = g.add_node(UiNode("C", embedding=[0.0, 1.0]))
    # cosine(a, b) = 0.8 sits on the threshold
    assert [(x, y) for x, y, _ in find_suspicious_pairs(g)] == [(a, b)]
    for node in (a, c):
        g.add_edge(UiEdge(node, b, DeviceAction.tap("ok"), "Tap the ok button"))
    pairs = find_suspicious_pairs(g)
    assert [(x, y) for x, y, _ in pairs] == [(a, c), (a, b)]
    assert pairs[0][2] == 1.0


def test_no_embeddings_no_overlap():
    g = KnowledgeGraph("demo")
    g.add_node(UiNode("A"))
    g.add_node(UiNode("B"))
    assert find_suspicious_pairs(g) == []


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(SAMPLE_APPS), st.integers(0, 20), st.integers(1, 3))
def test_merging_preserves_reachability(explored, oracle, name, pick, d):
    g = explored[name]
    node_id = sorted(g.nodes)[pick % len(g.nodes)]
    cloned, _ = clone_nodes(g, node_id, d)
    result, _ = audit(cloned, oracle)
    before, after = cloned.stats(), result.stats()
    assert after.node_count <= before.node_count and after.edge_count <= before.edge_count
    assert reachable(result) == reachable(cloned) == reachable(g)
    assert result.stats().node_count == len(g.nodes)
