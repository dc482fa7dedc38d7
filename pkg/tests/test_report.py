from __future__ import annotations

import re

import pytest
from hypothesis import given, settings

from kobe.errors import EmptyInput
from kobe.graph import DeviceAction, KnowledgeGraph, UiEdge, UiNode
from kobe.report import export_dot, plot_bench, plot_stats, report_stats

from test_graph import graphs, table_graph

# -- a small DOT parser covering the subset the exporter may emit ----------------------

TOKEN = re.compile(r'\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<id>[A-Za-z_][A-Za-z0-9_.]*|-?\d+(?:\.\d+)?)'
                   r'|(?P<arrow>->)|(?P<punct>[{}\[\];,=]))')


class DotError(ValueError):
    pass


def tokenize(text):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise DotError(f"bad token at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "str":
            value = re.sub(r"\\(.)", lambda e: "\n" if e.group(1) == "n" else e.group(1), value[1:-1])
            kind = "id"
        out.append((kind, value))
        pos = m.end()
    return out


def parse_dot(text):
    """Return (name, nodes {id: attrs}, edges [(src, dst, attrs)]); raise DotError on bad syntax."""
    tokens = tokenize(text)
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else (None, None)

    def take(kind=None, value=None):
        nonlocal i
        tok = peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise DotError(f"expected {value or kind}, got {tok}")
        i += 1
        return tok[1]

    def attrs():
        found = {}
        if peek() != ("punct", "["):
            return found
        take("punct", "[")
        while peek() != ("punct", "]"):
            key = take("id")
            take("punct", "=")
            found[key] = take("id")
            if peek() == ("punct", ","):
                take("punct", ",")
        take("punct", "]")
        return found

    if take("id") != "digraph":
        raise DotError("not a digraph")
    name = take("id") if peek()[0] == "id" else None
    take("punct", "{")
    nodes, edges = {}, []
    while peek() != ("punct", "}"):
        first = take("id")
        if first in ("node", "edge", "graph") and peek() == ("punct", "["):
            attrs()
        elif peek()[0] == "arrow":
            take("arrow")
            second = take("id")
            edges.append((first, second, attrs()))
        else:
            nodes[first] = attrs()
        if peek() == ("punct", ";"):
            take("punct", ";")
    take("punct", "}")
    if i != len(tokens):
        raise DotError("trailing tokens")
    return name, nodes, edges


def test_parser_rejects_garbage():
    for bad in ['digraph "x" { "a" -> }', 'graph x { }', 'digraph x { "a" [label=] }', 'digraph x { "a"']:
        with pytest.raises(DotError):
            parse_dot(bad)


# -- export ----------------------------------------------------------------------------

def test_two_nodes_one_edge():
    g = KnowledgeGraph("demo")
    a = g.add_node(UiNode("Home screen"))
    b = g.add_node(UiNode('Search "quoted" page'))
    g.add_edge(UiEdge(a, b, DeviceAction.tap("s"), "Tap the search box"))
    name, nodes, edges = parse_dot(export_dot(g))
    assert name == "demo"
    assert set(nodes) == {a, b}
    assert nodes[b]["label"] == 'n0002\nSearch "quoted" page'
    assert edges == [(a, b, {"label": "Tap the search box"})]


def test_self_loop_dashed_unreliable_red():
    g = KnowledgeGraph("demo")
    a = g.add_node(UiNode("A"))
    b = g.add_node(UiNode("B"))
    g.add_edge(UiEdge(a, a, DeviceAction.type_text("x", "f"), "Type x"))
    bad = g.add_edge(UiEdge(a, b, DeviceAction.tap("t"), "Tap t"))
    g.edges[bad].reliable = False
    _, _, edges = parse_dot(export_dot(g))
    assert edges[0] == (a, a, {"label": "Type x", "style": "dashed"})
    assert edges[1][2]["color"] == "red"


def test_empty_graph_dot():
    name, nodes, edges = parse_dot(export_dot(KnowledgeGraph("empty")))
    assert (name, nodes, edges) == ("empty", {}, [])


def test_long_description_truncated():
    g = KnowledgeGraph("demo")
    g.add_node(UiNode("x" * 100))
    _, nodes, _ = parse_dot(export_dot(g))
    assert nodes["n0001"]["label"] == "n0001\n" + "x" * 37 + "..."


def test_templated_edge_shows_template(audited):
    _, _, edges = parse_dot(export_dot(audited["maps"]))
    assert "Type {query} into the search field" in {attrs["label"] for _, _, attrs in edges}


@settings(max_examples=100, deadline=None)
@given(graphs())
def test_dot_round_trips_structure(g):
    _, nodes, edges = parse_dot(export_dot(g))
    assert set(nodes) == set(g.nodes)
    assert [(s, t) for s, t, _ in edges] == [(e.source, e.target) for e in g.sorted_edges()]
    assert [a["label"] for _, _, a in edges] == [e.display_instruction() for e in g.sorted_edges()]


# -- stats -------------------------------------------------------------------------------

def test_stats_prints_table_values_verbatim():
    table = report_stats([table_graph(54, 226)])
    text = table.render()
    assert table.summary() == "54 / 226"
    assert "54 / 226" in text
    assert re.search(r"\| Nodes +\| 54 +\| 54 +\|", text)
    assert re.search(r"\| Edges +\| 226 +\| 226 +\|", text)
    assert [label for label, _ in table.rows] == ["Nodes", "Edges", "Construction Steps"]


def test_stats_average():
    table = report_stats([table_graph(10, 0), table_graph(20, 0)])
    assert table.average("Nodes") == 15
    assert table.columns[-1] == "Average per App"


def test_stats_with_pre_audit(explored, audited):
    names = sorted(explored)
    table = report_stats([audited[n] for n in names], [explored[n] for n in names])
    assert "Nodes (pre-audit)" in [label for label, _ in table.rows]
    with pytest.raises(ValueError):
        report_stats([audited[n] for n in names], [explored["maps"]])


def test_stats_empty():
    with pytest.raises(EmptyInput):
        report_stats([])


def test_figures_written(tmp_path, explored):
    from kobe.bench import BenchReport, TaskRow
    report = BenchReport.from_rows([TaskRow("a", "demo", True, 3, 0, 1, 1, "complete")], label="guided")
    bench_png = plot_bench([report], tmp_path / "bench.png")
    stats_png = plot_stats(report_stats(list(explored.values())), tmp_path / "stats.png")
    for path in (bench_png, stats_png):
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
