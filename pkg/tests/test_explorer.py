from __future__ import annotations

import json

import pytest

from kobe.backends.oracle import OracleBackend
from kobe.errors import NoCandidate, NothingToExplore
from kobe.explorer import (ExplorationConfig, explore, identify_or_create, navigate_to, observe, plan_next_action,
                           reexplore_target, schema_delta)
from kobe.graph import DeviceAction, KnowledgeGraph, SchemaDeltaEntry, UiEdge, UiElement, UiNode, load
from kobe.simenv import app_from_dict, compare_to_truth, reset, sample_app_path, template_render
from kobe.simenv.spec import app_from_dict as parse_app
from kobe.simenv.truth import node_templates

from conftest import explore_app, linear_spec

TAP = DeviceAction.tap


def node_of(graph, template):
    return next(n for n, t in node_templates(graph).items() if t == template)


# -- identification ------------------------------------------------------------

def test_empty_graph_creates_first_node(apps, oracle):
    g = KnowledgeGraph("maps")
    outcome = identify_or_create(g, observe(template_render(apps["maps"], "home"), oracle), oracle)
    assert (outcome.kind, outcome.node_id) == ("Created", "n0001")
    assert g.nodes["n0001"].reference_screenshot in g.shots


def test_revisit_with_new_content_matches(apps, oracle):
    g = KnowledgeGraph("maps")
    session, _ = reset(apps["maps"])
    search = session.step(TAP("e1_search"))
    identify_or_create(g, observe(search, oracle), oracle)
    typed = session.step(DeviceAction.type_text("Pizza", "e1_field"))
    outcome = identify_or_create(g, observe(typed, oracle), oracle)
    assert outcome.kind == "Matched" and outcome.verified
    node = g.nodes[outcome.node_id]
    assert node.visit_count == 2
    # the first description stays, the snapshot follows the latest visit
    assert node.description == "Search page of Maps"
    assert node.state_snapshot == {"query": "Pizza"}


def test_lookalike_verification_false_creates(apps, oracle):
    g = KnowledgeGraph("transit")
    identify_or_create(g, observe(template_render(apps["transit"], "pick_departure"), oracle), oracle)
    outcome = identify_or_create(g, observe(template_render(apps["transit"], "pick_destination"), oracle), oracle)
    assert outcome.kind == "Created"
    assert outcome.similarity == pytest.approx(0.91, abs=1e-6)
    assert not outcome.verified
    assert len(g.nodes) == 2


def test_low_similarity_skips_verification(apps):
    calls = []

    class Counting(OracleBackend):
        def _verify_node_match(self, **kw):
            calls.append(kw)
            return super()._verify_node_match(**kw)

    backend = Counting(apps.values())
    g = KnowledgeGraph("maps")
    identify_or_create(g, observe(template_render(apps["maps"], "home"), backend), backend)
    identify_or_create(g, observe(template_render(apps["maps"], "search"), backend), backend)
    assert calls == []
    assert len(g.nodes) == 2


# -- planning ------------------------------------------------------------------

def test_plan_picks_lowest_unexplored(apps, oracle):
    render = template_render(apps["settings"], "main")
    g = KnowledgeGraph("settings")
    node = g.add_node(UiNode("Settings", elements=list(render.elements)))
    step = plan_next_action(g, node, oracle, render)
    assert "settings" in step.instruction
    assert step.target_element == "e1_net"


def test_plan_replays_least_traversed(apps, oracle):
    render = template_render(apps["settings"], "main")
    g = KnowledgeGraph("settings")
    main = g.add_node(UiNode("Settings", elements=list(render.elements),
                             explored_element_ids={e.element_id for e in render.elements}))
    counts = {"e1_net": 3, "e2_disp": 1, "e3_about": 2}
    for eid, n in counts.items():
        target = g.add_node(UiNode(eid))
        edge = g.add_edge(UiEdge(main, target, TAP(eid), f"Tap the {render.element(eid).label}"))
        g.edges[edge].traversal_count = n
    step = plan_next_action(g, main, oracle, render)
    assert step.instruction == "Tap the display settings"


def test_plan_empty_node(apps, oracle):
    g = KnowledgeGraph("maps")
    node = g.add_node(UiNode("Blank"))
    with pytest.raises(NothingToExplore):
        plan_next_action(g, node, oracle, template_render(apps["maps"], "home"))


# -- re-exploration targets --------------------------------------------------------

def elements(n):
    return [UiElement(f"b{i}", f"button {i}") for i in range(n)]


def test_reexplore_lowest_ratio():
    g = KnowledgeGraph("demo")
    g.add_node(UiNode("B", elements=elements(4), explored_element_ids={"b0", "b1", "b2"}))
    a = g.add_node(UiNode("A", elements=elements(5), explored_element_ids={"b0"}))
    assert reexplore_target(g) == a


def test_reexplore_all_explored():
    g = KnowledgeGraph("demo")
    g.add_node(UiNode("A", elements=elements(2), explored_element_ids={"b0", "b1"}))
    g.add_node(UiNode("empty"))
    with pytest.raises(NoCandidate):
        reexplore_target(g)


def test_reexplore_tie_prefers_fewer_visits():
    g = KnowledgeGraph("demo")
    g.add_node(UiNode("A", elements=elements(2), explored_element_ids={"b0"}, visit_count=4))
    b = g.add_node(UiNode("B", elements=elements(4), explored_element_ids={"b0", "b1"}, visit_count=2))
    assert reexplore_target(g) == b
    assert reexplore_target(g, exclude={b}) == "n0001"


def test_schema_delta_diff():
    delta = schema_delta({"wifi": "off", "bt": "off"}, {"wifi": "on", "bt": "off"})
    assert delta == [SchemaDeltaEntry("wifi", "off", "on", "wifi changes from 'off' to 'on'")]
    assert schema_delta({"a": "1"}, {"a": "1"}) == []


# -- exploration runs ----------------------------------------------------------------

def test_linear_app_matches_truth():
    app = app_from_dict(linear_spec())
    backend = OracleBackend([app])
    g = explore_app(app, backend, budget=20)
    coverage = compare_to_truth(g, app)
    assert coverage.node_recall == 1.0 and coverage.edge_recall == 1.0
    assert coverage.extra_edges == 0 and coverage.duplicate_nodes == 0
    assert (len(g.nodes), len(g.edges)) == (3, 3)


def test_budget_one(tmp_path, apps, oracle):
    path = tmp_path / "g.json"
    g = explore_app(apps["maps"], oracle, budget=1, save_path=path)
    assert 1 <= len(g.nodes) <= 2 and len(g.edges) <= 1
    assert load(path) == g
    assert g.exploration_steps_used == 1


@pytest.mark.parametrize("name", ["maps", "settings", "transit", "notes", "shop"])
def test_one_action_per_step(apps, oracle, name):
    app = apps[name]
    session, _ = reset(app)
    budget = 2 * len(app.transitions)
    g = explore(session, KnowledgeGraph(name), ExplorationConfig(budget), oracle)
    assert session.step_count == g.exploration_steps_used == budget
    assert len(g.explorer_state["actions"]) == budget


def test_trace_edges_follow_identified_nodes(tmp_path, apps, oracle):
    trace = tmp_path / "trace.jsonl"
    g = explore_app(apps["transit"], oracle, trace_path=trace)
    lines = [json.loads(line) for line in trace.read_text().splitlines()]
    assert [line["step"] for line in lines] == list(range(1, g.exploration_steps_used + 1))
    previous = "n0001"
    for line in lines:
        assert line["node"] == previous
        previous = line["target"]
        if line["edge"] is not None:
            edge = g.edges[line["edge"]]
            assert (edge.source, edge.target) == (line["node"], line["target"])


def test_self_loops_carry_deltas(explored):
    loops = [e for g in explored.values() for e in g.edges.values() if e.is_self_loop]
    assert len(loops) >= 8
    assert all(e.schema_delta for e in loops)


def test_saved_file_valid_after_every_step(tmp_path, apps, oracle):
    path = tmp_path / "g.json"
    seen = []

    def check(step):
        g = load(path)
        g.validate()
        seen.append(g.exploration_steps_used == step)

    session, _ = reset(apps["notes"])
    explore(session, KnowledgeGraph("notes"), ExplorationConfig(28, save_path=path), oracle, on_step=check)
    assert seen == [True] * 28


class Interrupt(Exception):
    pass


def test_resume_at_every_step_notes(tmp_path, apps, oracle):
    app = apps["notes"]
    budget = 4 * len(app.transitions)
    reference = explore_app(app, oracle, budget=budget)
    path = tmp_path / "g.json"
    for k in range(1, budget):
        def stop(step, k=k):
            if step == k:
                raise Interrupt

        session, _ = reset(app)
        with pytest.raises(Interrupt):
            explore(session, KnowledgeGraph("notes"), ExplorationConfig(budget, save_path=path), oracle, on_step=stop)
        session, _ = reset(app)
        resumed = explore(session, load(path), ExplorationConfig(budget, save_path=path), oracle)
        assert resumed == reference, k
        assert load(path) == reference, k


def test_resume_rejects_foreign_session(apps, oracle):
    g = explore_app(apps["maps"], oracle, budget=3)
    session, _ = reset(apps["maps"])
    session.step(DeviceAction("back"))
    with pytest.raises(ValueError):
        explore(session, g, ExplorationConfig(6), oracle)


@pytest.mark.parametrize("threshold", [0.6, 0.95])
def test_threshold_insensitive(apps, oracle, threshold):
    for name in ("maps", "transit"):
        g = explore_app(apps[name], oracle, similarity_threshold=threshold)
        coverage = compare_to_truth(g, apps[name])
        assert (coverage.node_recall, coverage.edge_recall, coverage.duplicate_nodes) == (1.0, 1.0, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ExplorationConfig(0)
    with pytest.raises(ValueError):
        ExplorationConfig(5, similarity_threshold=1.5)
    with pytest.raises(ValueError):
        ExplorationConfig(5, reexplore_interval=0)


# -- navigation ----------------------------------------------------------------------

def test_navigate_one_edge(apps, oracle, explored):
    g = explored["maps"]
    session, _ = reset(apps["maps"])
    assert navigate_to(session, g, node_of(g, "saved"), oracle)
    assert session.current().template_id == "saved"


def test_navigate_guarded_path_fails(apps, oracle, explored):
    # the shortest path skips the typing self-loop, so the search button stays dead
    g = explored["maps"]
    session, _ = reset(apps["maps"])
    results = node_of(g, "results")
    assert len(g.shortest_action_path(node_of(g, "home"), results)) == 2
    assert not navigate_to(session, g, results, oracle)
    assert session.current().template_id == "search"


def test_navigate_two_edges(apps, oracle, explored):
    g = explored["settings"]
    session, _ = reset(apps["settings"])
    session.step(TAP("e1_net"))
    display = node_of(g, "display")
    assert len(g.shortest_action_path(node_of(g, "network"), display)) == 2
    assert navigate_to(session, g, display, oracle)
    assert session.step_count == 3


def test_navigate_to_current(apps, oracle, explored):
    g = explored["maps"]
    session, _ = reset(apps["maps"])
    assert navigate_to(session, g, node_of(g, "home"), oracle)
    assert session.step_count == 0


def test_navigate_fails_after_app_change(explored):
    spec = json.loads(sample_app_path("maps").read_text())
    # the search box now opens the saved list
    spec["transitions"][0]["to"] = "saved"
    changed = parse_app(spec)
    backend = OracleBackend([changed])
    g = explored["maps"]
    session, _ = reset(changed)
    assert not navigate_to(session, g, node_of(g, "search"), backend)
    assert session.current().template_id == "saved"
    assert session.step_count == 1
