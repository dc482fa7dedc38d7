"""Graph export (DOT), construction statistics tables, and report figures."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import EmptyInput
from .graph import KnowledgeGraph

DESCRIPTION_LIMIT = 40


def _quote(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'


def _truncate(text: str, limit: int = DESCRIPTION_LIMIT) -> str:
    return text if len(text) <= limit else text[: limit - 3] + "..."


def export_dot(graph: KnowledgeGraph) -> str:
    """DOT digraph: dashed self-loops, red unreliable edges."""
    lines = [f"digraph {_quote(graph.app_id)} {{", "  node [shape=box];"]
    for node in graph.sorted_nodes():
        label = f"{node.node_id}\n{_truncate(node.description)}"
        lines.append(f"  {_quote(node.node_id)} [label={_quote(label)}];")
    for edge in graph.sorted_edges():
        attrs = [f"label={_quote(edge.display_instruction())}"]
        if edge.is_self_loop:
            attrs.append("style=dashed")
        if not edge.reliable:
            attrs.append("color=red")
        lines.append(f"  {_quote(edge.source)} -> {_quote(edge.target)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.1f}"


@dataclass
class StatsTable:
    columns: list[str]
    rows: list[tuple[str, list[float]]]

    def row(self, name: str) -> list[float]:
        for label, values in self.rows:
            if label == name:
                return values
        raise KeyError(name)

    def average(self, name: str) -> float:
        return self.row(name)[-1]

    def summary(self) -> str:
        """Average nodes and edges as "N / E"."""
        return f"{_fmt(self.average('Nodes'))} / {_fmt(self.average('Edges'))}"

    def render(self) -> str:
        header = ["Statistic", *self.columns]
        body = [[label, *(_fmt(v) for v in values)] for label, values in self.rows]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        def line(cells):
            return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
        rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([line(header), rule, *(line(r) for r in body), "", f"Nodes / Edges: {self.summary()}"])

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": [[label, values] for label, values in self.rows],
                "summary": self.summary()}


def report_stats(graphs: Sequence[KnowledgeGraph], pre_audit: Sequence[KnowledgeGraph] | None = None) -> StatsTable:
    """Per-app and average node, edge and construction-step counts.

    ``pre_audit`` (same order) adds the raw counts before auditing.
    """
    if not graphs:
        raise EmptyInput("report_stats needs at least one graph")
    if pre_audit is not None and len(pre_audit) != len(graphs):
        raise ValueError("pre_audit must pair with graphs one to one")

    def with_average(values: list[float]) -> list[float]:
        return values + [sum(values) / len(values)]

    rows = [
        ("Nodes", with_average([len(g.nodes) for g in graphs])),
        ("Edges", with_average([len(g.edges) for g in graphs])),
    ]
    if pre_audit is not None:
        rows += [
            ("Nodes (pre-audit)", with_average([len(g.nodes) for g in pre_audit])),
            ("Edges (pre-audit)", with_average([len(g.edges) for g in pre_audit])),
        ]
    rows.append(("Construction Steps", with_average([g.exploration_steps_used for g in graphs])))
    return StatsTable([g.app_id for g in graphs] + ["Average per App"], rows)


# -- figures ---------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_bench(reports: Sequence, path: str | Path) -> Path:
    """Grouped bars of SR, ESAR and fallback rate per report."""
    plt = _pyplot()
    metrics = [("SR", "success_rate"), ("ESAR", "esar"), ("Fallback", "fallback_rate")]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(reports), 1)
    for i, report in enumerate(reports):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [getattr(report, attr) for _, attr in metrics], width, label=report.label or f"run {i + 1}")
    ax.set_xticks([j + width * (len(reports) - 1) / 2 for j in range(len(metrics))])
    ax.set_xticklabels([name for name, _ in metrics])
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_stats(table: StatsTable, path: str | Path) -> Path:
    """Nodes and edges per app."""
    plt = _pyplot()
    apps = table.columns[:-1]
    nodes, edges = table.row("Nodes")[:-1], table.row("Edges")[:-1]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(apps))
    ax.bar([x - 0.2 for x in xs], nodes, 0.4, label="Nodes")
    ax.bar([x + 0.2 for x in xs], edges, 0.4, label="Edges")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(apps)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
