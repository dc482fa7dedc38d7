"""Graph-guided task execution.

Per step: record facts, retrieve the current node, offer the node's local
options (complete, self-loops, transitions, free action), ground the chosen
instruction and act. Off-graph screens and free actions go to the one-step
fallback planner. The graph is read-only throughout.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backends.base import Backend, OptionChoice
from .errors import BackendError, GroundingFailed, KobeError
from .graph import DeviceAction, KnowledgeGraph, id_key, render_template
from .simenv.phrasing import COMPLETE_SENTINEL
from .simenv.session import ScreenRender, TaskProgress, check_task

logger = logging.getLogger(__name__)

OPTION_KINDS = ("Complete", "SelfLoop", "Transition", "FreeAction")
FACT_CAP = 50
RECENT_CAP = 3
STALL_LIMIT = 3


@dataclass(frozen=True)
class AgentOption:
    kind: str
    edge_id: str | None = None
    instruction: str = ""
    target_observation: str = ""
    delta_summary: str = ""
    action: DeviceAction | None = field(default=None, compare=False)
    template: str | None = None
    params: dict[str, str] | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in OPTION_KINDS:
            raise ValueError(f"unknown option kind {self.kind!r}")
        if (self.edge_id is not None) != (self.kind in ("SelfLoop", "Transition")):
            raise ValueError("edge_id is required exactly for SelfLoop and Transition options")

    def display(self) -> str:
        if self.kind == "Complete":
            return "Complete: the task is done"
        if self.kind == "FreeAction":
            return "FreeAction: propose one instruction not listed here"
        text = f"{self.kind}: {self.instruction} -> {self.target_observation}"
        return f"{text} [{self.delta_summary}]" if self.delta_summary else text

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "edge_id": self.edge_id,
            "instruction": self.instruction,
            "target_observation": self.target_observation,
            "delta_summary": self.delta_summary,
            "template": self.template,
            "params": self.params,
            "display": self.display(),
        }


def build_options(graph: KnowledgeGraph, node_id: str) -> list[AgentOption]:
    """[Complete] + self-loops + transitions + [FreeAction], edges in id order."""
    loops, transitions = graph.outgoing(node_id)
    options = [AgentOption("Complete")]
    for kind, edges in (("SelfLoop", loops), ("Transition", transitions)):
        for edge in edges:
            summary = "; ".join(d.summary() for d in edge.schema_delta or []) if kind == "SelfLoop" else ""
            options.append(AgentOption(
                kind=kind,
                edge_id=edge.edge_id,
                instruction=edge.display_instruction(),
                target_observation=edge.target_observation,
                delta_summary=summary,
                action=edge.action,
                template=edge.instruction_template,
                params=dict(edge.params) if edge.params else None,
            ))
    options.append(AgentOption("FreeAction"))
    return options


@dataclass
class RuntimeMemory:
    facts: list[str] = field(default_factory=list)
    executed_instructions: dict[str, int] = field(default_factory=dict)
    recent_observations: deque = field(default_factory=lambda: deque(maxlen=RECENT_CAP))

    def add_facts(self, facts: list[str]) -> None:
        for fact in facts:
            if fact in self.facts:
                continue
            self.facts.append(fact)
            if len(self.facts) > FACT_CAP:
                self.facts.pop(0)

    def record_execution(self, instruction: str) -> None:
        self.executed_instructions[instruction] = self.executed_instructions.get(instruction, 0) + 1

    def observe(self, screenshot_key: str) -> None:
        self.recent_observations.append(screenshot_key)

    def to_dict(self) -> dict[str, Any]:
        return {
            "facts": list(self.facts),
            "executed_instructions": dict(self.executed_instructions),
            "recent_observations": list(self.recent_observations),
        }


@dataclass
class StepLog:
    t: int
    node_id: str | None
    option_kind: str | None
    option_index: int | None
    edge_id: str | None
    instruction: str | None
    action: dict[str, Any] | None
    screenshot_before: str
    screenshot_after: str | None
    fallback: bool
    options: list[str] | None = None
    forced: bool = False
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def graph_guided(self) -> bool:
        return self.option_kind in ("SelfLoop", "Transition") and not self.fallback


@dataclass
class RunConfig:
    max_steps: int = 30
    k: int = 5
    stall_limit: int = STALL_LIMIT
    trace_path: str | Path | None = None


@dataclass
class TaskResult:
    task_id: str
    success: bool
    steps: int
    fallback_steps: int
    logs: list[StepLog]
    progress: TaskProgress
    stop_reason: str
    memory: RuntimeMemory
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "success": self.success,
            "steps": self.steps,
            "fallback_steps": self.fallback_steps,
            "achieved_essential": self.progress.achieved_count,
            "total_essential": self.progress.total_essential,
            "stop_reason": self.stop_reason,
            "error": self.error,
            "logs": [log.to_dict() for log in self.logs],
        }


class RetrievalIndex:
    """In-memory cosine index over node screenshot embeddings."""

    def __init__(self, graph: KnowledgeGraph, backend: Backend):
        self.node_ids: list[str] = []
        rows = []
        for node in graph.sorted_nodes():
            vector = node.visual_embedding
            if vector is None and node.reference_screenshot in graph.shots:
                vector = backend.embed_screen(ScreenRender.from_dict(graph.shots[node.reference_screenshot]))
            if vector is None:
                vector = node.embedding
            if vector is None or (rows and len(vector) != len(rows[0])):
                continue
            self.node_ids.append(node.node_id)
            rows.append(vector)
        self.matrix = np.asarray(rows, dtype=float) if rows else np.zeros((0, 0))

    def top_k(self, vector: list[float], k: int) -> list[tuple[str, float]]:
        if not self.node_ids or len(vector) != self.matrix.shape[1]:
            return []
        scores = self.matrix @ np.asarray(vector, dtype=float)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], id_key(self.node_ids[i])))
        return [(self.node_ids[i], float(scores[i])) for i in order[:k]]


def retrieve_node(graph: KnowledgeGraph, screen, backend: Backend, k: int = 5,
                  index: RetrievalIndex | None = None) -> str | None:
    """Best-matching node for the screen, or None when every candidate is rejected."""
    if not graph.nodes:
        return None
    try:
        index = index or RetrievalIndex(graph, backend)
        ranked = index.top_k(backend.embed_screen(screen), k)
        if not ranked:
            return None
        candidates = [{
            "node_id": node_id,
            "description": graph.nodes[node_id].description,
            "score": round(score, 6),
            "reference": graph.shots.get(graph.nodes[node_id].reference_screenshot),
        } for node_id, score in ranked]
        return backend.select_node(screen, candidates)
    except BackendError as exc:
        logger.info("retrieval failed, treating screen as unmatched: %s", exc)
        return None


def _edge_instruction(graph: KnowledgeGraph, option: AgentOption, choice: OptionChoice) -> str:
    edge = graph.edges[option.edge_id]
    if edge.instruction_template and choice.params:
        return render_template(edge.instruction_template, choice.params)
    return edge.instruction


def run_task(task, graph: KnowledgeGraph, session, backend: Backend,
             config: RunConfig | None = None) -> TaskResult:
    config = config or RunConfig()
    memory = RuntimeMemory()
    logs: list[StepLog] = []
    history: list[str] = []
    stalls: dict[str, int] = {}
    force_next = False
    stop_reason = "max_steps"
    error = None
    try:
        index = RetrievalIndex(graph, backend)
    except BackendError as exc:
        logger.info("could not index graph: %s", exc)
        index = None
    screen = session.current()

    def finish(reason: str) -> None:
        nonlocal stop_reason
        stop_reason = reason

    try:
        for t in range(config.max_steps):
            before = screen.screenshot_key
            memory.observe(before)
            try:
                memory.add_facts(backend.extract_facts(task, screen, history[-RECENT_CAP:]))
            except BackendError as exc:
                logger.info("record stage failed: %s", exc)
            node_id = retrieve_node(graph, screen, backend, config.k, index) if index is not None else None
            log = StepLog(t, node_id, None, None, None, None, None, before, None, fallback=False)
            logs.append(log)
            instruction = action = None
            forced = force_next
            force_next = False
            if node_id is not None and not forced:
                options = build_options(graph, node_id)
                log.options = [o.kind for o in options]
                try:
                    choice = backend.select_option(task, screen, graph.nodes[node_id], options, memory.to_dict())
                except BackendError as exc:
                    log.error = f"select_option: {exc}"
                    choice = None
                if choice is not None:
                    option = options[choice.index]
                    log.option_kind, log.option_index, log.edge_id = option.kind, choice.index, option.edge_id
                    if option.kind == "Complete":
                        finish("complete")
                        break
                    if option.edge_id is not None:
                        try:
                            instruction = _edge_instruction(graph, option, choice)
                            if stalls.get(instruction, 0) >= config.stall_limit:
                                forced = True
                                instruction = None
                            else:
                                action = backend.ground_instruction(screen, instruction)
                        except (GroundingFailed, KeyError) as exc:
                            log.error = f"edge grounding: {exc}"
                            instruction = action = None
            if action is None:
                log.fallback = True
                log.forced = forced
                instruction = backend.fallback_plan(task, screen, history, memory.to_dict())
                log.instruction = instruction
                if instruction == COMPLETE_SENTINEL:
                    finish("complete")
                    break
                if stalls.get(instruction, 0) >= config.stall_limit:
                    finish("loop_guard")
                    break
                try:
                    action = backend.ground_instruction(screen, instruction)
                except GroundingFailed as exc:
                    log.error = f"fallback grounding: {exc}"
                    continue
            log.instruction = instruction
            log.action = action.to_dict()
            screen = session.step(action)
            log.screenshot_after = screen.screenshot_key
            memory.record_execution(instruction)
            history.append(instruction)
            if screen.screenshot_key == before:
                stalls[instruction] = stalls.get(instruction, 0) + 1
                if forced:
                    finish("loop_guard")
                    break
                if stalls[instruction] >= config.stall_limit:
                    force_next = True
    except KobeError as exc:
        error = f"{type(exc).__name__}: {exc}"
        finish("error")
    progress = check_task(session, task)
    if config.trace_path:
        with open(config.trace_path, "a") as fh:
            for log in logs:
                fh.write(json.dumps({"task_id": task.task_id, **log.to_dict()}, sort_keys=True) + "\n")
    return TaskResult(
        task_id=task.task_id,
        success=progress.success,
        steps=len(logs),
        fallback_steps=sum(log.fallback for log in logs),
        logs=logs,
        progress=progress,
        stop_reason=stop_reason,
        memory=memory,
        error=error,
    )
