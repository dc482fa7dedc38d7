"""The backend contract every model-dependent capability goes through.

Callers use the typed methods (``describe_page``, ``select_option``...);
each builds a :class:`BackendRequest`, checks its payload against the
capability's declared fields, dispatches to the implementation's
``_<capability>`` handler, validates the response at the boundary and
optionally records a transcript line.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from ..errors import BackendError, EmptyInput, MalformedResponse, MissingReference
from ..graph import DeviceAction, UiElement, UiNode, is_unit

logger = logging.getLogger(__name__)

# capability -> payload fields it requires
CAPABILITIES: dict[str, tuple[str, ...]] = {
    "describe_page": ("screen",),
    "embed": ("text",),
    "embed_screen": ("screen",),
    "plan_exploration": ("screen", "node", "outgoing", "unexplored", "exhausted"),
    "verify_node_match": ("current", "candidate", "reference"),
    "select_node": ("screen", "candidates"),
    "select_option": ("task", "screen", "node", "options", "memory"),
    "ground_instruction": ("screen", "instruction"),
    "extract_facts": ("task", "screen", "recent_actions"),
    "fallback_plan": ("task", "screen", "history", "memory"),
    "audit_pair": ("edge", "source", "target", "source_reference", "target_reference"),
    "normalize_instruction": ("edges", "source_reference"),
}

MAX_FACTS = 5
_LIST_MARKER = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s+", re.M)


@dataclass(frozen=True)
class BackendRequest:
    capability: str
    inputs: dict[str, Any]

    def __post_init__(self):
        if self.capability not in CAPABILITIES:
            raise BackendError(f"unknown capability {self.capability!r}")
        expected = set(CAPABILITIES[self.capability])
        if set(self.inputs) != expected:
            raise BackendError(f"{self.capability} payload fields {sorted(self.inputs)} != {sorted(expected)}")


@dataclass
class PageDescription:
    description: str
    state_snapshot: dict[str, str]
    elements: list[UiElement]


@dataclass
class PlannedStep:
    instruction: str
    target_element: str | None = None


@dataclass
class OptionChoice:
    index: int
    # one-step instruction proposed with a FreeAction choice
    instruction: str | None = None
    # parameter values for a templated edge
    params: dict[str, str] | None = None


@dataclass
class NormalizedGroup:
    template: str
    params: list[dict[str, str]]


def to_jsonable(obj: Any) -> Any:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.compare or f.name != "sim"}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(to_jsonable(v) for v in obj)
    return obj


def is_single_step(instruction: str) -> bool:
    text = instruction.strip()
    return bool(text) and "\n" not in text and not _LIST_MARKER.search(text)


class Backend:
    """Base class: typed entry points plus request validation and transcripts."""

    name = "backend"

    def __init__(self, trace_path: str | Path | None = None, record: bool = False):
        self.trace_path = Path(trace_path) if trace_path else None
        self.transcript: list[dict[str, Any]] | None = [] if record else None
        self._trace_lock = threading.Lock()

    # -- plumbing ----------------------------------------------------------

    def request(self, capability: str, **inputs: Any) -> Any:
        req = BackendRequest(capability, inputs)
        start = time.perf_counter()
        response = self.handle(req)
        self._record(req, response, time.perf_counter() - start)
        return response

    def handle(self, req: BackendRequest) -> Any:
        handler = getattr(self, f"_{req.capability}", None)
        if handler is None:
            raise BackendError(f"{self.name} backend does not implement {req.capability}")
        return handler(**req.inputs)

    def _record(self, req: BackendRequest, response: Any, elapsed: float) -> None:
        if self.transcript is None and self.trace_path is None:
            return
        entry = {
            "backend": self.name,
            "capability": req.capability,
            "request": to_jsonable(req.inputs),
            "response": to_jsonable(response),
            "elapsed_ms": round(elapsed * 1000, 3),
        }
        with self._trace_lock:
            if self.transcript is not None:
                self.transcript.append(entry)
            if self.trace_path is not None:
                with self.trace_path.open("a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- typed capabilities ----------------------------------------------

    def describe_page(self, screen) -> PageDescription:
        page = self.request("describe_page", screen=screen)
        if not page.description:
            raise MalformedResponse("empty page description")
        return page

    def embed(self, text: str) -> list[float]:
        if not text:
            raise EmptyInput("cannot embed an empty string")
        return _unit(self.request("embed", text=text))

    def embed_screen(self, screen) -> list[float]:
        return _unit(self.request("embed_screen", screen=screen))

    def plan_exploration(self, screen, node: UiNode, outgoing, unexplored,
                         exhausted: Sequence[str] = ()) -> PlannedStep:
        """Next exploratory instruction; ``exhausted`` lists instructions already
        tried without effect on this exact screen."""
        step = self.request("plan_exploration", screen=screen, node=node, outgoing=list(outgoing),
                            unexplored=list(unexplored), exhausted=list(exhausted))
        if not is_single_step(step.instruction):
            raise MalformedResponse(f"exploration instruction is not one step: {step.instruction!r}")
        return step

    def verify_node_match(self, current, candidate: UiNode, reference: dict | None) -> bool:
        if not candidate.reference_screenshot or reference is None:
            raise MissingReference(f"node {candidate.node_id} has no reference screenshot")
        return bool(self.request("verify_node_match", current=current, candidate=candidate,
                                 reference=reference))

    def select_node(self, screen, candidates: list[dict[str, Any]]) -> str | None:
        choice = self.request("select_node", screen=screen, candidates=candidates)
        if choice is not None and choice not in {c["node_id"] for c in candidates}:
            raise MalformedResponse(f"selected node {choice!r} is not a candidate")
        return choice

    def select_option(self, task, screen, node: UiNode, options: Sequence, memory) -> OptionChoice:
        if not options or options[0].kind != "Complete" or options[-1].kind != "FreeAction":
            raise BackendError("options must start with Complete and end with FreeAction")
        choice = self.request("select_option", task=task, screen=screen, node=node,
                              options=list(options), memory=memory)
        if not isinstance(choice.index, int) or not 0 <= choice.index < len(options):
            raise MalformedResponse(f"option index {choice.index!r} out of range")
        return choice

    def ground_instruction(self, screen, instruction: str) -> DeviceAction:
        if not instruction.strip():
            raise EmptyInput("cannot ground an empty instruction")
        return self.request("ground_instruction", screen=screen, instruction=instruction)

    def extract_facts(self, task, screen, recent_actions: Sequence[str]) -> list[str]:
        facts = self.request("extract_facts", task=task, screen=screen, recent_actions=list(recent_actions))
        if len(facts) > MAX_FACTS or not all(isinstance(f, str) and f for f in facts):
            raise MalformedResponse(f"expected at most {MAX_FACTS} non-empty facts")
        return facts

    def fallback_plan(self, task, screen, history: Sequence[str], memory) -> str:
        instruction = self.request("fallback_plan", task=task, screen=screen,
                                   history=list(history), memory=memory)
        if not isinstance(instruction, str) or not is_single_step(instruction):
            raise MalformedResponse(f"fallback plan must be a single step: {instruction!r}")
        return instruction.strip()

    def audit_pair(self, edge, source: UiNode, target: UiNode,
                   source_reference: dict | None, target_reference: dict | None) -> bool:
        return bool(self.request("audit_pair", edge=edge, source=source, target=target,
                                 source_reference=source_reference, target_reference=target_reference))

    def normalize_instruction(self, edges: Sequence, source_reference: dict | None) -> NormalizedGroup | None:
        group = self.request("normalize_instruction", edges=list(edges), source_reference=source_reference)
        if group is not None and len(group.params) != len(edges):
            raise MalformedResponse("normalization must return one params map per edge")
        return group


def _unit(vector: Sequence[float]) -> list[float]:
    values = [float(v) for v in vector]
    if not values or not all(math.isfinite(v) for v in values):
        raise MalformedResponse("embedding must be a non-empty finite vector")
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0:
        raise MalformedResponse("embedding has zero norm")
    out = [v / norm for v in values]
    assert is_unit(out)
    return out


class CompositeBackend(Backend):
    """Routes each capability to an override backend, else to the default."""

    name = "composite"

    def __init__(self, default: Backend, overrides: dict[str, Backend] | None = None, **kwargs):
        super().__init__(**kwargs)
        self.default = default
        self.overrides = dict(overrides or {})
        for capability in self.overrides:
            if capability not in CAPABILITIES:
                raise BackendError(f"unknown capability {capability!r}")

    def handle(self, req: BackendRequest) -> Any:
        return self.overrides.get(req.capability, self.default).handle(req)
