"""HTTP backend speaking a chat-completions plus embeddings protocol.

Every chat capability renders a versioned prompt from ``prompts/``, expects
exactly one fenced ``json`` block back and validates it against a JSON
schema. Transport failures and malformed replies are retried once with
exponential backoff, then surface as BackendUnavailable / MalformedResponse.
The simulator's template ids are stripped from every payload.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import httpx
import jsonschema

from ..errors import BackendUnavailable, GraphError, MalformedResponse
from ..graph import DeviceAction, UiNode
from .base import Backend, NormalizedGroup, OptionChoice, PageDescription, PlannedStep, to_jsonable

logger = logging.getLogger(__name__)

_FENCE = re.compile(r"```json\s*\n(.*?)\n?```", re.S)
_NULLABLE_STR = {"type": ["string", "null"]}

RESPONSE_SCHEMAS: dict[str, dict[str, Any]] = {
    "describe_page": {
        "type": "object",
        "required": ["description", "state_snapshot"],
        "properties": {
            "description": {"type": "string", "minLength": 1},
            "state_snapshot": {"type": "object", "additionalProperties": {"type": "string"}},
        },
    },
    "plan_exploration": {
        "type": "object",
        "required": ["instruction"],
        "properties": {"instruction": {"type": "string", "minLength": 1}, "target_element": _NULLABLE_STR},
    },
    "verify_node_match": {"type": "object", "required": ["match"], "properties": {"match": {"type": "boolean"}}},
    "select_node": {"type": "object", "required": ["node_id"], "properties": {"node_id": _NULLABLE_STR}},
    "select_option": {
        "type": "object",
        "required": ["index"],
        "properties": {
            "index": {"type": "integer"},
            "instruction": _NULLABLE_STR,
            "params": {"type": ["object", "null"], "additionalProperties": {"type": "string"}},
        },
    },
    "ground_instruction": {
        "type": "object",
        "required": ["action"],
        "properties": {"action": {"type": "object", "required": ["kind"]}},
    },
    "extract_facts": {
        "type": "object",
        "required": ["facts"],
        "properties": {"facts": {"type": "array", "maxItems": 5, "items": {"type": "string", "minLength": 1}}},
    },
    "fallback_plan": {
        "type": "object",
        "required": ["instruction"],
        "properties": {"instruction": {"type": "string", "minLength": 1}},
    },
    "audit_pair": {"type": "object", "required": ["consistent"], "properties": {"consistent": {"type": "boolean"}}},
    "normalize_instruction": {
        "type": "object",
        "required": ["template", "params"],
        "properties": {
            "template": _NULLABLE_STR,
            "params": {"type": "array", "items": {"type": "object", "additionalProperties": {"type": "string"}}},
        },
    },
}


@dataclass
class WireConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str = "KOBE_API_KEY"
    default_model: str = "default"
    embedding_model: str = "default-embedding"
    models: dict[str, str] = field(default_factory=dict)
    timeout_ms: int = 30_000
    max_attempts: int = 2
    backoff_s: float = 0.5
    concurrency: int = 4

    def model_for(self, capability: str) -> str:
        if capability in ("embed", "embed_screen"):
            return self.models.get(capability, self.embedding_model)
        return self.models.get(capability, self.default_model)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> WireConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown wire config keys {sorted(unknown)}")
        return cls(**data)


def load_prompt(name: str) -> tuple[int, str]:
    """(version, body) of a prompt asset."""
    text = resources.files("kobe.backends").joinpath("prompts", f"{name}.txt").read_text()
    header, _, body = text.partition("\n")
    if not header.startswith("prompt-version:"):
        raise ValueError(f"prompt {name} lacks a version header")
    return int(header.split(":", 1)[1]), body


def public_screen(screen) -> dict[str, Any]:
    """What a real device would expose: text, elements, values, content hash."""
    data = screen.to_dict() if hasattr(screen, "to_dict") else dict(screen)
    data.pop("template_id", None)
    return data


def _strip_templates(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _strip_templates(v) for k, v in obj.items() if k != "template_id"}
    if isinstance(obj, list):
        return [_strip_templates(v) for v in obj]
    return obj


def extract_json_block(text: str) -> Any:
    blocks = _FENCE.findall(text)
    if len(blocks) != 1:
        raise MalformedResponse(f"expected exactly one fenced json block, found {len(blocks)}")
    try:
        return json.loads(blocks[0])
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"fenced block is not JSON: {exc.msg}") from None


class WireBackend(Backend):
    name = "wire"

    def __init__(self, config: WireConfig | None = None, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep, **kwargs):
        super().__init__(**kwargs)
        self.config = config or WireConfig()
        headers = {}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=self.config.base_url, headers=headers,
                                    timeout=self.config.timeout_ms / 1000, transport=transport)
        self._slots = threading.BoundedSemaphore(self.config.concurrency)
        self._sleep = sleep
        self._system = load_prompt("_system")[1]
        self.attempts = 0

    def close(self) -> None:
        self._client.close()

    # -- transport -----------------------------------------------------------

    def _post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        with self._slots:
            self.attempts += 1
            try:
                response = self._client.post(path, json=body)
            except httpx.HTTPError as exc:
                raise BackendUnavailable(f"{path}: {exc}") from None
        if response.status_code >= 500 or response.status_code == 429:
            raise BackendUnavailable(f"{path}: HTTP {response.status_code}")
        if response.status_code >= 400:
            raise MalformedResponse(f"{path}: HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError:
            raise MalformedResponse(f"{path}: response is not JSON") from None

    def _with_retries(self, capability: str, call):
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(self.config.backoff_s * 2 ** (attempt - 1))
            try:
                return call()
            except (BackendUnavailable, MalformedResponse) as exc:
                logger.warning("%s attempt %d failed: %s", capability, attempt + 1, exc)
                last = exc
        raise last

    def _chat(self, capability: str, payload: dict[str, Any]) -> Any:
        version, template = load_prompt(capability)
        body = {
            "model": self.config.model_for(capability),
            "temperature": 0,
            "messages": [
                {"role": "system", "content": self._system},
                {"role": "user", "content": template.replace(
                    "{payload}", json.dumps(_strip_templates(to_jsonable(payload)), sort_keys=True, indent=1))},
            ],
            "metadata": {"capability": capability, "prompt_version": version},
        }

        def call():
            reply = self._post("/chat/completions", body)
            try:
                content = reply["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                raise MalformedResponse("chat reply lacks choices[0].message.content") from None
            data = extract_json_block(content)
            try:
                jsonschema.validate(data, RESPONSE_SCHEMAS[capability])
            except jsonschema.ValidationError as exc:
                raise MalformedResponse(f"{capability} reply violates schema: {exc.message}") from None
            logger.debug("%s -> %s", capability, data)
            return data

        return self._with_retries(capability, call)

    def _embedding(self, capability: str, text: str) -> list[float]:
        body = {"model": self.config.model_for(capability), "input": text}

        def call():
            reply = self._post("/embeddings", body)
            try:
                vector = reply["data"][0]["embedding"]
            except (KeyError, IndexError, TypeError):
                raise MalformedResponse("embedding reply lacks data[0].embedding") from None
            if not isinstance(vector, list) or not all(isinstance(v, (int, float)) for v in vector):
                raise MalformedResponse("embedding must be a list of numbers")
            return vector

        return self._with_retries(capability, call)

    # -- capabilities ----------------------------------------------------------

    def _describe_page(self, screen) -> PageDescription:
        data = self._chat("describe_page", {"screen": public_screen(screen)})
        # element ids come from the device's accessibility data, not the model
        return PageDescription(data["description"], data["state_snapshot"], list(screen.elements))

    def _embed(self, text: str) -> list[float]:
        return self._embedding("embed", text)

    def _embed_screen(self, screen) -> list[float]:
        return self._embedding("embed_screen", screen.public_text())

    def _plan_exploration(self, screen, node: UiNode, outgoing, unexplored, exhausted) -> PlannedStep:
        data = self._chat("plan_exploration", {
            "screen": public_screen(screen), "node": node, "outgoing": outgoing,
            "unexplored": unexplored, "exhausted": exhausted})
        return PlannedStep(data["instruction"], data.get("target_element"))

    def _verify_node_match(self, current, candidate: UiNode, reference: dict) -> bool:
        data = self._chat("verify_node_match", {
            "current": public_screen(current), "candidate": candidate, "reference": public_screen(reference)})
        return data["match"]

    def _select_node(self, screen, candidates) -> str | None:
        data = self._chat("select_node", {"screen": public_screen(screen), "candidates": candidates})
        return data["node_id"]

    def _select_option(self, task, screen, node, options, memory) -> OptionChoice:
        data = self._chat("select_option", {
            "task": task.instruction, "screen": public_screen(screen), "node": node.description,
            "options": [dict(o.to_dict(), index=i) for i, o in enumerate(options)], "memory": memory})
        return OptionChoice(data["index"], data.get("instruction"), data.get("params"))

    def _ground_instruction(self, screen, instruction: str) -> DeviceAction:
        data = self._chat("ground_instruction", {"screen": public_screen(screen), "instruction": instruction})
        action = {k: v for k, v in data["action"].items() if v is not None}
        try:
            return DeviceAction.from_dict(action)
        except (GraphError, ValueError, TypeError, KeyError) as exc:
            raise MalformedResponse(f"invalid device action {data['action']}: {exc}") from None

    def _extract_facts(self, task, screen, recent_actions) -> list[str]:
        data = self._chat("extract_facts", {
            "task": task.instruction, "screen": public_screen(screen), "recent_actions": recent_actions})
        return data["facts"]

    def _fallback_plan(self, task, screen, history, memory) -> str:
        data = self._chat("fallback_plan", {
            "task": task.instruction, "screen": public_screen(screen), "history": history, "memory": memory})
        return data["instruction"]

    def _audit_pair(self, edge, source, target, source_reference, target_reference) -> bool:
        data = self._chat("audit_pair", {
            "edge": edge, "source": source, "target": target,
            "source_reference": source_reference, "target_reference": target_reference})
        return data["consistent"]

    def _normalize_instruction(self, edges, source_reference) -> NormalizedGroup | None:
        data = self._chat("normalize_instruction", {"edges": edges, "source_reference": source_reference})
        if data["template"] is None:
            return None
        return NormalizedGroup(data["template"], data["params"])
