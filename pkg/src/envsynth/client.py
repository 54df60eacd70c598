"""Pluggable generator client with record/replay cassettes.

Every pipeline stage that needs a language model goes through
:class:`GeneratorClient.generate`, which renders a prompt from a template
id plus a JSON payload.  The rendered prompt's SHA-256 keys the cassette,
so a recorded run can be replayed byte-for-byte without any backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

from .statestore import canonical_json

log = logging.getLogger(__name__)

STOP_TOKEN = "###STOP###"


class ClientUnavailable(RuntimeError):
    """No backend answered (offline, replay miss, exhausted retries)."""


class ClientResponseError(ValueError):
    """The backend answered, but not in the expected shape."""


class TransientBackendError(RuntimeError):
    """Raised by backends for errors worth retrying."""


def prompt_asset(name: str) -> str:
    return resources.files("envsynth.prompts").joinpath(name).read_text(encoding="utf-8")


TEMPLATES: dict[str, str] = {
    "state_structure": (
        "You design the state structure of a simulated tool environment. Given the tool "
        "description documents, return JSON {\"schema_id\": ..., \"attributes\": [...]} listing every "
        "attribute name, its kind (scalar|list|record), value_kind (text|integer|decimal|boolean|"
        "reference|record), description, record fields, keys of collections and reference targets."
    ),
    "function_set": (
        "Write the effect program for one tool of the environment. Use only the steps get, filter, "
        "compute, set, append, assert, return over the given state structure. Return the tool "
        "definition as JSON with name, description, params, returns, effect, reads and writes."
    ),
    "edge_judge": (
        "Decide whether the output of the source tool is likely to be a valid input for the target "
        "tool. Return JSON {\"edge\": true|false, \"rationale\": \"...\"}."
    ),
    "merge_redundancy": (
        "The tool sequence below was produced by merging two sequences. Identify tools that retrieve "
        "the same information as an earlier tool. Return JSON {\"redundant\": [[kept, dropped], ...]}."
    ),
    "reasoning_nodes": (
        "Insert reasoning nodes into the tool sequence. A reasoning node derives higher-level "
        "information from the outputs of preceding nodes (for example the total price of listed "
        "items). Return JSON {\"nodes\": [{\"after\": node_id, \"instruction\": text, "
        "\"inputs\": [node_id, ...], \"output\": name}]}."
    ),
    "reasoning_edges": (
        "Add reasoning edges to the task graph: an edge (parent, child) means the child's input "
        "parameters are derived from the parent's output. Return JSON {\"edges\": [{\"src\": id, "
        "\"dst\": id, \"rationale\": text}]}."
    ),
    "instantiate_env": (
        "Instantiate the environment state structure with concrete, mutually consistent values. "
        "Return the full state as JSON; write decimals as {\"$decimal\": \"12.50\"}."
    ),
    "instantiate_env_repair": (
        "The previous state did not conform to the state structure. Fix the listed problem and "
        "return the full corrected state as JSON."
    ),
    "initial_question": (
        "Write the request a user would make to an assistant so that solving it requires the tools "
        "below in the given order. Mention the concrete entities from the state that the user knows."
    ),
    "bind_args": (
        "Fill in the arguments of the next tool call so that it serves the user's request. Arguments "
        "may be literals or {\"ref\": node_id, \"field\": name} references to earlier outputs. Return "
        "JSON {\"args\": {...}}."
    ),
    "reasoning_eval": (
        "Carry out the reasoning step on the given inputs. Return JSON {\"value\": ...}; write "
        "decimals as {\"$decimal\": \"12.50\"}."
    ),
    "refine_task": (
        "Rewrite the user request so it contains only the minimal information necessary to solve "
        "the task while staying natural. Use the state change and tool arguments below as the "
        "ground truth. Return only the rewritten request."
    ),
    "refine_task_retry": (
        "Your previous rewrite mentioned entities that are not part of the task. Rewrite it again "
        "without them. Return only the rewritten request."
    ),
    # user_turn takes its head from payload["system"]; meu_judge from prompts/meu_judge.txt
    "user_turn": "",
    "policy_turn": (
        "You are a customer-service agent operating tools on behalf of a user. Respond with JSON, "
        "either {\"reasoning\": text, \"tool_call\": {\"name\": ..., \"arguments\": {...}}} or "
        "{\"reasoning\": text, \"ask_user\": text}."
    ),
    "meu_judge": "",
}


def render_prompt(template_id: str, payload: Mapping) -> str:
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    head = TEMPLATES[template_id]
    if template_id == "meu_judge":
        head = prompt_asset("meu_judge.txt")
    elif template_id == "user_turn":
        head = payload.get("system", "")
    return f"{head}\n\n## Input\n{canonical_json(payload)}"


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def __call__(self, template_id: str, prompt: str, payload: Mapping) -> str: ...


class Cassette:
    """JSON Lines log of ``{key, template, response}``; last entry per key wins."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self.entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self.entries[rec["key"]] = rec["response"]

    def get(self, key: str) -> str | None:
        return self.entries.get(key)

    def record(self, key: str, template_id: str, response: str) -> None:
        with self._lock:
            self.entries[key] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json({"key": key, "template": template_id, "response": response}) + "\n")


@dataclass
class GeneratorClient:
    """Generator/judge client.

    ``mode`` is ``"off"`` (call the backend, record nothing), ``"record"``
    (call the backend and append every exchange to the cassette) or
    ``"replay"`` (answer from the cassette only; a miss raises
    :class:`ClientUnavailable`).
    """

    backend: Backend | None = None
    cassette: Cassette | None = None
    mode: str = "off"
    retries: int = 2
    retry_delay: float = 0.5
    calls: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("off", "record", "replay"):
            raise ValueError(f"unknown cassette mode {self.mode!r}")
        if self.mode in ("record", "replay") and self.cassette is None:
            raise ValueError(f"{self.mode} mode needs a cassette")
        self._lock = threading.Lock()

    @property
    def available(self) -> bool:
        return self.backend is not None or self.mode == "replay"

    def generate(self, template_id: str, payload: Mapping) -> str:
        prompt = render_prompt(template_id, payload)
        key = prompt_key(prompt)
        with self._lock:
            self.calls.append((template_id, key))
        if self.mode == "replay":
            response = self.cassette.get(key)
            if response is None:
                raise ClientUnavailable(f"no cassette entry for {template_id} ({key[:12]})")
            return response
        if self.backend is None:
            raise ClientUnavailable(f"no backend for {template_id}")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                response = self.backend(template_id, prompt, payload)
                break
            except TransientBackendError as exc:
                last = exc
                log.warning("backend error on %s (attempt %d): %s", template_id, attempt + 1, exc)
                if attempt < self.retries and self.retry_delay:
                    time.sleep(self.retry_delay * (2**attempt))
        else:
            raise ClientUnavailable(f"{template_id}: retries exhausted") from last
        if self.mode == "record":
            self.cassette.record(key, template_id, response)
        return response

    def generate_json(self, template_id: str, payload: Mapping) -> Any:
        return parse_json_response(self.generate(template_id, payload))


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.S)


def parse_json_response(text: str) -> Any:
    body = text.strip()
    m = _FENCE.match(body)
    if m:
        body = m.group(1)
    try:
        return json.loads(body, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise ClientResponseError(f"response is not JSON: {text[:80]!r}") from exc


class OpenAIChatBackend:
    """Backend for an OpenAI-compatible ``/chat/completions`` endpoint.

    The API key comes from the environment variable named by ``api_key_env``.
    """

    def __init__(self, base_url: str, model: str, api_key_env: str = "ENVSYNTH_API_KEY",
                 timeout: float = 120.0, temperature: float = 0.7):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.temperature = temperature

    def __call__(self, template_id: str, prompt: str, payload: Mapping) -> str:
        import httpx

        key = os.environ.get(self.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = httpx.post(f"{self.base_url}/chat/completions", json=body, headers=headers, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ClientUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()["choices"][0]["message"]["content"]


def callable_backend(fn: Callable[[str, Mapping], str]) -> Backend:
    """Adapt ``fn(template_id, payload) -> str`` to the backend signature."""

    def backend(template_id: str, prompt: str, payload: Mapping) -> str:
        return fn(template_id, payload)

    return backend
