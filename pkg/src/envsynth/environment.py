"""Environment bundles on disk and their synthesis from tool documents.

Layout of one environment directory::

    env/<name>/schema.json        state structure
    env/<name>/tools/<tool>.json  one ToolSpec per file
    env/<name>/manifest.json      tool names + content digests
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .client import ClientResponseError, GeneratorClient
from .statestore import AttributeSchema, SchemaViolation
from .tooling import ToolSpec, load_tools, tool_manifest, validate_tool

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class Environment:
    name: str
    schema: AttributeSchema
    tools: Mapping[str, ToolSpec]

    @property
    def manifest(self) -> dict:
        return tool_manifest(self.name, self.tools.values())

    @property
    def manifest_digest(self) -> str:
        return self.manifest["digest"]

    def validate(self) -> dict[str, list]:
        """Diagnostics per tool; tools with none are omitted."""
        out = {}
        for name, spec in self.tools.items():
            diags = validate_tool(spec, self.schema)
            if diags:
                out[name] = diags
        return out

    @classmethod
    def load(cls, directory) -> "Environment":
        directory = Path(directory)
        schema = AttributeSchema.load(directory / "schema.json")
        tools = load_tools(directory / "tools")
        env = cls(directory.name, schema, tools)
        manifest_path = directory / "manifest.json"
        if manifest_path.exists():
            recorded = json.loads(manifest_path.read_text(encoding="utf-8"))
            if recorded.get("digest") != env.manifest_digest:
                log.warning("%s: tool manifest digest differs from tool files", directory)
        return env

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "tools").mkdir(parents=True, exist_ok=True)
        _write_json(directory / "schema.json", self.schema.to_json())
        for name, spec in sorted(self.tools.items()):
            _write_json(directory / "tools" / f"{name}.json", spec.to_json())
        _write_json(directory / "manifest.json", self.manifest)
        return directory


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def synthesize_environment(
    name: str, tool_docs: Sequence[Mapping], client: GeneratorClient, repair_attempts: int = 1
) -> Environment:
    """Generate the state structure, then one effect program per tool document.

    Each generated artifact is validated (schema invariants, tool type
    check); a failing one is sent back to the client with its problems up
    to ``repair_attempts`` times before :class:`SynthesisError` is raised.
    """
    if not tool_docs:
        raise SynthesisError("no tool documents")
    payload = {"environment": name, "tool_docs": list(tool_docs)}
    schema = None
    problems = ""
    for attempt in range(repair_attempts + 1):
        body = dict(payload, problems=problems) if attempt else payload
        try:
            schema = AttributeSchema.from_json(client.generate_json("state_structure", body))
            break
        except (SchemaViolation, ClientResponseError, KeyError, TypeError) as exc:
            problems = str(exc)
            log.warning("state structure attempt %d rejected: %s", attempt + 1, problems)
    if schema is None:
        raise SynthesisError(f"state structure rejected: {problems}")

    tools: dict[str, ToolSpec] = {}
    for doc in tool_docs:
        spec = None
        problems = ""
        for attempt in range(repair_attempts + 1):
            body = {"schema": schema.to_json(), "tool_doc": doc}
            if attempt:
                body["problems"] = problems
            try:
                candidate = ToolSpec.from_json(client.generate_json("function_set", body))
            except (ClientResponseError, KeyError, TypeError) as exc:
                problems = str(exc)
                continue
            diags = validate_tool(candidate, schema)
            if candidate.name != doc.get("name", candidate.name):
                diags = [*diags, f"name {candidate.name!r} != {doc['name']!r}"]
            if not diags:
                spec = candidate
                break
            problems = "; ".join(str(d) for d in diags)
            log.warning("tool %s attempt %d rejected: %s", doc.get("name"), attempt + 1, problems)
        if spec is None:
            raise SynthesisError(f"tool {doc.get('name')!r} rejected: {problems}")
        if spec.name in tools:
            raise SynthesisError(f"duplicate tool {spec.name!r}")
        tools[spec.name] = spec
    return Environment(name, schema, tools)


def tool_docs_from_env(env: Environment) -> list[dict]:
    """Description documents (no effect programs) for an existing environment."""
    return [
        {"name": t.name, "description": t.description, "params": [p.to_json() for p in t.params], "returns": t.returns}
        for t in sorted(env.tools.values(), key=lambda t: t.name)
    ]

