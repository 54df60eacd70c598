"""Task generation: instantiate state, write intents, execute blueprints.

For each task graph the pipeline draws an initial state, asks the
generator for an intent, binds every tool node's arguments in topological
order and executes it, then refines the intent.  Bindings are stored as
concrete values so the golden state can be re-derived without the
generator: :func:`replay_bindings` is run on every sample before it is
emitted.
"""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Iterable, Mapping, Sequence

from .client import ClientResponseError, ClientUnavailable, GeneratorClient
from .environment import Environment
from .graphgen import EmptyGraph, ReasoningNode, TaskGraph, ToolNode, tool_summary, topological_order
from .statestore import (
    Attribute,
    AttributeSchema,
    SchemaViolation,
    Snapshot,
    StateDoc,
    canonical_json,
    decode_value,
    diff,
    encode_value,
    freeze,
    iter_scalars,
    state_equal,
)
from .tooling import ToolSpec, execute_tool

log = logging.getLogger(__name__)

DEFAULT_POPULATION = 20
ENTITY_RE = re.compile(r"\b[A-Z]{1,3}\d{3,}\b|[\w.+-]+@[\w-]+(?:\.[\w-]+)+")

FIRST_NAMES = (
    "Ava", "Ben", "Chloe", "Daniel", "Elena", "Farid", "Grace", "Hiro", "Isla", "Jonas",
    "Keira", "Liam", "Maya", "Noah", "Olga", "Priya", "Quinn", "Rosa", "Sami", "Tara",
)
LAST_NAMES = (
    "Anders", "Brooks", "Castillo", "Dubois", "Eriksen", "Fischer", "Garcia", "Hughes", "Ivanova", "Jensen",
    "Kowalski", "Lopez", "Moreau", "Nakamura", "Okafor", "Patel", "Quintero", "Rossi", "Silva", "Tanaka",
)
PRODUCT_WORDS = (
    ("Compact", "Classic", "Deluxe", "Eco", "Smart", "Travel", "Pro", "Mini", "Ultra", "Vintage"),
    ("Kettle", "Lamp", "Backpack", "Blender", "Speaker", "Jacket", "Monitor", "Notebook", "Router", "Toaster"),
)
STREETS = ("Oak", "Maple", "Harbor", "Cedar", "Mill", "River", "Hill", "Park", "Lake", "Station")
DEFAULT_VOCAB: dict[str, tuple] = {"status": ("pending", "paid", "cancelled")}


class TaskRejected(RuntimeError):
    def __init__(self, reason: str, node: str | None = None, detail: str = ""):
        super().__init__(f"{reason} at {node}: {detail}" if node else f"{reason}: {detail}")
        self.reason = reason
        self.node = node
        self.detail = detail


class BindingUnresolved(TaskRejected):
    def __init__(self, node: str, detail: str = ""):
        super().__init__("binding_unresolved", node, detail)


class RefinementRejected(TaskRejected):
    def __init__(self, detail: str = ""):
        super().__init__("refinement_rejected", None, detail)


# ---------------------------------------------------------------------------
# Environment initialization
# ---------------------------------------------------------------------------


def _text_value(f: Attribute, i: int, rng: random.Random, record: dict, person: bool, vocab: Mapping) -> str:
    if f.name in vocab:
        return rng.choice(tuple(vocab[f.name]))
    if f.name == "name":
        if person:
            return record.pop("_person")
        return f"{rng.choice(PRODUCT_WORDS[0])} {rng.choice(PRODUCT_WORDS[1])}"
    if f.name == "email":
        base = record.get("name", f"user{i}").lower().replace(" ", ".")
        return f"{base}{i}@example.com"
    if f.name == "address":
        return f"{rng.randint(1, 999)} {rng.choice(STREETS)} Street"
    return f"{f.name} {i}"


def _scalar_value(f: Attribute, i: int, rng: random.Random, record: dict, person: bool, vocab: Mapping) -> Any:
    vk = f.value_kind
    if vk == "text":
        return _text_value(f, i, rng, record, person, vocab)
    if vk == "integer":
        if f.volatile:
            return 0
        return rng.randint(1, 5) if f.name == "quantity" else rng.randint(0, 100)
    if vk == "decimal":
        return Decimal(rng.randint(100, 50_000)).scaleb(-2)
    if vk == "boolean":
        return rng.random() < 0.5
    raise ValueError(vk)


def _value(attr: Attribute, i: int, rng: random.Random, vocab: Mapping, refs: list) -> Any:
    if attr.kind == "list":
        el = attr.element()
        return [_value(el, j + 1, rng, vocab, refs) for j in range(rng.randint(0, 3))]
    if attr.kind == "record":
        return _record(attr, i, rng, vocab, refs, key=None, prefix="")
    if attr.value_kind == "reference":
        holder: dict = {}
        refs.append((holder, "value", attr.ref))
        return holder
    return _scalar_value(attr, i, rng, {}, False, vocab)


def _record(attr: Attribute, i: int, rng, vocab, refs: list, key: str | None, prefix: str, person_names=None) -> dict:
    rec: dict[str, Any] = {}
    field_names = {f.name for f in attr.fields}
    person = "email" in field_names and "name" in field_names
    if person and person_names:
        rec["_person"] = person_names[(i - 1) % len(person_names)]
    ordered = sorted(attr.fields, key=lambda f: (f.name != "name", f.name))
    for f in ordered:
        if f.name == key:
            rec[f.name] = f"{prefix}{i:04d}" if f.value_kind == "text" else i
        elif f.kind == "scalar" and f.value_kind == "reference":
            rec[f.name] = None
            refs.append((rec, f.name, f.ref))
        elif f.kind == "scalar":
            rec[f.name] = _scalar_value(f, i, rng, rec, person, vocab)
        else:
            rec[f.name] = _value(f, i, rng, vocab, refs)
    rec.pop("_person", None)
    return rec


def seeded_state(
    schema: AttributeSchema, seed: int, population: int = DEFAULT_POPULATION, vocab: Mapping | None = None
) -> StateDoc:
    """Deterministic offline instantiation of ``schema``.

    Keyed collections get ``population`` records with ids ``<P><nnnn>``
    (``P`` is the collection's initial); references are drawn uniformly
    from the target collection's keys once every collection exists.
    """
    vocab = {**DEFAULT_VOCAB, **(vocab or {})}
    rng = random.Random(f"{schema.schema_id}:{seed}")
    combos = [f"{a} {b}" for a in FIRST_NAMES for b in LAST_NAMES]
    person_names = rng.sample(combos, min(len(combos), max(population, 1)))
    refs: list = []
    data: dict[str, Any] = {}
    for attr in schema.attributes:
        if attr.kind == "list" and attr.key:
            prefix = attr.name[0].upper()
            data[attr.name] = [
                _record(attr.element(), i, rng, vocab, refs, attr.key, prefix, person_names)
                for i in range(1, population + 1)
            ]
        else:
            data[attr.name] = _value(attr, 1, rng, vocab, refs)
    for holder, slot, target in refs:
        coll = schema.attribute(target)
        keys = [rec[coll.key] for rec in data[target]]
        if not keys:
            raise SchemaViolation(f"reference into empty collection {target}")
        holder[slot] = rng.choice(keys)
    data = _unwrap_holders(data)
    return StateDoc.from_data(schema, data)


def _unwrap_holders(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"value"} and not isinstance(value["value"], (dict, list)):
            return value["value"]
        return {k: _unwrap_holders(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_unwrap_holders(v) for v in value]
    return value


def instantiate_environment(
    schema: AttributeSchema,
    client: GeneratorClient | None = None,
    seed: int = 0,
    population: int = DEFAULT_POPULATION,
    vocab: Mapping | None = None,
) -> StateDoc:
    """Concrete initial state for ``schema``.

    With a client, the generated state is validated; a non-conformant one
    gets a single repair round before :class:`SchemaViolation` propagates.
    Without a usable client the seeded offline generator is used.
    """
    if client is None or not client.available:
        return seeded_state(schema, seed, population, vocab)
    payload = {"schema": schema.to_json(), "seed": seed, "population": population}
    try:
        raw = client.generate_json("instantiate_env", payload)
    except ClientUnavailable:
        log.info("instantiate fallback to seeded generator")
        return seeded_state(schema, seed, population, vocab)
    except ClientResponseError as exc:
        raw, problem = None, str(exc)
    else:
        try:
            return StateDoc.from_json(schema, raw)
        except (SchemaViolation, KeyError, TypeError, AttributeError) as exc:
            problem = str(exc)
    log.warning("instantiated state rejected (%s); one repair attempt", problem)
    repaired = client.generate_json("instantiate_env_repair", {**payload, "problem": problem, "previous": raw})
    try:
        return StateDoc.from_json(schema, repaired)
    except (KeyError, TypeError, AttributeError) as exc:
        raise SchemaViolation(str(exc)) from exc


# ---------------------------------------------------------------------------
# Intents
# ---------------------------------------------------------------------------


def state_excerpt(state: StateDoc, attributes: Iterable[str]) -> dict:
    names = sorted({a for a in attributes if a in state.root})
    return {n: encode_value(state.root[n]) for n in names}


def touched_attributes(tools: Iterable[ToolSpec], schema: AttributeSchema | None = None) -> set[str]:
    """Top-level attributes ``tools`` read or write, plus (given ``schema``)
    the collections their records reference."""
    out = set()
    for t in tools:
        for p in (*t.reads, *t.writes):
            out.add(p.split(".")[0])
    if schema is not None:
        frontier = list(out)
        while frontier:
            name = frontier.pop()
            try:
                attr = schema.attribute(name)
            except KeyError:
                continue
            for _, a, _ in _fields_deep(attr):
                if a.ref and a.ref not in out:
                    out.add(a.ref)
                    frontier.append(a.ref)
    return out


def _fields_deep(attr: Attribute, path: tuple = ()):
    yield path, attr, None
    if attr.kind == "list":
        yield from _fields_deep(attr.element(), path)
    for f in attr.fields if attr.kind != "list" else ():
        yield from _fields_deep(f, (*path, f.name))


def _graph_payload(graph: TaskGraph, tools: Mapping[str, ToolSpec]) -> dict:
    topo = topological_order(graph)
    nodes = []
    for nid in topo:
        n = graph.node(nid)
        if isinstance(n, ToolNode):
            nodes.append({"id": n.id, "tool": n.tool})
        else:
            nodes.append({"id": n.id, "reasoning": n.instruction, "inputs": list(n.inputs), "output": n.output})
    return {
        "nodes": nodes,
        "tool_order": [graph.node(n).tool for n in topo if isinstance(graph.node(n), ToolNode)],
        "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind} for e in graph.edges],
        "tools": [tool_summary(tools[n.tool]) for n in graph.tool_nodes if n.tool in tools],
    }


def generate_initial_question(
    state: StateDoc, graph: TaskGraph, client: GeneratorClient, tools: Mapping[str, ToolSpec] | None = None
) -> str:
    if not graph.tool_nodes:
        raise EmptyGraph("task graph has no tool nodes")
    tools = tools or {}
    used = [tools[n.tool] for n in graph.tool_nodes if n.tool in tools]
    relevant = touched_attributes(used, state.schema) if used else {a.name for a in state.schema.attributes}
    payload = {**_graph_payload(graph, tools), "state": state_excerpt(state, relevant)}
    text = client.generate("initial_question", payload).strip()
    if not text:
        raise ClientResponseError("empty intent")
    return text


def mentions_state_entity(text: str, state: StateDoc) -> bool:
    """True if some text value stored in ``state`` occurs in ``text``."""
    for _, attr, value in iter_scalars(state.root, state.schema.root):
        if isinstance(value, str) and attr.value_kind in ("text", "reference") and len(value) > 2 and value in text:
            return True
    return False


# ---------------------------------------------------------------------------
# Binding and execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArgumentBinding:
    """Arguments of one node as proposed (``args``) and as executed (``resolved``).

    ``args`` values are literals or ``{"ref": node_id, "field": name}``;
    ``resolved`` holds the concrete values.  Reasoning nodes store their
    evaluated output under the node's output name.
    """

    node_id: str
    kind: str  # "tool" | "reasoning"
    tool: str | None
    args: Mapping
    resolved: Mapping

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind,
            "tool": self.tool,
            "args": self.args,
            "resolved": {k: encode_value(v) for k, v in self.resolved.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ArgumentBinding":
        return cls(
            obj["node_id"],
            obj["kind"],
            obj.get("tool"),
            obj.get("args", {}),
            {k: freeze(decode_value(v)) for k, v in obj.get("resolved", {}).items()},
        )


def _navigate(value: Any, field_path: str | None) -> Any:
    if not field_path:
        return value
    for seg in str(field_path).split("."):
        value = value[int(seg)] if seg.isdigit() else value[seg]
    return value


def bind_and_execute(
    graph: TaskGraph,
    question: str,
    state: StateDoc,
    client: GeneratorClient,
    tools: Mapping[str, ToolSpec],
) -> tuple[list[ArgumentBinding], StateDoc]:
    """Fill arguments node by node in topological order and execute.

    Raises :class:`BindingUnresolved` when a node cannot be bound and
    :class:`TaskRejected` when a tool call fails.
    """
    outputs: dict[str, Any] = {}
    bindings: list[ArgumentBinding] = []
    relevant = touched_attributes((tools[n.tool] for n in graph.tool_nodes if n.tool in tools), state.schema)
    for node_id in topological_order(graph):
        node = graph.node(node_id)
        parents = [{"src": e.src, "kind": e.kind} for e in graph.edges if e.dst == node_id]
        if isinstance(node, ReasoningNode):
            missing = [i for i in node.inputs if i not in outputs]
            if missing:
                raise BindingUnresolved(node_id, f"inputs {missing} not evaluated")
            payload = {
                "question": question,
                "node": node_id,
                "instruction": node.instruction,
                "output": node.output,
                "inputs": {i: encode_value(outputs[i]) for i in node.inputs},
            }
            try:
                reply = client.generate_json("reasoning_eval", payload)
                value = freeze(decode_value(reply["value"]))
            except (ClientUnavailable, ClientResponseError, KeyError, TypeError, SchemaViolation) as exc:
                raise BindingUnresolved(node_id, str(exc)) from exc
            outputs[node_id] = value
            bindings.append(ArgumentBinding(node_id, "reasoning", None, {}, {node.output: value}))
            continue
        spec = tools.get(node.tool)
        if spec is None:
            raise BindingUnresolved(node_id, f"unknown tool {node.tool!r}")
        payload = {
            "question": question,
            "node": node_id,
            "tool": tool_summary(spec),
            "parents": parents,
            "history": [{"node": b.node_id, "tool": b.tool} for b in bindings if b.kind == "tool"],
            "outputs": {k: encode_value(v) for k, v in outputs.items()},
            "reasoning_outputs": {
                r.id: r.output for r in graph.reasoning_nodes if r.id in outputs
            },
            "state": state_excerpt(state, relevant),
        }
        try:
            reply = client.generate_json("bind_args", payload)
            raw_args = reply["args"]
        except (ClientUnavailable, ClientResponseError, KeyError, TypeError) as exc:
            raise BindingUnresolved(node_id, str(exc)) from exc
        if not isinstance(raw_args, Mapping):
            raise BindingUnresolved(node_id, "args is not an object")
        resolved: dict[str, Any] = {}
        for param, spec_val in raw_args.items():
            if isinstance(spec_val, Mapping) and "ref" in spec_val:
                src = spec_val["ref"]
                if src not in outputs:
                    raise BindingUnresolved(node_id, f"{param} refers to {src!r}, not executed before {node_id}")
                try:
                    value = _navigate(outputs[src], spec_val.get("field"))
                except (KeyError, IndexError, TypeError, ValueError):
                    raise BindingUnresolved(node_id, f"{param}: no field {spec_val.get('field')!r} in {src}") from None
                resolved[param] = value
            else:
                try:
                    resolved[param] = freeze(decode_value(spec_val))
                except SchemaViolation as exc:
                    raise BindingUnresolved(node_id, f"{param}: {exc}") from exc
        for p in spec.params:
            if p.required and p.name not in resolved:
                raise BindingUnresolved(node_id, f"required parameter {p.name!r} unbound")
        state, result = execute_tool(spec, resolved, state)
        if not result.ok:
            raise TaskRejected("tool_error", node_id, result.error_code or "")
        outputs[node_id] = result.value
        bindings.append(
            ArgumentBinding(node_id, "tool", spec.name, {k: raw_args[k] for k in sorted(raw_args)}, resolved)
        )
    return bindings, state


def replay_bindings(
    bindings: Sequence[ArgumentBinding], tools: Mapping[str, ToolSpec], state: StateDoc
) -> StateDoc:
    """Re-execute stored tool bindings; no generator involved."""
    for b in bindings:
        if b.kind != "tool":
            continue
        state, result = execute_tool(tools[b.tool], b.resolved, state)
        if not result.ok:
            raise TaskRejected("replay_failed", b.node_id, result.error_code or "")
    return state


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


def _strings(value: Any) -> Iterable[str]:
    if isinstance(value, str):
        yield value
    elif isinstance(value, Mapping):
        for v in value.values():
            yield from _strings(v)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _strings(v)


def entity_allowlist(s0: StateDoc, sg: StateDoc, bindings: Sequence[ArgumentBinding] = ()) -> set[str]:
    allowed = set(_strings(s0.root))
    for entry in diff(s0, sg, include_volatile=True):
        allowed.update(_strings(entry.after))
    for b in bindings:
        allowed.update(_strings(b.resolved))
    return allowed


def unknown_entities(text: str, allowlist: set[str]) -> list[str]:
    """Id- and email-like tokens in ``text`` that are not allowlisted."""
    bad = []
    for tok in ENTITY_RE.findall(text):
        tok = tok.rstrip(".")
        if tok not in allowlist and not any(tok in a for a in allowlist):
            bad.append(tok)
    return bad


@dataclass(frozen=True)
class Refinement:
    text: str
    refined: bool
    attempts: int = 0


def refine_task(
    initial_question: str,
    s0: StateDoc,
    sg: StateDoc,
    client: GeneratorClient | None,
    bindings: Sequence[ArgumentBinding] = (),
) -> Refinement:
    """Ask for a minimal rewrite of the intent.

    The rewrite may only mention id/email-like entities found in the
    initial state, the state change or the bindings; one violation earns a
    retry, a second raises :class:`RefinementRejected`.  Without a client
    the intent passes through with ``refined=False``.
    """
    if client is None or not client.available:
        return Refinement(initial_question, False)
    payload = {
        "question": initial_question,
        "changes": [e.to_json() for e in diff(s0, sg)],
        "bindings": [b.to_json() for b in bindings],
    }
    allow = entity_allowlist(s0, sg, bindings)
    try:
        text = client.generate("refine_task", payload).strip()
    except ClientUnavailable:
        return Refinement(initial_question, False)
    bad = unknown_entities(text, allow) if text else ["<empty>"]
    if not bad:
        return Refinement(text, True, 1)
    log.warning("refinement mentions unknown entities %s; retrying", bad)
    try:
        text = client.generate("refine_task_retry", {**payload, "previous": text, "unknown": bad}).strip()
    except ClientUnavailable as exc:
        raise RefinementRejected(f"retry unavailable after {bad}") from exc
    bad = unknown_entities(text, allow) if text else ["<empty>"]
    if bad:
        raise RefinementRejected(f"unknown entities {bad}")
    return Refinement(text, True, 2)


# ---------------------------------------------------------------------------
# Samples and the generation driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSample:
    task_id: str
    env_id: str
    question: str
    initial_question: str
    initial_state: Snapshot
    golden_state: Snapshot
    taskgraph_id: str
    tool_manifest_digest: str
    bindings: tuple = ()
    provenance: Mapping = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "env_id": self.env_id,
            "question": self.question,
            "initial_question": self.initial_question,
            "initial_state": self.initial_state.to_json(),
            "golden_state": self.golden_state.to_json(),
            "taskgraph_id": self.taskgraph_id,
            "tool_manifest_digest": self.tool_manifest_digest,
            "bindings": [b.to_json() for b in self.bindings],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, schema: AttributeSchema, obj: Mapping) -> "TaskSample":
        return cls(
            task_id=obj["task_id"],
            env_id=obj["env_id"],
            question=obj["question"],
            initial_question=obj["initial_question"],
            initial_state=Snapshot.from_json(schema, obj["initial_state"]),
            golden_state=Snapshot.from_json(schema, obj["golden_state"]),
            taskgraph_id=obj["taskgraph_id"],
            tool_manifest_digest=obj["tool_manifest_digest"],
            bindings=tuple(ArgumentBinding.from_json(b) for b in obj.get("bindings", ())),
            provenance=obj.get("provenance", {}),
        )

    def verify(self, tools: Mapping[str, ToolSpec]) -> bool:
        """Golden reproducibility: replaying the bindings reaches the golden state."""
        replayed = replay_bindings(self.bindings, tools, self.initial_state.payload)
        return state_equal(replayed, self.golden_state.payload)


@dataclass
class GenerationConfig:
    seed: int = 0
    population: int = DEFAULT_POPULATION
    require_state_change: bool = True
    jobs: int = 1
    vocab: Mapping = field(default_factory=dict)


def generate_task(
    index: int, graph: TaskGraph, env: Environment, client: GeneratorClient, cfg: GenerationConfig
) -> TaskSample:
    seed = cfg.seed + index
    s0 = instantiate_environment(env.schema, client, seed, cfg.population, cfg.vocab)
    q0 = generate_initial_question(s0, graph, client, env.tools)
    bindings, golden = bind_and_execute(graph, q0, s0, client, env.tools)
    if cfg.require_state_change and state_equal(s0, golden):
        raise TaskRejected("no_state_change", None, "blueprint does not change the state")
    refinement = refine_task(q0, s0, golden, client, bindings)
    sample = TaskSample(
        task_id=f"{env.name}-{index:05d}",
        env_id=env.name,
        question=refinement.text,
        initial_question=q0,
        initial_state=Snapshot.of(s0),
        golden_state=Snapshot.of(golden),
        taskgraph_id=graph.graph_id,
        tool_manifest_digest=env.manifest_digest,
        bindings=tuple(bindings),
        provenance={"seed": seed, "refined": refinement.refined, "refine_attempts": refinement.attempts},
    )
    if not sample.verify(env.tools):
        raise TaskRejected("golden_not_reproducible", None, "")
    return sample


def generate_tasks(
    env: Environment, graphs: Sequence[TaskGraph], client: GeneratorClient, cfg: GenerationConfig | None = None
) -> tuple[list[TaskSample], list[dict]]:
    """Run task generation over ``graphs``; returns (samples, rejection log).

    Results are ordered by graph index regardless of ``cfg.jobs``.  Every
    input graph ends up in exactly one of the two lists.
    """
    cfg = cfg or GenerationConfig()

    def job(item):
        index, graph = item
        try:
            return generate_task(index, graph, env, client, cfg)
        except (TaskRejected, EmptyGraph, SchemaViolation, ClientUnavailable, ClientResponseError) as exc:
            reason = getattr(exc, "reason", type(exc).__name__)
            return {
                "index": index,
                "taskgraph_id": graph.graph_id,
                "reason": reason,
                "node": getattr(exc, "node", None),
                "detail": getattr(exc, "detail", str(exc)),
            }

    items = list(enumerate(graphs))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(job, items))
    else:
        results = [job(it) for it in items]
    samples = [r for r in results if isinstance(r, TaskSample)]
    rejected = [r for r in results if not isinstance(r, TaskSample)]
    return samples, rejected


def dumps_sample(sample: TaskSample) -> str:
    return canonical_json(sample.to_json())
