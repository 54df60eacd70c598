"""Tool dependency graphs, random-walk sampling and task-graph construction.

Pipeline per environment::

    build_tool_graph -> random_walk (many seeds) -> merge_sequences (pairs)
        -> insert_reasoning_nodes -> integrate_reasoning_edges -> TaskGraph

Every :class:`TaskGraph` keeps a linear node order with a dataflow edge
between consecutive nodes, and later edges may only point forward in that
order, so acyclicity holds by construction.  :func:`find_cycle` double
checks it on every graph this module returns.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .client import ClientResponseError, ClientUnavailable, GeneratorClient
from .statestore import NAME_RE, canonical_json
from .tooling import ToolSpec, kind_type, output_fields

log = logging.getLogger(__name__)

DEFAULT_MIN_LEN = 3
DEFAULT_MAX_LEN = 8


class EmptyGraph(ValueError):
    pass


class CycleError(ValueError):
    pass


def _digest(obj: Any, prefix: str) -> str:
    return prefix + hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def tool_summary(spec: ToolSpec) -> dict:
    return {
        "name": spec.name,
        "description": spec.description,
        "params": [p.to_json() for p in spec.params],
        "returns": spec.returns,
        "read_only": spec.is_read_only,
    }


# ---------------------------------------------------------------------------
# Tool graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphEdge:
    src: str
    dst: str
    judgement: str  # "llm" | "heuristic"
    rationale: str = ""


@dataclass(frozen=True)
class ToolGraph:
    nodes: tuple
    edges: tuple = ()

    def __post_init__(self):
        names = set(self.nodes)
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise ValueError(f"self-loop on {e.src}")
            if e.src not in names or e.dst not in names:
                raise ValueError(f"edge {e.src}->{e.dst} references unknown tool")
            if (e.src, e.dst) in seen:
                raise ValueError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))
        succ: dict[str, list[str]] = defaultdict(list)
        for e in self.edges:
            succ[e.src].append(e.dst)
        object.__setattr__(self, "_succ", {k: tuple(sorted(v)) for k, v in succ.items()})

    def successors(self, node: str) -> tuple:
        return self._succ.get(node, ())

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [
                {"src": e.src, "dst": e.dst, "judgement": e.judgement, "rationale": e.rationale}
                for e in self.edges
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToolGraph":
        return cls(
            tuple(obj["nodes"]),
            tuple(GraphEdge(e["src"], e["dst"], e.get("judgement", "heuristic"), e.get("rationale", "")) for e in obj["edges"]),
        )

    def to_dot(self) -> str:
        lines = ["digraph tools {"]
        lines += [f'  "{n}";' for n in self.nodes]
        lines += [f'  "{e.src}" -> "{e.dst}";' for e in self.edges]
        lines.append("}")
        return "\n".join(lines) + "\n"


def heuristic_matches(src: ToolSpec, dst: ToolSpec) -> list[str]:
    """Output fields of ``src`` that name-and-kind-match a required param of ``dst``."""
    outs = output_fields(src)
    hits = []
    for p in dst.params:
        if p.required and p.name in outs and outs[p.name] == kind_type(p.value_kind):
            hits.append(p.name)
    return hits


def build_tool_graph(
    tools: Sequence[ToolSpec], client: GeneratorClient | None = None, mode: str = "heuristic"
) -> ToolGraph:
    """Directed graph with an edge u->v when u's output can feed v.

    ``mode="llm"`` asks ``client`` about every ordered pair and propagates
    :class:`ClientUnavailable`.  ``mode="heuristic"`` matches output field
    names and kinds against required parameters (reference and text count
    as the same kind).
    """
    if not tools:
        raise EmptyGraph("empty tool manifest")
    tools = sorted(tools, key=lambda t: t.name)
    edges: list[GraphEdge] = []
    if mode == "heuristic":
        for u in tools:
            for v in tools:
                if u.name == v.name:
                    continue
                hits = heuristic_matches(u, v)
                if hits:
                    edges.append(GraphEdge(u.name, v.name, "heuristic", "matches " + ",".join(hits)))
    elif mode == "llm":
        if client is None or not client.available:
            raise ClientUnavailable("llm mode needs a generator client")
        for u in tools:
            for v in tools:
                if u.name == v.name:
                    continue
                try:
                    verdict = client.generate_json("edge_judge", {"source": tool_summary(u), "target": tool_summary(v)})
                except ClientResponseError as exc:
                    log.warning("edge judge %s->%s: %s", u.name, v.name, exc)
                    continue
                if isinstance(verdict, Mapping) and verdict.get("edge") is True:
                    edges.append(GraphEdge(u.name, v.name, "llm", str(verdict.get("rationale", ""))))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ToolGraph(tuple(t.name for t in tools), tuple(edges))


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolSequence:
    steps: tuple
    provenance: Mapping = field(default_factory=dict)

    @property
    def seq_id(self) -> str:
        return _digest({"steps": list(self.steps), "provenance": self.provenance}, "s")

    def to_json(self) -> dict:
        return {"seq_id": self.seq_id, "steps": list(self.steps), "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ToolSequence":
        return cls(tuple(obj["steps"]), obj.get("provenance", {}))


def random_walk(
    graph: ToolGraph,
    seed: int,
    min_len: int = DEFAULT_MIN_LEN,
    max_len: int = DEFAULT_MAX_LEN,
    start: str | None = None,
) -> ToolSequence:
    """Sample a tool sequence by walking ``graph``.

    The target length is drawn uniformly from ``[min_len, max_len]``, the
    start node uniformly from all nodes (unless ``start`` is forced) and
    every next step uniformly from the current node's successors.  The walk
    stops early at a sink, so it can come out shorter than ``min_len``.
    """
    if not graph.nodes:
        raise EmptyGraph("graph has no nodes")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"bad walk bounds [{min_len}, {max_len}]")
    rng = random.Random(seed)
    target = rng.randint(min_len, max_len)
    node = start if start is not None else rng.choice(sorted(graph.nodes))
    if node not in graph.nodes:
        raise ValueError(f"unknown start node {node!r}")
    steps = [node]
    while len(steps) < target:
        succ = graph.successors(node)
        if not succ:
            break
        node = rng.choice(succ)
        steps.append(node)
    prov = {"walk": {"seed": seed, "min_len": min_len, "max_len": max_len, "start": start}}
    return ToolSequence(tuple(steps), prov)


def _dedupe(steps: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for s in steps:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def merge_sequences(
    a: ToolSequence,
    b: ToolSequence,
    client: GeneratorClient | None = None,
    tools: Mapping[str, ToolSpec] | None = None,
) -> ToolSequence:
    """Concatenate ``a`` and ``b``, collapse repeated tools, then drop tools
    the client marks as redundant with an earlier one.

    Without a usable client only the duplicate collapse applies.
    """
    merged = _dedupe((*a.steps, *b.steps))
    prov: dict[str, Any] = {"merge": [a.seq_id, b.seq_id], "redundancy": "fallback"}
    if client is not None and client.available and len(merged) > 1:
        payload = {
            "sequence": merged,
            "sources": [list(a.steps), list(b.steps)],
            "tools": [tool_summary(tools[n]) for n in merged] if tools else merged,
        }
        try:
            reply = client.generate_json("merge_redundancy", payload)
        except (ClientUnavailable, ClientResponseError) as exc:
            log.info("merge fallback (%s)", exc)
        else:
            dropped: set[str] = set()
            for pair in reply.get("redundant", []) if isinstance(reply, Mapping) else []:
                if not (isinstance(pair, list) and len(pair) == 2):
                    continue
                kept, drop = pair
                if kept == drop or kept not in merged or drop not in merged or kept in dropped:
                    continue
                dropped.add(drop)
            merged = [s for s in merged if s not in dropped]
            prov["redundancy"] = "client"
            prov["dropped"] = sorted(dropped)
    return ToolSequence(tuple(merged), prov)


# ---------------------------------------------------------------------------
# Task graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolNode:
    id: str
    tool: str


@dataclass(frozen=True)
class ReasoningNode:
    id: str
    instruction: str
    inputs: tuple
    output: str


@dataclass(frozen=True)
class TaskEdge:
    src: str
    dst: str
    kind: str  # "dataflow" | "reasoning"
    rationale: str = ""


@dataclass(frozen=True)
class TaskGraph:
    """Blueprint DAG: tool nodes, reasoning nodes and typed edges.

    ``order`` is the linear node sequence the graph was built from; every
    edge points forward in it.
    """

    order: tuple
    tool_nodes: tuple
    reasoning_nodes: tuple = ()
    edges: tuple = ()
    provenance: Mapping = field(default_factory=dict)

    @property
    def graph_id(self) -> str:
        body = self.to_json(with_id=False)
        return _digest(body, "g")

    @property
    def node_ids(self) -> set:
        return {n.id for n in self.tool_nodes} | {n.id for n in self.reasoning_nodes}

    def node(self, node_id: str) -> ToolNode | ReasoningNode:
        for n in (*self.tool_nodes, *self.reasoning_nodes):
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def predecessors(self, node_id: str, kind: str | None = None) -> list[str]:
        return [e.src for e in self.edges if e.dst == node_id and (kind is None or e.kind == kind)]

    def to_json(self, with_id: bool = True) -> dict:
        out = {
            "order": list(self.order),
            "tool_nodes": [{"id": n.id, "tool": n.tool} for n in self.tool_nodes],
            "reasoning_nodes": [
                {"id": n.id, "instruction": n.instruction, "inputs": list(n.inputs), "output": n.output}
                for n in self.reasoning_nodes
            ],
            "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind, "rationale": e.rationale} for e in self.edges],
            "provenance": self.provenance,
        }
        if with_id:
            out = {"graph_id": self.graph_id, **out}
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "TaskGraph":
        return cls(
            order=tuple(obj["order"]),
            tool_nodes=tuple(ToolNode(n["id"], n["tool"]) for n in obj["tool_nodes"]),
            reasoning_nodes=tuple(
                ReasoningNode(n["id"], n["instruction"], tuple(n["inputs"]), n["output"]) for n in obj["reasoning_nodes"]
            ),
            edges=tuple(TaskEdge(e["src"], e["dst"], e["kind"], e.get("rationale", "")) for e in obj["edges"]),
            provenance=obj.get("provenance", {}),
        )

    def to_dot(self) -> str:
        lines = ["digraph task {"]
        for n in self.tool_nodes:
            lines.append(f'  "{n.id}" [label="{n.tool}", shape=box];')
        for n in self.reasoning_nodes:
            lines.append(f'  "{n.id}" [label="{n.output}", shape=ellipse];')
        for e in self.edges:
            style = "dashed" if e.kind == "reasoning" else "solid"
            lines.append(f'  "{e.src}" -> "{e.dst}" [style={style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def find_cycle(graph: TaskGraph) -> list[str] | None:
    """Return one cycle as a node list, or None when the graph is acyclic."""
    succ: dict[str, list[str]] = defaultdict(list)
    for e in graph.edges:
        succ[e.src].append(e.dst)
    color = {n: 0 for n in graph.node_ids}
    stack_path: list[str] = []

    def visit(n: str) -> list[str] | None:
        color[n] = 1
        stack_path.append(n)
        for m in succ[n]:
            if color.get(m, 0) == 1:
                return stack_path[stack_path.index(m):] + [m]
            if color.get(m, 0) == 0:
                found = visit(m)
                if found:
                    return found
        stack_path.pop()
        color[n] = 2
        return None

    for n in graph.order:
        if color.get(n) == 0:
            found = visit(n)
            if found:
                return found
    return None


def topological_order(graph: TaskGraph) -> list[str]:
    """Kahn's algorithm; ties broken by position in ``graph.order``."""
    pos = {n: i for i, n in enumerate(graph.order)}
    indeg = {n: 0 for n in graph.order}
    succ: dict[str, list[str]] = defaultdict(list)
    for e in graph.edges:
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
    ready = sorted((n for n, d in indeg.items() if d == 0), key=pos.__getitem__)
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort(key=pos.__getitem__)
    if len(out) != len(graph.order):
        raise CycleError("task graph has a cycle")
    return out


def _checked(graph: TaskGraph) -> TaskGraph:
    cycle = find_cycle(graph)
    if cycle:
        raise CycleError(f"cycle {' -> '.join(cycle)}")
    return graph


def _chain_edges(order: Sequence[str]) -> list[TaskEdge]:
    return [TaskEdge(a, b, "dataflow") for a, b in zip(order, order[1:])]


def linear_task_graph(seq: ToolSequence) -> TaskGraph:
    nodes = tuple(ToolNode(f"t{i}", name) for i, name in enumerate(seq.steps))
    order = tuple(n.id for n in nodes)
    return _checked(TaskGraph(order, nodes, (), tuple(_chain_edges(order)), {"sequence": seq.seq_id}))


def insert_reasoning_nodes(
    seq: ToolSequence,
    client: GeneratorClient | None = None,
    tools: Mapping[str, ToolSpec] | None = None,
) -> TaskGraph:
    """Interleave reasoning nodes proposed by ``client`` into ``seq``.

    A proposal is kept only if it sits after an existing node, reads at
    least one node placed before it, and names a fresh output binding; at
    most ``len(seq)`` nodes are added.
    """
    if not seq.steps:
        raise EmptyGraph("empty tool sequence")
    base = linear_task_graph(seq)
    if client is None or not client.available:
        return base
    payload = {
        "steps": [
            {"id": n.id, "tool": n.tool, "returns": tools[n.tool].returns if tools and n.tool in tools else None}
            for n in base.tool_nodes
        ],
        "max_nodes": len(seq.steps),
    }
    try:
        reply = client.generate_json("reasoning_nodes", payload)
    except (ClientUnavailable, ClientResponseError) as exc:
        log.info("reasoning-node fallback (%s)", exc)
        return base
    proposals = reply.get("nodes", []) if isinstance(reply, Mapping) else []
    order = list(base.order)
    outputs: set[str] = set()
    added: list[ReasoningNode] = []
    for prop in proposals:
        if len(added) >= len(seq.steps):
            log.warning("dropping reasoning proposals beyond %d", len(seq.steps))
            break
        if not isinstance(prop, Mapping):
            continue
        after = prop.get("after")
        inputs = prop.get("inputs") or []
        output = prop.get("output")
        instruction = str(prop.get("instruction", "")).strip()
        if after not in order or not instruction or not isinstance(output, str) or not NAME_RE.match(output):
            log.warning("rejecting malformed reasoning node %r", prop)
            continue
        if output in outputs:
            log.warning("rejecting reasoning node with duplicate output %r", output)
            continue
        # insert after `after` and after any reasoning nodes already hanging off it
        at = order.index(after) + 1
        while at < len(order) and order[at].startswith("r"):
            at += 1
        earlier = set(order[:at])
        if not inputs or not all(isinstance(i, str) and i in earlier for i in inputs):
            log.warning("rejecting reasoning node reading non-earlier inputs %r", inputs)
            continue
        node = ReasoningNode(f"r{len(added)}", instruction, tuple(dict.fromkeys(inputs)), output)
        order.insert(at, node.id)
        added.append(node)
        outputs.add(output)
    edges = _chain_edges(order)
    present = {(e.src, e.dst) for e in edges}
    for node in added:
        for src in node.inputs:
            if (src, node.id) not in present:
                edges.append(TaskEdge(src, node.id, "dataflow"))
                present.add((src, node.id))
    prov = {**base.provenance, "reasoning_nodes": len(added)}
    return _checked(TaskGraph(tuple(order), base.tool_nodes, tuple(added), tuple(edges), prov))


def integrate_reasoning_edges(
    graph: TaskGraph, client: GeneratorClient | None = None, tools: Mapping[str, ToolSpec] | None = None
) -> TaskGraph:
    """Add client-proposed reasoning edges that point forward in topological order.

    Backward, self, unknown-endpoint and duplicate proposals are rejected
    and logged.
    """
    _checked(graph)
    if client is None or not client.available:
        return graph
    topo = topological_order(graph)
    pos = {n: i for i, n in enumerate(topo)}
    payload = {
        "order": topo,
        "tool_nodes": [{"id": n.id, "tool": n.tool} for n in graph.tool_nodes],
        "reasoning_nodes": [
            {"id": n.id, "instruction": n.instruction, "output": n.output} for n in graph.reasoning_nodes
        ],
        "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind} for e in graph.edges],
    }
    if tools:
        payload["tools"] = [tool_summary(tools[n]) for n in sorted({t.tool for t in graph.tool_nodes}) if n in tools]
    try:
        reply = client.generate_json("reasoning_edges", payload)
    except (ClientUnavailable, ClientResponseError) as exc:
        log.info("reasoning-edge fallback (%s)", exc)
        return graph
    proposals = reply.get("edges", []) if isinstance(reply, Mapping) else []
    existing = {(e.src, e.dst, e.kind) for e in graph.edges}
    new_edges = list(graph.edges)
    rejected = 0
    for prop in proposals:
        src = prop.get("src") if isinstance(prop, Mapping) else None
        dst = prop.get("dst") if isinstance(prop, Mapping) else None
        if src not in pos or dst not in pos:
            log.warning("rejected reasoning edge %r: unknown endpoint", prop)
            rejected += 1
        elif pos[src] >= pos[dst]:
            log.warning("rejected reasoning edge %s->%s: not forward in topological order", src, dst)
            rejected += 1
        elif (src, dst, "reasoning") in existing:
            log.warning("rejected reasoning edge %s->%s: duplicate", src, dst)
            rejected += 1
        else:
            new_edges.append(TaskEdge(src, dst, "reasoning", str(prop.get("rationale", ""))))
            existing.add((src, dst, "reasoning"))
    prov = {**graph.provenance, "reasoning_edges": len(new_edges) - len(graph.edges), "rejected_edges": rejected}
    return _checked(TaskGraph(graph.order, graph.tool_nodes, graph.reasoning_nodes, tuple(new_edges), prov))


def build_task_graph(
    seq: ToolSequence, client: GeneratorClient | None = None, tools: Mapping[str, ToolSpec] | None = None
) -> TaskGraph:
    return integrate_reasoning_edges(insert_reasoning_nodes(seq, client, tools), client, tools)


# ---------------------------------------------------------------------------
# Sampling driver and persistence
# ---------------------------------------------------------------------------


def sample_sequences(
    graph: ToolGraph,
    seed: int,
    n_walks: int,
    n_merges: int,
    min_len: int = DEFAULT_MIN_LEN,
    max_len: int = DEFAULT_MAX_LEN,
    client: GeneratorClient | None = None,
    tools: Mapping[str, ToolSpec] | None = None,
) -> list[ToolSequence]:
    """Walk ``n_walks`` times, then merge ``n_merges`` random pairs of walks.

    Walk ``i`` uses seed ``seed + i``; merge pairs come from a separate
    generator seeded with ``seed``.
    """
    walks = [random_walk(graph, seed + i, min_len, max_len) for i in range(n_walks)]
    rng = random.Random(f"merge:{seed}")
    merged = []
    for _ in range(n_merges if len(walks) >= 2 else 0):
        i, j = rng.sample(range(len(walks)), 2)
        merged.append(merge_sequences(walks[i], walks[j], client, tools))
    return walks + merged


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
