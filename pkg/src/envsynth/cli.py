"""Command-line pipeline: one subcommand per stage.

    envsynth synth-env    tool docs          -> env/<name>/
    envsynth build-graph  env                -> graph.json
    envsynth sample-seqs  graph.json         -> sequences.jsonl, taskgraphs.jsonl
    envsynth gen-tasks    taskgraphs.jsonl   -> tasks.jsonl, tasks.rejected.jsonl
    envsynth rollout      tasks.jsonl        -> trajectories.jsonl
    envsynth advantage    trajectories.jsonl -> advantages.jsonl, advantages.summary.json

Every stage writes ``<stage>.manifest.json`` next to its outputs with the
config digest and the SHA-256 of every input and output file.  Failures
print one JSON error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from . import erpo
from .client import Cassette, GeneratorClient, OpenAIChatBackend
from .environment import Environment, synthesize_environment, tool_docs_from_env
from .graphgen import (
    ToolGraph,
    TaskGraph,
    build_task_graph,
    build_tool_graph,
    read_jsonl,
    sample_sequences,
    write_jsonl,
)
from .heuristic import HeuristicBackend
from .rollout import (
    LoopingPolicy,
    MixedReplayPolicy,
    RemotePolicy,
    RemoteUser,
    ReplayPolicy,
    RolloutLimits,
    ScriptedUser,
    run_batch,
    with_meu,
)
from .statestore import canonical_json
from .taskgen import GenerationConfig, TaskSample, generate_tasks

log = logging.getLogger("envsynth")

BUNDLED_PREFIX = "bundled:"
EXIT_INPUT = 2
EXIT_STAGE = 1


class MissingInput(RuntimeError):
    pass


class ConfigInvalid(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ClientConfig:
    backend: str = "heuristic"  # heuristic | openai | none
    base_url: str = ""
    model: str = ""
    api_key_env: str = "ENVSYNTH_API_KEY"
    cassette: str = "cassette.jsonl"
    cassette_mode: str = "off"  # off | record | replay
    retries: int = 2


@dataclass
class ObjectiveSection:
    epsilon: float = 0.2
    beta: float = 0.0
    std_floor: float = 1e-6
    kl_estimator: str = "k3"
    mode: str = "env"
    dynamic_filter: bool = True


@dataclass
class PipelineConfig:
    env_name: str = "retail"
    tool_docs: str = "bundled:retail"
    seed: int = 0
    graph_mode: str = "heuristic"
    n_walks: int = 40
    n_merges: int = 10
    min_len: int = 3
    max_len: int = 8
    population: int = 20
    require_state_change: bool = True
    M: int = 8
    batch_size: int = 32
    max_turns: int = 40
    turn_timeout: float | None = None
    retry_budget: int = 2
    user: str = "scripted"  # scripted | remote
    user_prompt: str = "user_optimized.txt"
    policy: str = "replay"  # replay | replay_skip_last | replay_mixed | looping | remote
    context_mode: str = "interleaved"
    judge: bool = False
    jobs: int = 1
    client: ClientConfig = field(default_factory=ClientConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)

    @property
    def env_dir(self) -> str:
        return f"env/{self.env_name}"

    def validate(self) -> None:
        checks = [
            (self.M >= 2, "M must be at least 2"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (1 <= self.min_len <= self.max_len, "need 1 <= min_len <= max_len"),
            (self.max_turns >= 1, "max_turns must be positive"),
            (self.jobs >= 1, "jobs must be positive"),
            (self.graph_mode in ("heuristic", "llm"), "graph_mode must be heuristic or llm"),
            (self.user in ("scripted", "remote"), "user must be scripted or remote"),
            (self.policy in ("replay", "replay_skip_last", "replay_mixed", "looping", "remote"), "unknown policy"),
            (self.context_mode in ("interleaved", "stripped"), "unknown context_mode"),
            (self.client.backend in ("heuristic", "openai", "none"), "unknown client backend"),
            (self.client.cassette_mode in ("off", "record", "replay"), "unknown cassette_mode"),
            (self.objective.mode in ("env", "group"), "objective mode must be env or group"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigInvalid(message)
        try:
            self.objective_config()
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def objective_config(self) -> erpo.ObjectiveConfig:
        o = self.objective
        return erpo.ObjectiveConfig(o.epsilon, o.beta, o.std_floor, o.kl_estimator)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigInvalid(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        if k == "client":
            v = _build(ClientConfig, v, "client")
        elif k == "objective":
            v = _build(ObjectiveSection, v, "objective")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(f"{where}: {exc}") from exc


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file {path} not found")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    return _build(PipelineConfig, data, str(path))


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def bundled_env(name: str) -> Environment:
    with resources.as_file(resources.files("envsynth.fixtures").joinpath(name)) as path:
        return Environment.load(path)


def bundled_cassette(name: str) -> Path:
    with resources.as_file(resources.files("envsynth.fixtures").joinpath(name, "cassette.jsonl")) as path:
        return Path(path)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode() + b"\0")
                h.update(file_digest(p).encode())
        return h.hexdigest()
    h.update(path.read_bytes())
    return h.hexdigest()


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found at {path}")
    return path


def make_client(cfg: PipelineConfig, workdir: Path) -> GeneratorClient:
    c = cfg.client
    backend = None
    if c.backend == "heuristic":
        reference = None
        if cfg.tool_docs.startswith(BUNDLED_PREFIX):
            reference = bundled_env(cfg.tool_docs[len(BUNDLED_PREFIX):])
        backend = HeuristicBackend(reference)
    elif c.backend == "openai":
        if not c.base_url or not c.model:
            raise ConfigInvalid("openai backend needs client.base_url and client.model")
        backend = OpenAIChatBackend(c.base_url, c.model, c.api_key_env)
    cassette = None
    if c.cassette_mode != "off":
        path = Path(c.cassette)
        if c.cassette.startswith(BUNDLED_PREFIX):
            path = bundled_cassette(c.cassette[len(BUNDLED_PREFIX):])
        elif not path.is_absolute():
            path = workdir / path
        if c.cassette_mode == "replay" and not path.exists():
            raise ConfigInvalid(f"replay mode needs an existing cassette, {path} is missing")
        cassette = Cassette(path)
    if c.cassette_mode == "replay":
        backend = None
    return GeneratorClient(backend, cassette, c.cassette_mode, retries=c.retries)


def write_manifest(workdir: Path, stage: str, cfg: PipelineConfig, inputs: Sequence[Path], outputs: Sequence[Path],
                   extra: dict | None = None) -> Path:
    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(workdir))
        except ValueError:
            return str(p)

    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "config_digest": cfg.digest,
        "inputs": {rel(p): file_digest(p) for p in inputs},
        "outputs": {rel(p): file_digest(p) for p in outputs},
        **(extra or {}),
    }
    path = workdir / f"{stage}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_env(workdir: Path, cfg: PipelineConfig) -> Environment:
    return Environment.load(require(workdir / cfg.env_dir, "environment directory"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_synth_env(cfg: PipelineConfig, workdir: Path) -> dict:
    inputs: list[Path] = []
    if cfg.tool_docs.startswith(BUNDLED_PREFIX):
        docs = tool_docs_from_env(bundled_env(cfg.tool_docs[len(BUNDLED_PREFIX):]))
    else:
        docs_path = require(workdir / cfg.tool_docs, "tool documents")
        docs = json.loads(docs_path.read_text(encoding="utf-8"))
        inputs.append(docs_path)
    env = synthesize_environment(cfg.env_name, docs, make_client(cfg, workdir))
    out = env.save(workdir / cfg.env_dir)
    write_manifest(workdir, "synth-env", cfg, inputs, [out], {"tool_manifest_digest": env.manifest_digest})
    return {"environment": str(out), "tools": len(env.tools)}


def cmd_build_graph(cfg: PipelineConfig, workdir: Path) -> dict:
    env = load_env(workdir, cfg)
    client = make_client(cfg, workdir) if cfg.graph_mode == "llm" else None
    graph = build_tool_graph(list(env.tools.values()), client, cfg.graph_mode)
    out = workdir / "graph.json"
    out.write_text(json.dumps(graph.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (workdir / "graph.dot").write_text(graph.to_dot(), encoding="utf-8")
    write_manifest(workdir, "build-graph", cfg, [workdir / cfg.env_dir], [out])
    return {"nodes": len(graph.nodes), "edges": len(graph.edges)}


def cmd_sample_seqs(cfg: PipelineConfig, workdir: Path) -> dict:
    env = load_env(workdir, cfg)
    graph_path = require(workdir / "graph.json", "tool graph")
    graph = ToolGraph.from_json(json.loads(graph_path.read_text(encoding="utf-8")))
    client = make_client(cfg, workdir)
    seqs = sample_sequences(graph, cfg.seed, cfg.n_walks, cfg.n_merges, cfg.min_len, cfg.max_len, client, env.tools)
    task_graphs = [build_task_graph(s, client, env.tools) for s in seqs]
    seq_path, tg_path = workdir / "sequences.jsonl", workdir / "taskgraphs.jsonl"
    write_jsonl(seq_path, (s.to_json() for s in seqs))
    write_jsonl(tg_path, (g.to_json() for g in task_graphs))
    write_manifest(workdir, "sample-seqs", cfg, [graph_path, workdir / cfg.env_dir], [seq_path, tg_path])
    return {"sequences": len(seqs), "taskgraphs": len(task_graphs)}


def cmd_gen_tasks(cfg: PipelineConfig, workdir: Path) -> dict:
    env = load_env(workdir, cfg)
    tg_path = require(workdir / "taskgraphs.jsonl", "task graphs")
    graphs = [TaskGraph.from_json(r) for r in read_jsonl(tg_path)]
    client = make_client(cfg, workdir)
    gen_cfg = GenerationConfig(cfg.seed, cfg.population, cfg.require_state_change, cfg.jobs)
    samples, rejected = generate_tasks(env, graphs, client, gen_cfg)
    out, rej = workdir / "tasks.jsonl", workdir / "tasks.rejected.jsonl"
    write_jsonl(out, (s.to_json() for s in samples))
    write_jsonl(rej, rejected)
    write_manifest(workdir, "gen-tasks", cfg, [tg_path, workdir / cfg.env_dir], [out, rej])
    return {"tasks": len(samples), "rejected": len(rejected)}


def cmd_rollout(cfg: PipelineConfig, workdir: Path) -> dict:
    tasks_path = require(workdir / "tasks.jsonl", "tasks")
    env = load_env(workdir, cfg)
    tasks = [TaskSample.from_json(env.schema, r) for r in read_jsonl(tasks_path)]
    client = None
    if cfg.user == "remote" or cfg.policy == "remote" or cfg.judge:
        client = make_client(cfg, workdir)
    user = RemoteUser(client, cfg.user_prompt) if cfg.user == "remote" else ScriptedUser()
    if cfg.policy == "remote":
        policy = RemotePolicy(client, env.tools, cfg.context_mode)
    elif cfg.policy == "replay_mixed":
        policy = MixedReplayPolicy(env.tools, context_mode=cfg.context_mode)
    elif cfg.policy == "looping":
        policy = LoopingPolicy(context_mode=cfg.context_mode)
    else:
        policy = ReplayPolicy(env.tools, cfg.policy == "replay_skip_last", cfg.context_mode)
    limits = RolloutLimits(cfg.max_turns, cfg.turn_timeout)
    records, dropped = [], []
    by_id = {t.task_id: t for t in tasks}
    for b, start in enumerate(range(0, len(tasks), cfg.batch_size)):
        result = run_batch(tasks[start:start + cfg.batch_size], env.tools, cfg.M, user, policy, limits,
                           cfg.retry_budget, cfg.jobs)
        dropped += [{**d, "batch": b} for d in result.dropped]
        for traj in result.trajectories:
            if cfg.judge:
                j = erpo.judge_meu(traj, by_id[traj.task_id], client)
                traj = with_meu(traj, j.meu_ok, judge_raw=j.raw, judge_flag=j.flag)
            records.append({**traj.to_json(), "batch": b})
    out = workdir / "trajectories.jsonl"
    write_jsonl(out, records)
    write_manifest(workdir, "rollout", cfg, [tasks_path, workdir / cfg.env_dir], [out], {"dropped_groups": dropped})
    rewards = [r["reward"] for r in records]
    return {"trajectories": len(records), "reward_mean": sum(rewards) / len(rewards) if rewards else None,
            "dropped_groups": len(dropped)}


def cmd_advantage(cfg: PipelineConfig, workdir: Path, logprobs: str | None = None) -> dict:
    traj_path = require(workdir / "trajectories.jsonl", "trajectories")
    records = read_jsonl(traj_path)
    inputs = [traj_path]
    side = {}
    if logprobs:
        lp_path = require(workdir / logprobs, "logprob sidecar")
        side = {r["traj_id"]: r for r in read_jsonl(lp_path)}
        inputs.append(lp_path)
    ocfg = cfg.objective_config()
    out_rows: list[dict] = []
    summaries = []
    for b in sorted({r.get("batch", 0) for r in records}):
        batch = erpo.RewardBatch.from_records([r for r in records if r.get("batch", 0) == b], side)
        if cfg.objective.dynamic_filter:
            batch = erpo.dynamic_filter(batch)
        report = erpo.compute_advantages(batch, ocfg, cfg.objective.mode, on_degenerate="drop")
        try:
            j = erpo.objective_value(batch, report, ocfg) if report.advantages else None
        except erpo.AllMasked:
            j = None
        out_rows += [{**a, "batch": b} for a in erpo.advantage_records(report)]
        summaries.append({"batch": b, "objective": j, **report.summary()})
    out, summary_path = workdir / "advantages.jsonl", workdir / "advantages.summary.json"
    write_jsonl(out, out_rows)
    summary_path.write_text(json.dumps({"batches": summaries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(workdir, "advantage", cfg, inputs, [out, summary_path])
    return {"advantages": len(out_rows), "batches": len(summaries)}


STAGES = {
    "synth-env": cmd_synth_env,
    "build-graph": cmd_build_graph,
    "sample-seqs": cmd_sample_seqs,
    "gen-tasks": cmd_gen_tasks,
    "rollout": cmd_rollout,
    "advantage": cmd_advantage,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory all artifact paths are relative to")
    common.add_argument("--config", default=None, help="JSON pipeline config (defaults apply when omitted)")
    common.add_argument("--jobs", type=int, default=None, help="worker threads for the stage")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--cassette-mode", choices=("off", "record", "replay"), default=None,
                        help="generator cassette mode")
    common.add_argument("--cassette", default=None, help="cassette path (or bundled:<env>)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="envsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=STAGES[name].__name__.replace("cmd_", "").replace("_", " "))
        if name == "advantage":
            p.add_argument("--logprobs", default=None, help="JSONL sidecar with traj_id, logprob_new, logprob_old")
    return parser


def _error(kind: str, detail: str, code: int) -> int:
    print(canonical_json({"error": kind, "detail": detail}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    workdir = Path(args.workdir)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.cassette_mode is not None:
            cfg.client.cassette_mode = args.cassette_mode
        if args.cassette is not None:
            cfg.client.cassette = args.cassette
        cfg.validate()
        workdir.mkdir(parents=True, exist_ok=True)
        stage = STAGES[args.command]
        extra: dict[str, Any] = {"logprobs": args.logprobs} if args.command == "advantage" else {}
        result = stage(cfg, workdir, **extra)
    except MissingInput as exc:
        return _error("MissingInput", str(exc), EXIT_INPUT)
    except ConfigInvalid as exc:
        return _error("ConfigInvalid", str(exc), EXIT_INPUT)
    except Exception as exc:  # stage failures become a machine-readable record
        log.debug("stage failed", exc_info=True)
        return _error(type(exc).__name__, str(exc), EXIT_STAGE)
    print(canonical_json({"stage": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
