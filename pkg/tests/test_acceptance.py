"""Acceptance checks, one test per criterion (several for the multi-part ones).

The terminal summary prints one PASS/FAIL line per criterion.
"""

import filecmp
import json
import random
import statistics
import struct
import time
from decimal import Decimal

import mpmath
import pytest

from envsynth.client import GeneratorClient, callable_backend
from envsynth.erpo import (
    AllMasked,
    EnvironmentGroup,
    ObjectiveConfig,
    QuestionGroup,
    RewardBatch,
    TrajectoryReward,
    compute_advantages,
    dynamic_filter,
    group_advantages,
    objective_value,
)
from envsynth.graphgen import (
    GraphEdge,
    ToolGraph,
    build_task_graph,
    find_cycle,
    random_walk,
    sample_sequences,
    topological_order,
)
from envsynth.rollout import LoopingPolicy, ReplayPolicy, RolloutLimits, ScriptedUser, run_rollout
from envsynth.statestore import StateDoc, state_equal, to_plain
from envsynth.taskgen import seeded_state
from envsynth.tooling import execute_tool

import oracles
from conftest import run_pipeline


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ---------------------------------------------------------------------------
# 1. reward oracle
# ---------------------------------------------------------------------------


@criterion(1, "reward agrees with deep-compare oracle on 1000+ state pairs in < 10 s")
def test_reward_matches_deep_compare_oracle(retail):
    schema = retail.schema
    rng = random.Random(1)
    t0 = time.perf_counter()
    outcomes = []
    for i in range(1200):
        base = to_plain(seeded_state(schema, rng.randrange(50), rng.randint(1, 6)).root)
        if rng.random() < 0.1:
            other = to_plain(seeded_state(schema, rng.randrange(50), rng.randint(1, 6)).root)
        else:
            other = oracles.perturb(base, rng)
        a, b = StateDoc.from_data(schema, base), StateDoc.from_data(schema, other)
        reward = int(state_equal(a, b))
        expected = int(oracles.deep_equal(base, other, schema.root))
        assert reward == expected, f"pair {i}: reward {reward}, oracle {expected}"
        outcomes.append(reward)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10, f"{elapsed:.1f}s"
    # both outcomes are well represented, so agreement is not vacuous
    assert 200 < sum(outcomes) < len(outcomes) - 200


# ---------------------------------------------------------------------------
# 2. group advantages
# ---------------------------------------------------------------------------


@criterion(2, "group advantages exact on [1,1,0,0]; sums vanish over 10 000 groups")
def test_group_advantages_worked_example():
    got = group_advantages([1, 1, 0, 0])
    assert got == [1.0, 1.0, -1.0, -1.0]
    assert [float(x) for x in oracles.exact_group_advantages([1, 1, 0, 0])] == got


@criterion(2, "group advantages exact on [1,1,0,0]; sums vanish over 10 000 groups")
def test_group_advantage_sums_vanish():
    rng = random.Random(2)
    worst = 0.0
    for _ in range(10_000):
        n = rng.randint(2, 16)
        rewards = [rng.randint(0, 1) for _ in range(n)]
        if len(set(rewards)) < 2:
            rewards[rng.randrange(n)] ^= 1
        adv = group_advantages(rewards)
        worst = max(worst, abs(sum(adv)))
        exact = oracles.exact_group_advantages(rewards)
        assert all(abs(x - float(e)) <= 1e-12 for x, e in zip(adv, exact))
    assert worst <= 1e-12, worst


# ---------------------------------------------------------------------------
# 3. environment advantages
# ---------------------------------------------------------------------------


def _batch(spec: dict) -> RewardBatch:
    """``spec``: env -> question -> list of rewards; ids are env/q/j."""
    return RewardBatch(tuple(
        EnvironmentGroup(e, tuple(
            QuestionGroup(q, tuple(TrajectoryReward(f"{e}/{q}/{j}", r) for j, r in enumerate(rs)))
            for q, rs in qs.items()
        ))
        for e, qs in spec.items()
    ))


def _random_spec(rng, envs=3, questions=4, size=6, mixed_env=True):
    spec = {}
    for e in range(rng.randint(1, envs)):
        qs = {f"q{q}": [rng.randint(0, 1) for _ in range(rng.randint(2, size))] for q in range(rng.randint(1, questions))}
        pooled = [r for rs in qs.values() for r in rs]
        if mixed_env and len(set(pooled)) < 2:
            first = next(iter(qs))
            qs[first][0] ^= 1
        spec[f"e{e}"] = qs
    return spec


@criterion(3, "env advantages: worked fixture, permutation invariance, single-question reduction")
def test_env_advantages_worked_fixture():
    batch = _batch({"E": {"Q1": [1, 0], "Q2": [1, 1]}})
    adv = {a.traj_id: a.advantage for a in compute_advantages(batch).advantages}
    exact = oracles.exact_env_advantages({"Q1": [("E/Q1/0", 1), ("E/Q1/1", 0)], "Q2": [("E/Q2/0", 1), ("E/Q2/1", 1)]})
    for tid, value in exact.items():
        assert abs(adv[tid] - float(value)) <= 1e-9
    assert abs(adv["E/Q1/0"] - 1.15470) < 1e-5 and abs(adv["E/Q1/1"] + 1.15470) < 1e-5
    assert adv["E/Q2/0"] == 0.0 and adv["E/Q2/1"] == 0.0


@criterion(3, "env advantages: worked fixture, permutation invariance, single-question reduction")
def test_env_advantages_match_oracle_and_ignore_order():
    rng = random.Random(3)
    for _ in range(500):
        spec = _random_spec(rng)
        base = {a.traj_id: a.advantage for a in compute_advantages(_batch(spec)).advantages}
        for e, qs in spec.items():
            exact = oracles.exact_env_advantages({q: [(f"{e}/{q}/{j}", r) for j, r in enumerate(rs)] for q, rs in qs.items()})
            for tid, v in exact.items():
                assert abs(base[tid] - float(v)) <= 1e-9
        # shuffle environments, questions and trajectories, keeping ids
        batch = _batch(spec)
        envs = list(batch.environments)
        rng.shuffle(envs)
        shuffled = []
        for env in envs:
            qs = list(env.questions)
            rng.shuffle(qs)
            new_qs = []
            for q in qs:
                ts = list(q.trajectories)
                rng.shuffle(ts)
                new_qs.append(QuestionGroup(q.question_id, tuple(ts)))
            shuffled.append(EnvironmentGroup(env.env_id, tuple(new_qs)))
        perm = {a.traj_id: a.advantage for a in compute_advantages(RewardBatch(tuple(shuffled))).advantages}
        assert perm.keys() == base.keys()
        for tid in base:
            assert struct.pack("<d", perm[tid]) == struct.pack("<d", base[tid])


@criterion(3, "env advantages: worked fixture, permutation invariance, single-question reduction")
def test_single_question_env_equals_group_mode():
    rng = random.Random(33)
    for _ in range(2000):
        n = rng.randint(2, 16)
        rewards = [rng.randint(0, 1) for _ in range(n)]
        if len(set(rewards)) < 2:
            rewards[0] ^= 1
        batch = _batch({"E": {"Q": rewards}})
        env = [a.advantage for a in sorted(compute_advantages(batch, mode="env").advantages, key=lambda a: int(a.traj_id.rsplit("/", 1)[1]))]
        assert env == group_advantages(rewards)


# ---------------------------------------------------------------------------
# 4. masking
# ---------------------------------------------------------------------------


def _random_batch_with_logprobs(rng) -> RewardBatch:
    envs = []
    for e in range(rng.randint(1, 3)):
        qs = []
        for q in range(rng.randint(1, 4)):
            ts = tuple(
                TrajectoryReward(f"e{e}/q{q}/{j}", rng.randint(0, 1), rng.random() > 0.2,
                                 rng.uniform(-2, 0), rng.uniform(-2, 0))
                for j in range(rng.randint(1, 6))
            )
            qs.append(QuestionGroup(f"q{q}", ts))
        envs.append(EnvironmentGroup(f"e{e}", tuple(qs)))
    return RewardBatch(tuple(envs))


def _objective(batch, cfg, mode):
    return objective_value(batch, compute_advantages(batch, cfg, mode, on_degenerate="zero"), cfg)


def _edit(batch, traj_id, fn):
    envs = []
    for env in batch.environments:
        qs = []
        for q in env.questions:
            ts = []
            for t in q.trajectories:
                if t.traj_id == traj_id:
                    t = fn(t)
                if t is not None:
                    ts.append(t)
            qs.append(QuestionGroup(q.question_id, tuple(ts)))
        envs.append(EnvironmentGroup(env.env_id, tuple(qs)))
    return RewardBatch(tuple(envs))


@criterion(4, "masking a trajectory equals deleting it; AllMasked iff everything is masked")
def test_masking_equals_deletion():
    from dataclasses import replace

    rng = random.Random(4)
    checked = 0
    for i in range(1000):
        batch = _random_batch_with_logprobs(rng)
        cfg = ObjectiveConfig(epsilon=rng.choice([0.1, 0.2, 0.3]), beta=rng.choice([0.0, 0.05, 0.5]),
                              kl_estimator=rng.choice(["k1", "k2", "k3"]))
        mode = rng.choice(["env", "group"])
        valid = [t.traj_id for _, _, t in batch.trajectories() if t.meu_ok]
        if len(valid) < 2:
            continue
        target = rng.choice(valid)
        flipped = _edit(batch, target, lambda t: replace(t, meu_ok=False))
        deleted = _edit(batch, target, lambda t: None)
        a, b = _objective(flipped, cfg, mode), _objective(deleted, cfg, mode)
        assert abs(a - b) <= 1e-12, (i, a, b)
        checked += 1
    assert checked >= 900


@criterion(4, "masking a trajectory equals deleting it; AllMasked iff everything is masked")
def test_all_masked_iff_every_trajectory_masked():
    from dataclasses import replace

    rng = random.Random(44)
    cfg = ObjectiveConfig()
    for _ in range(1000):
        batch = _random_batch_with_logprobs(rng)
        if rng.random() < 0.3:
            for _, _, t in list(batch.trajectories()):
                batch = _edit(batch, t.traj_id, lambda t: replace(t, meu_ok=False))
        all_masked = not any(t.meu_ok for _, _, t in batch.trajectories())
        try:
            _objective(batch, cfg, rng.choice(["env", "group"]))
            raised = False
        except AllMasked:
            raised = True
        assert raised == all_masked


# ---------------------------------------------------------------------------
# 5. dynamic filtering
# ---------------------------------------------------------------------------


@criterion(5, "dynamic filter removes exactly the all-0 / all-1 groups over 10 000 batches")
def test_dynamic_filter():
    rng = random.Random(5)
    for _ in range(10_000):
        batch = _random_batch_with_logprobs(rng)
        mixed, degenerate = set(), set()
        for env in batch.environments:
            for q in env.questions:
                rewards = {t.reward for t in q.trajectories if t.meu_ok}
                (mixed if rewards == {0, 1} else degenerate).add((env.env_id, q.question_id))
        kept = {(e.env_id, q.question_id) for e in dynamic_filter(batch).environments for q in e.questions}
        assert kept == mixed
        assert not kept & degenerate


# ---------------------------------------------------------------------------
# 6. task-graph soundness
# ---------------------------------------------------------------------------


def _adversarial_client(seed: int) -> GeneratorClient:
    """Scripted generator that proposes random, often invalid, reasoning nodes and edges."""
    rng = random.Random(seed)

    def respond(template, payload):
        if template == "merge_redundancy":
            seq = payload["sequence"]
            pairs = [[rng.choice(seq), rng.choice(seq)] for _ in range(rng.randint(0, 3))]
            return json.dumps({"redundant": pairs})
        if template == "reasoning_nodes":
            ids = [s["id"] for s in payload["steps"]] + ["r0", "r1", "nope"]
            nodes = [
                {"after": rng.choice(ids), "instruction": "derive", "inputs": rng.sample(ids, rng.randint(0, 3)),
                 "output": rng.choice(["x", "y", "z", "total", "1bad"])}
                for _ in range(rng.randint(0, 5))
            ]
            return json.dumps({"nodes": nodes})
        if template == "reasoning_edges":
            ids = payload["order"] + ["ghost"]
            edges = [{"src": rng.choice(ids), "dst": rng.choice(ids)} for _ in range(rng.randint(0, 8))]
            return json.dumps({"edges": edges})
        raise AssertionError(template)

    return GeneratorClient(callable_backend(respond))


def _random_tool_graph(rng) -> ToolGraph:
    n = rng.randint(1, 12)
    nodes = tuple(f"tool{i}" for i in range(n))
    p = rng.random()
    edges = tuple(GraphEdge(a, b, "heuristic") for a in nodes for b in nodes if a != b and rng.random() < p)
    return ToolGraph(nodes, edges)


@criterion(6, "10 000 merge + reasoning runs on random graphs stay acyclic and topologically ordered")
def test_task_graphs_are_acyclic():
    rng = random.Random(6)
    runs = 0
    while runs < 10_000:
        graph = _random_tool_graph(rng)
        client = _adversarial_client(runs)
        seqs = sample_sequences(graph, runs, n_walks=2, n_merges=1, min_len=1, max_len=12, client=client)
        for seq in seqs[-1:] if len(seqs) > 2 else seqs[:1]:
            tg = build_task_graph(seq, client)
            edges = [(e.src, e.dst) for e in tg.edges]
            assert not oracles.has_cycle(tg.order, edges)
            assert find_cycle(tg) is None
            assert oracles.is_topological(topological_order(tg), edges)
            assert oracles.is_topological(tg.order, edges)
            runs += 1


# ---------------------------------------------------------------------------
# 7. golden reproducibility
# ---------------------------------------------------------------------------


@criterion(7, "fixture tasks replay to their golden state; replay runs give byte-identical tasks.jsonl")
def test_fixture_tasks_replay_to_golden(fixture_tasks, retail):
    assert len(fixture_tasks) >= 20
    for task in fixture_tasks:
        assert task.verify(retail.tools), task.task_id
        # independent replay: fold the resolved tool calls by hand
        state = task.initial_state.payload
        for b in task.bindings:
            if b.kind != "tool":
                continue
            state, result = execute_tool(retail.tools[b.tool], b.resolved, state)
            assert result.ok, (task.task_id, b.node_id, result.error_code)
        assert state_equal(task.golden_state.payload, state), task.task_id
        assert not state_equal(task.initial_state.payload, state), task.task_id


@criterion(7, "fixture tasks replay to their golden state; replay runs give byte-identical tasks.jsonl")
def test_replay_runs_are_byte_identical(pipeline_dir, tmp_path):
    run_pipeline(tmp_path, ["synth-env", "build-graph", "sample-seqs", "gen-tasks"], extra=["--jobs", "4"])
    for name in ("tasks.jsonl", "tasks.rejected.jsonl", "taskgraphs.jsonl"):
        assert filecmp.cmp(pipeline_dir / name, tmp_path / name, shallow=False), name


# ---------------------------------------------------------------------------
# 8. scripted rollouts
# ---------------------------------------------------------------------------


@criterion(8, "scripted replay earns 1, skipping the last write earns 0, truncation earns 0")
def test_replay_policy_earns_reward(fixture_tasks, retail):
    for task in fixture_tasks:
        traj = run_rollout(task, retail.tools, ScriptedUser(), ReplayPolicy(retail.tools))
        assert traj.reward == 1 and not traj.truncated, task.task_id


@criterion(8, "scripted replay earns 1, skipping the last write earns 0, truncation earns 0")
def test_skip_last_mutating_earns_nothing(fixture_tasks, retail):
    for task in fixture_tasks:
        traj = run_rollout(task, retail.tools, ScriptedUser(), ReplayPolicy(retail.tools, skip_last_mutating=True))
        assert traj.reward == 0 and not traj.truncated, task.task_id


@criterion(8, "scripted replay earns 1, skipping the last write earns 0, truncation earns 0")
def test_truncation_earns_nothing(fixture_tasks, retail):
    for task in fixture_tasks:
        plan = ReplayPolicy(retail.tools).plan(task)
        # even when every golden call has run, hitting the cap is a failure
        for max_turns in (1, len(plan)):
            traj = run_rollout(task, retail.tools, ScriptedUser(), ReplayPolicy(retail.tools), RolloutLimits(max_turns))
            assert traj.truncated and traj.reward == 0
        traj = run_rollout(task, retail.tools, ScriptedUser(), LoopingPolicy(), RolloutLimits(5))
        assert traj.truncated and traj.reward == 0


# ---------------------------------------------------------------------------
# 9. execution latency
# ---------------------------------------------------------------------------


@criterion(9, "median execute_tool latency under 1 ms on a store of up to 10 000 entries")
def test_execute_tool_latency(retail):
    doc = seeded_state(retail.schema, 9, 3300)
    entries = sum(len(doc.root[a.name]) for a in retail.schema.attributes if a.kind == "list")
    assert 9000 < entries <= 10_000
    rng = random.Random(9)
    users = [u["user_id"] for u in doc.root["users"]]
    products = [p["product_id"] for p in doc.root["products"]]
    mix = [
        ("deposit", lambda: {"user_id": rng.choice(users), "amount": Decimal("5.00")}),
        ("get_balance", lambda: {"user_id": rng.choice(users)}),
        ("transfer", lambda: {"from_user_id": rng.choice(users), "to_user_id": rng.choice(users), "amount": Decimal("0.01")}),
        ("get_product", lambda: {"product_id": rng.choice(products)}),
        ("update_address", lambda: {"user_id": rng.choice(users), "address": "1 Bench Road"}),
    ]
    timings = []
    for i in range(2000):
        name, make = mix[i % len(mix)]
        args = make()
        t0 = time.perf_counter()
        doc, result = execute_tool(retail.tools[name], args, doc)
        timings.append(time.perf_counter() - t0)
        assert result.ok or result.error_code.startswith("EffectAssertFailed"), result.error_code
    median_ms = statistics.median(timings) * 1e3
    print(f"median execute_tool latency {median_ms:.3f} ms over {entries} entries")
    assert median_ms < 1.0


# ---------------------------------------------------------------------------
# 10. walk statistics
# ---------------------------------------------------------------------------


DIAMOND = ToolGraph(("A", "B", "C", "D"), tuple(GraphEdge(s, d, "heuristic") for s, d in
                                               [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")]))


@criterion(10, "diamond-graph branch frequency within 3 sigma of the binomial expectation")
def test_diamond_branch_frequency():
    n = 10_000
    left = sum(random_walk(DIAMOND, seed, 3, 3, start="A").steps[1] == "B" for seed in range(n))
    assert abs(left - n * 0.5) <= 3 * oracles.binomial_sigma(n, 0.5), left


@criterion(10, "diamond-graph branch frequency within 3 sigma of the binomial expectation")
def test_diamond_unforced_walks():
    n = 10_000
    walks = [random_walk(DIAMOND, seed, 3, 3).steps for seed in range(n)]
    starts_a = sum(w[0] == "A" for w in walks)
    assert abs(starts_a - n * 0.25) <= 3 * oracles.binomial_sigma(n, 0.25)
    through_b = sum(w[:2] == ("A", "B") for w in walks)
    assert abs(through_b - n * 0.125) <= 3 * oracles.binomial_sigma(n, 0.125)
