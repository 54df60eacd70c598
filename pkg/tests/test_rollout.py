import json
from dataclasses import replace
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envsynth.client import STOP_TOKEN, ClientUnavailable, GeneratorClient, callable_backend
from envsynth.statestore import Snapshot, StateError
from envsynth.tooling import ToolCallResult
from envsynth.rollout import (
    AskUser,
    LoopingPolicy,
    MixedReplayPolicy,
    RemotePolicy,
    RemoteUser,
    ReplayPolicy,
    RolloutLimits,
    ScriptedUser,
    Termination,
    ToolCall,
    ToolResult,
    Trajectory,
    UserClientUnavailable,
    UserMessage,
    instruction_display,
    is_stop,
    parse_action,
    parse_context,
    render_context,
    run_batch,
    run_rollout,
    with_meu,
)


def result(ok=True):
    return ToolResult(ToolCallResult(ok, {"balance": Decimal("1.50")} if ok else None,
                                     None if ok else "EffectAssertFailed:x", "0" * 64))


PREFIX = (
    UserMessage("Pay my order."),
    ToolCall("find_user_id_by_email", {"email": "a@example.com"}, "look up the user"),
    result(),
    ToolCall("get_balance", {"user_id": "U0001"}, "check funds"),
    result(),
    AskUser("Which order?", "two orders match"),
    UserMessage("O0001"),
)


# -- context rendering -------------------------------------------------------


def test_single_action_prefix_is_mode_independent():
    one = PREFIX[:2]
    assert render_context(one, "interleaved") == render_context(one, "stripped")
    assert render_context(one, "stripped")[1]["reasoning"] == "look up the user"


def test_stripped_mode_keeps_only_latest_reasoning():
    full = render_context(PREFIX, "interleaved")
    thin = render_context(PREFIX, "stripped")
    assert [m.get("reasoning") for m in full if m["role"] == "assistant"] == [
        "look up the user", "check funds", "two orders match"]
    assert [m.get("reasoning") for m in thin if m["role"] == "assistant"] == [None, None, "two orders match"]
    assert [(m["role"], m["content"]) for m in full] == [(m["role"], m["content"]) for m in thin]


def test_context_round_trip():
    closed = PREFIX + (AskUser("Done.", ""), Termination())
    assert parse_context(render_context(closed, "interleaved")) == list(closed)
    assert render_context(closed)[-1] == {"role": "user", "content": STOP_TOKEN}


def test_unknown_context_mode():
    with pytest.raises(ValueError):
        render_context(PREFIX, "verbose")


def test_parse_action_falls_back_to_message():
    assert parse_action("hello") == AskUser("hello")
    assert parse_action('{"x": 1}') == AskUser('{"x": 1}')
    call = parse_action('{"tool_call": {"name": "get_balance", "arguments": {"user_id": "U1"}}}', "r")
    assert call == ToolCall("get_balance", {"user_id": "U1"}, "r")


def test_stop_token_only_as_whole_message():
    assert is_stop(STOP_TOKEN) and is_stop(f"  {STOP_TOKEN}\n")
    assert not is_stop(f"Thanks! {STOP_TOKEN}")
    # a quoted token mid-conversation is an ordinary user message
    msgs = [{"role": "user", "content": STOP_TOKEN}, {"role": "assistant", "content": "ok"}]
    assert isinstance(parse_context(msgs)[0], UserMessage)


# -- single rollouts ---------------------------------------------------------


def test_replaying_stored_bindings_earns_reward(fixture_tasks, retail):
    task = fixture_tasks[0]
    traj = run_rollout(task, retail.tools, ScriptedUser(), ReplayPolicy(retail.tools))
    assert (traj.reward, traj.truncated, traj.failed_infra) == (1, False, None)
    assert isinstance(traj.turns[0], UserMessage) and traj.turns[0].text == task.question
    assert isinstance(traj.turns[-1], Termination)
    traj.check()


def test_skipping_the_last_write_loses_reward(fixture_tasks, retail):
    traj = run_rollout(fixture_tasks[0], retail.tools, ScriptedUser(), ReplayPolicy(retail.tools, True))
    assert (traj.reward, traj.truncated) == (0, False)


def test_looping_policy_is_truncated(fixture_tasks, retail):
    traj = run_rollout(fixture_tasks[0], retail.tools, ScriptedUser(), LoopingPolicy(), RolloutLimits(max_turns=4))
    assert (traj.reward, traj.truncated) == (0, True)
    assert len(traj.actions) == 4
    assert not isinstance(traj.turns[-1], Termination)


def test_unknown_tool_is_an_error_observation(fixture_tasks, retail):
    class Bogus:
        context_mode = "interleaved"

        def act(self, task, turns, sample):
            if len(turns) == 1:
                return ToolCall("launch_rocket", {})
            return AskUser("All done.")

    traj = run_rollout(fixture_tasks[0], retail.tools, ScriptedUser(), Bogus())
    obs = traj.turns[2]
    assert isinstance(obs, ToolResult) and obs.result.error_code == "UnknownTool:launch_rocket"
    assert traj.reward == 0


def test_tampered_initial_snapshot_is_refused(fixture_tasks, retail):
    task = fixture_tasks[0]
    other = Snapshot.of(task.golden_state.payload)
    bad = replace(task, initial_state=replace(task.initial_state, doc_hash=other.doc_hash))
    with pytest.raises(StateError):
        run_rollout(bad, retail.tools, ScriptedUser(), ReplayPolicy(retail.tools))


def test_trajectory_json_round_trip(fixture_tasks, retail):
    traj = run_rollout(fixture_tasks[1], retail.tools, ScriptedUser(), ReplayPolicy(retail.tools))
    obj = json.loads(json.dumps(traj.to_json()))
    again = Trajectory.from_json(obj, retail.schema)
    assert again.to_json() == traj.to_json()
    assert with_meu(traj, True, judge="x").meu_ok is True


def test_check_rejects_broken_alternation():
    base = Trajectory("t", "e", "t#0", (UserMessage("hi"), AskUser("ok"), Termination()), None, 0)
    base.check()
    for turns in [
        (AskUser("first"),),
        (UserMessage("hi"), UserMessage("again")),
        (UserMessage("hi"), Termination(), AskUser("late")),
    ]:
        with pytest.raises(ValueError):
            replace(base, turns=turns).check()
    with pytest.raises(ValueError):
        replace(base, truncated=True, reward=1).check()
    with pytest.raises(ValueError):
        replace(base, reward=None).check()


# -- remote agents -----------------------------------------------------------


def test_remote_user_gets_prompt_with_instruction(fixture_tasks, retail):
    seen = {}

    def reply(template, payload):
        seen.update(payload)
        return " Please pay it. "

    user = RemoteUser(GeneratorClient(callable_backend(reply), retries=0))
    task = fixture_tasks[0]
    assert user.respond(task, (), 0) == "Please pay it."
    assert instruction_display(task.question) in seen["system"]
    assert "{instruction_display}" not in seen["system"]


def test_remote_user_failure_is_infra(fixture_tasks, retail):
    def down(template, payload):
        raise ClientUnavailable("no route")

    user = RemoteUser(GeneratorClient(callable_backend(down), retries=0))
    traj = run_rollout(fixture_tasks[0], retail.tools, user, ReplayPolicy(retail.tools))
    assert traj.failed_infra == "user" and traj.reward is None


def test_remote_policy_parses_calls_and_messages(fixture_tasks, retail):
    answers = iter([
        json.dumps({"reasoning": "r", "tool_call": {"name": "get_balance", "arguments": {"user_id": "U0001"}}}),
        json.dumps({"ask_user": "Anything else?"}),
        "plain words",
    ])
    policy = RemotePolicy(GeneratorClient(callable_backend(lambda t, p: next(answers)), retries=0), retail.tools)
    task = fixture_tasks[0]
    assert policy.act(task, (), 0) == ToolCall("get_balance", {"user_id": "U0001"}, "r")
    assert policy.act(task, (), 0) == AskUser("Anything else?")
    assert policy.act(task, (), 0) == AskUser("plain words")


# -- batches -----------------------------------------------------------------


class FlakyUser(ScriptedUser):
    """Fails its opening turn for the listed sample indices."""

    def __init__(self, bad_samples):
        super().__init__()
        self.bad = set(bad_samples)

    def respond(self, task, turns, sample):
        if not turns and sample in self.bad:
            raise UserClientUnavailable(f"sample {sample}")
        return super().respond(task, turns, sample)


def test_batch_groups_by_task(fixture_tasks, retail):
    batch = run_batch(fixture_tasks[:2], retail.tools, M=3)
    assert len(batch.trajectories) == 6
    assert [g.task_id for g in batch.groups] == [t.task_id for t in fixture_tasks[:2]]
    assert all(len(g.trajectories) == 3 for g in batch.groups)
    assert batch.dropped == ()


def test_infra_failure_is_resampled_within_budget(fixture_tasks, retail):
    batch = run_batch(fixture_tasks[:1], retail.tools, M=3, user=FlakyUser({1}), retry_budget=1)
    (group,) = batch.groups
    assert len(group.trajectories) == 3
    assert [t.provenance["sample"] for t in group.trajectories] == [0, 2, 3]
    assert all(t.failed_infra is None for t in group.trajectories)


def test_group_dropped_past_budget(fixture_tasks, retail):
    batch = run_batch(fixture_tasks[:2], retail.tools, M=3, user=FlakyUser({0, 1}), retry_budget=1)
    assert batch.groups == ()
    assert [d["reason"] for d in batch.dropped] == ["infra:user", "infra:user"]


def test_batch_digest_is_stable(fixture_tasks, retail):
    policy = MixedReplayPolicy(retail.tools)
    a = run_batch(fixture_tasks[:4], retail.tools, M=4, policy=policy)
    b = run_batch(fixture_tasks[:4], retail.tools, M=4, policy=policy, jobs=3)
    assert a.digest == b.digest
    assert {t.reward for t in a.trajectories} == {0, 1}


def test_group_size_must_be_at_least_two(fixture_tasks, retail):
    with pytest.raises(ValueError):
        run_batch(fixture_tasks[:1], retail.tools, M=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 36), st.integers(1, 12), st.sampled_from(["interleaved", "stripped"]))
def test_rollout_invariants(fixture_tasks, retail, i, max_turns, mode):
    task = fixture_tasks[i % len(fixture_tasks)]
    policy = MixedReplayPolicy(retail.tools, period=2, context_mode=mode)
    traj = run_rollout(task, retail.tools, ScriptedUser(), policy, RolloutLimits(max_turns=max_turns), sample=i)
    traj.check()
    assert len(traj.actions) <= max_turns
    if traj.reward == 1:
        assert not traj.truncated
    # rendering then parsing gives back the same turns in interleaved mode
    assert parse_context(render_context(traj.turns, "interleaved")) == list(traj.turns)
