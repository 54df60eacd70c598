"""User-centred rollout loop.

A user agent opens the conversation with the task's request; the policy
then either calls a tool (executed on the rollout's private copy of the
initial state) or writes to the user.  The episode ends when the user
answers with the stop token as a standalone message, or after
``max_turns`` policy actions.  The reward is 1 exactly when the final
state equals the golden state.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Protocol, Sequence, Union

from .client import STOP_TOKEN, ClientResponseError, ClientUnavailable, GeneratorClient, parse_json_response, prompt_asset
from .graphgen import tool_summary
from .statestore import (
    AttributeSchema,
    Snapshot,
    StateError,
    canonical_json,
    decode_value,
    doc_digest,
    encode_value,
    freeze,
    state_equal,
)
from .taskgen import TaskSample
from .tooling import ToolCallResult, ToolSpec, execute_tool

log = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 40
DEFAULT_M = 8
DONE_MESSAGE = "All done. Your request has been completed."
DONE_MARKERS = ("all done", "completed", "is done")


class UserClientUnavailable(RuntimeError):
    pass


class PolicyClientUnavailable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Actions and observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: Mapping
    reasoning: str = ""


@dataclass(frozen=True)
class AskUser:
    message: str
    reasoning: str = ""


@dataclass(frozen=True)
class ToolResult:
    result: ToolCallResult


@dataclass(frozen=True)
class UserMessage:
    text: str


@dataclass(frozen=True)
class Termination:
    reason: str = "stop"


AgentAction = Union[ToolCall, AskUser]
Observation = Union[ToolResult, UserMessage, Termination]


def turn_to_json(turn) -> dict:
    if isinstance(turn, ToolCall):
        return {"type": "tool_call", "name": turn.name, "args": encode_value(dict(turn.args)), "reasoning": turn.reasoning}
    if isinstance(turn, AskUser):
        return {"type": "ask_user", "message": turn.message, "reasoning": turn.reasoning}
    if isinstance(turn, ToolResult):
        return {"type": "tool_result", "result": turn.result.to_json()}
    if isinstance(turn, UserMessage):
        return {"type": "user_message", "text": turn.text}
    if isinstance(turn, Termination):
        return {"type": "termination", "reason": turn.reason}
    raise TypeError(f"not a turn: {turn!r}")


def turn_from_json(obj: Mapping):
    kind = obj["type"]
    if kind == "tool_call":
        return ToolCall(obj["name"], freeze(decode_value(obj["args"])), obj.get("reasoning", ""))
    if kind == "ask_user":
        return AskUser(obj["message"], obj.get("reasoning", ""))
    if kind == "tool_result":
        return ToolResult(ToolCallResult.from_json(obj["result"]))
    if kind == "user_message":
        return UserMessage(obj["text"])
    if kind == "termination":
        return Termination(obj.get("reason", "stop"))
    raise ValueError(f"unknown turn type {kind!r}")


@dataclass(frozen=True)
class Trajectory:
    """One episode: ``turns`` is o_0, a_1, o_1, ..., a_n, o_n.

    ``reward`` is None only for infrastructure failures (``failed_infra``
    set); truncated episodes carry reward 0.
    """

    task_id: str
    env_id: str
    traj_id: str
    turns: tuple
    final_state: Snapshot | None
    reward: int | None
    truncated: bool = False
    meu_ok: bool | None = None
    logprob_new: float | None = None
    logprob_old: float | None = None
    failed_infra: str | None = None
    provenance: Mapping = field(default_factory=dict)

    def check(self) -> None:
        """Raise ``ValueError`` unless the structural invariants hold."""
        if not self.turns or not isinstance(self.turns[0], UserMessage):
            raise ValueError("trajectory must open with a user message")
        for i, t in enumerate(self.turns):
            want = (ToolCall, AskUser) if i % 2 else (ToolResult, UserMessage, Termination)
            if not isinstance(t, want):
                raise ValueError(f"turn {i} breaks alternation: {type(t).__name__}")
            if isinstance(t, Termination) and i != len(self.turns) - 1:
                raise ValueError("termination before the last turn")
        if self.failed_infra is None:
            if self.reward not in (0, 1):
                raise ValueError(f"reward {self.reward!r} not binary")
            if self.truncated and self.reward != 0:
                raise ValueError("truncated trajectory with nonzero reward")

    @property
    def actions(self) -> list:
        return list(self.turns[1::2])

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "env_id": self.env_id,
            "traj_id": self.traj_id,
            "turns": [turn_to_json(t) for t in self.turns],
            "final_state": self.final_state.to_json() if self.final_state else None,
            "reward": self.reward,
            "truncated": self.truncated,
            "meu_ok": self.meu_ok,
            "logprob_new": self.logprob_new,
            "logprob_old": self.logprob_old,
            "failed_infra": self.failed_infra,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: Mapping, schema: AttributeSchema | None = None) -> "Trajectory":
        final = obj.get("final_state")
        return cls(
            task_id=obj["task_id"],
            env_id=obj["env_id"],
            traj_id=obj["traj_id"],
            turns=tuple(turn_from_json(t) for t in obj["turns"]),
            final_state=Snapshot.from_json(schema, final) if final and schema is not None else None,
            reward=obj.get("reward"),
            truncated=bool(obj.get("truncated", False)),
            meu_ok=obj.get("meu_ok"),
            logprob_new=obj.get("logprob_new"),
            logprob_old=obj.get("logprob_old"),
            failed_infra=obj.get("failed_infra"),
            provenance=obj.get("provenance", {}),
        )


# ---------------------------------------------------------------------------
# Context rendering
# ---------------------------------------------------------------------------


def _action_content(a: AgentAction) -> str:
    if isinstance(a, ToolCall):
        return canonical_json({"tool_call": {"name": a.name, "arguments": encode_value(dict(a.args))}})
    return a.message


def render_context(turns: Sequence, mode: str = "interleaved") -> list[dict]:
    """Chat messages for a trajectory prefix.

    ``interleaved`` keeps every assistant turn's reasoning; ``stripped``
    keeps it only on the latest assistant turn.  Action and observation
    text is identical in both modes.
    """
    if mode not in ("interleaved", "stripped"):
        raise ValueError(f"unknown context mode {mode!r}")
    last_action = max((i for i, t in enumerate(turns) if isinstance(t, (ToolCall, AskUser))), default=-1)
    out = []
    for i, t in enumerate(turns):
        if isinstance(t, (ToolCall, AskUser)):
            msg = {"role": "assistant", "content": _action_content(t)}
            if t.reasoning and (mode == "interleaved" or i == last_action):
                msg["reasoning"] = t.reasoning
        elif isinstance(t, ToolResult):
            msg = {"role": "tool", "content": canonical_json(t.result.to_json())}
        elif isinstance(t, UserMessage):
            msg = {"role": "user", "content": t.text}
        elif isinstance(t, Termination):
            msg = {"role": "user", "content": STOP_TOKEN}
        else:
            raise TypeError(f"not a turn: {t!r}")
        out.append(msg)
    return out


def parse_action(content: str, reasoning: str = "") -> AgentAction:
    try:
        obj = json.loads(content)
    except json.JSONDecodeError:
        return AskUser(content, reasoning)
    if isinstance(obj, Mapping) and isinstance(obj.get("tool_call"), Mapping):
        call = obj["tool_call"]
        return ToolCall(call["name"], freeze(decode_value(call.get("arguments", {}))), reasoning)
    return AskUser(content, reasoning)


def parse_context(messages: Sequence[Mapping]) -> list:
    """Inverse of :func:`render_context` (reasoning only where it was kept)."""
    turns = []
    for i, m in enumerate(messages):
        role, content = m["role"], m["content"]
        if role == "assistant":
            turns.append(parse_action(content, m.get("reasoning", "")))
        elif role == "tool":
            turns.append(ToolResult(ToolCallResult.from_json(json.loads(content))))
        elif role == "user":
            if i == len(messages) - 1 and i > 0 and content == STOP_TOKEN:
                turns.append(Termination())
            else:
                turns.append(UserMessage(content))
        else:
            raise ValueError(f"unknown role {role!r}")
    return turns


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


class UserAgent(Protocol):
    def respond(self, task: TaskSample, turns: Sequence, sample: int) -> str: ...


class PolicyAgent(Protocol):
    context_mode: str

    def act(self, task: TaskSample, turns: Sequence, sample: int) -> AgentAction: ...


def is_stop(text: str) -> bool:
    return text.strip() == STOP_TOKEN


@dataclass
class ScriptedUser:
    """Opens with the task question, answers with canned ``replies`` in
    order, and stops once the agent reports completion."""

    replies: Sequence[str] = ()
    fallback: str = "Please go ahead with my request."
    opening: str | None = None

    def respond(self, task: TaskSample, turns: Sequence, sample: int) -> str:
        if not turns:
            return self.opening if self.opening is not None else task.question
        last = turns[-1]
        if isinstance(last, AskUser) and any(m in last.message.lower() for m in DONE_MARKERS):
            return STOP_TOKEN
        asked = sum(1 for t in turns if isinstance(t, AskUser)) - 1
        return self.replies[asked] if 0 <= asked < len(self.replies) else self.fallback


def instruction_display(question: str) -> str:
    return f"\n\nInstruction: {question}\n"


@dataclass
class RemoteUser:
    """User simulated by a generator client with a shipped system prompt."""

    client: GeneratorClient
    prompt: str = "user_optimized.txt"

    def respond(self, task: TaskSample, turns: Sequence, sample: int) -> str:
        system = prompt_asset(self.prompt).replace("{instruction_display}", instruction_display(task.question))
        conversation = [
            {"role": "user" if m["role"] == "user" else "agent", "text": m["content"]}
            for m in render_context(turns, "stripped")
            if m["role"] != "tool"
        ]
        payload = {"system": system, "instruction": task.question, "conversation": conversation, "sample": sample}
        try:
            return self.client.generate("user_turn", payload).strip()
        except ClientUnavailable as exc:
            raise UserClientUnavailable(str(exc)) from exc


@dataclass
class ReplayPolicy:
    """Replays the task's stored tool bindings, then reports completion.

    With ``skip_last_mutating`` the last binding whose tool writes state is
    left out (needs ``tools`` to know which tools write).
    """

    tools: Mapping[str, ToolSpec] | None = None
    skip_last_mutating: bool = False
    context_mode: str = "interleaved"

    def plan(self, task: TaskSample) -> list:
        calls = [b for b in task.bindings if b.kind == "tool"]
        if self.skip_last_mutating:
            if self.tools is None:
                raise ValueError("skip_last_mutating needs the tool specs")
            mutating = [i for i, b in enumerate(calls) if not self.tools[b.tool].is_read_only]
            if mutating:
                del calls[mutating[-1]]
        return calls

    def act(self, task: TaskSample, turns: Sequence, sample: int) -> AgentAction:
        plan = self.plan(task)
        done = sum(1 for t in turns if isinstance(t, ToolCall))
        if done < len(plan):
            b = plan[done]
            return ToolCall(b.tool, b.resolved, f"Step {done + 1} of {len(plan)}: {b.tool}.")
        return AskUser(DONE_MESSAGE, "Every step of the plan has run.")


@dataclass
class MixedReplayPolicy:
    """Replay policy that drops the last mutating call on every
    ``period``-th sample, giving groups with mixed rewards."""

    tools: Mapping[str, ToolSpec]
    period: int = 3
    context_mode: str = "interleaved"

    def act(self, task: TaskSample, turns: Sequence, sample: int) -> AgentAction:
        skip = sample % self.period == self.period - 1
        return ReplayPolicy(self.tools, skip, self.context_mode).act(task, turns, sample)


@dataclass
class LoopingPolicy:
    """Never acts; keeps asking the user.  Used to exercise truncation."""

    message: str = "Could you tell me more about what you need?"
    context_mode: str = "interleaved"

    def act(self, task: TaskSample, turns: Sequence, sample: int) -> AgentAction:
        return AskUser(self.message, "Need more information.")


@dataclass
class RemotePolicy:
    client: GeneratorClient
    tools: Mapping[str, ToolSpec]
    context_mode: str = "interleaved"

    def act(self, task: TaskSample, turns: Sequence, sample: int) -> AgentAction:
        payload = {
            "tools": [tool_summary(t) for _, t in sorted(self.tools.items())],
            "context": render_context(turns, self.context_mode),
            "sample": sample,
        }
        try:
            text = self.client.generate("policy_turn", payload)
        except ClientUnavailable as exc:
            raise PolicyClientUnavailable(str(exc)) from exc
        try:
            obj = parse_json_response(text)
        except ClientResponseError:
            return AskUser(text.strip())
        reasoning = str(obj.get("reasoning", "")) if isinstance(obj, Mapping) else ""
        if isinstance(obj, Mapping) and isinstance(obj.get("tool_call"), Mapping):
            call = obj["tool_call"]
            args = call.get("arguments", {})
            return ToolCall(str(call.get("name", "")), freeze(decode_value(args if isinstance(args, Mapping) else {})), reasoning)
        if isinstance(obj, Mapping) and "ask_user" in obj:
            return AskUser(str(obj["ask_user"]), reasoning)
        return AskUser(text.strip(), reasoning)


# ---------------------------------------------------------------------------
# Rollout loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutLimits:
    max_turns: int = DEFAULT_MAX_TURNS
    turn_timeout: float | None = None


def _timed(fn: Callable, timeout: float | None, on_timeout: type[Exception]):
    if timeout is None:
        return fn()
    pool = ThreadPoolExecutor(1)
    try:
        return pool.submit(fn).result(timeout=timeout)
    except FutureTimeout:
        raise on_timeout(f"turn exceeded {timeout}s") from None
    finally:
        pool.shutdown(wait=False)


def execute_action(call: ToolCall, tools: Mapping[str, ToolSpec], state):
    spec = tools.get(call.name)
    if spec is None:
        return state, ToolCallResult(False, None, f"UnknownTool:{call.name}", state.digest.hex())
    return execute_tool(spec, call.args, state)


def run_rollout(
    task: TaskSample,
    tools: Mapping[str, ToolSpec],
    user: UserAgent,
    policy: PolicyAgent,
    limits: RolloutLimits = RolloutLimits(),
    traj_id: str | None = None,
    sample: int = 0,
) -> Trajectory:
    state = task.initial_state.payload
    if doc_digest(state) != task.initial_state.doc_hash:
        raise StateError(f"{task.task_id}: initial snapshot does not match its hash")
    traj_id = traj_id or f"{task.task_id}#{sample}"
    turns: list = []

    def failed(kind: str, exc: Exception) -> Trajectory:
        log.warning("%s: %s client failure: %s", traj_id, kind, exc)
        if not turns:
            turns.append(UserMessage(""))
        return Trajectory(task.task_id, task.env_id, traj_id, tuple(turns), None, None, False,
                          failed_infra=kind, provenance={"error": str(exc)})

    try:
        opening = _timed(lambda: user.respond(task, (), sample), limits.turn_timeout, UserClientUnavailable)
    except UserClientUnavailable as exc:
        return failed("user", exc)
    turns.append(UserMessage(opening))
    terminated = False
    n_actions = 0
    while n_actions < limits.max_turns:
        try:
            action = _timed(lambda: policy.act(task, tuple(turns), sample), limits.turn_timeout, PolicyClientUnavailable)
        except PolicyClientUnavailable as exc:
            return failed("policy", exc)
        turns.append(action)
        n_actions += 1
        if isinstance(action, ToolCall):
            state, result = execute_action(action, tools, state)
            turns.append(ToolResult(result))
            continue
        try:
            reply = _timed(lambda: user.respond(task, tuple(turns), sample), limits.turn_timeout, UserClientUnavailable)
        except UserClientUnavailable as exc:
            return failed("user", exc)
        if is_stop(reply):
            turns.append(Termination())
            terminated = True
            break
        turns.append(UserMessage(reply))
    truncated = not terminated
    reward = 0 if truncated else int(state_equal(task.golden_state.payload, state))
    traj = Trajectory(
        task.task_id, task.env_id, traj_id, tuple(turns), Snapshot.of(state), reward, truncated,
        provenance={"sample": sample, "context_mode": getattr(policy, "context_mode", "interleaved")},
    )
    traj.check()
    return traj


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryGroup:
    env_id: str
    task_id: str
    trajectories: tuple


@dataclass(frozen=True)
class BatchResult:
    groups: tuple
    dropped: tuple = ()

    @property
    def trajectories(self) -> list[Trajectory]:
        return [t for g in self.groups for t in g.trajectories]

    @property
    def digest(self) -> str:
        body = "\n".join(canonical_json(t.to_json()) for t in self.trajectories)
        return hashlib.sha256(body.encode()).hexdigest()


def run_batch(
    tasks: Sequence[TaskSample],
    tools: Mapping[str, ToolSpec],
    M: int = DEFAULT_M,
    user: UserAgent | None = None,
    policy: PolicyAgent | None = None,
    limits: RolloutLimits = RolloutLimits(),
    retry_budget: int = 2,
    jobs: int = 1,
) -> BatchResult:
    """Roll out every task ``M`` times.

    An infrastructure failure is re-sampled (with a fresh sample index) up
    to ``retry_budget`` times per task; past that the task's group is
    dropped and logged.  Groups come back in task order whatever ``jobs``.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    user = user or ScriptedUser()
    policy = policy or ReplayPolicy(tools)

    def one_group(task: TaskSample):
        trajs: list[Trajectory] = []
        retries = 0
        next_sample = 0
        while len(trajs) < M:
            j = len(trajs)
            sample = next_sample
            next_sample += 1
            traj = run_rollout(task, tools, user, policy, limits, f"{task.task_id}#{j}", sample)
            if traj.failed_infra is None:
                trajs.append(traj)
                continue
            retries += 1
            if retries > retry_budget:
                return {"task_id": task.task_id, "env_id": task.env_id, "reason": f"infra:{traj.failed_infra}",
                        "retries": retries - 1}
        return TrajectoryGroup(task.env_id, task.task_id, tuple(trajs))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one_group, tasks))
    else:
        results = [one_group(t) for t in tasks]
    groups = tuple(r for r in results if isinstance(r, TrajectoryGroup))
    dropped = tuple(r for r in results if not isinstance(r, TrajectoryGroup))
    for d in dropped:
        log.warning("dropped group %s: %s", d["task_id"], d["reason"])
    return BatchResult(groups, dropped)


def with_meu(traj: Trajectory, meu_ok: bool, **provenance: Any) -> Trajectory:
    return replace(traj, meu_ok=meu_ok, provenance={**traj.provenance, **provenance})
