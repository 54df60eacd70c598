"""Advantage estimation, MEU masking and the clipped objective.

Means and variances are computed exactly with :class:`fractions.Fraction`
(rewards are 0/1), so advantages do not depend on the order trajectories,
questions or environments are listed in.  Only the final division by the
standard deviation happens in floating point.

Two normalizations are offered:

* ``group``: ``A_ij = (R_ij - mean_i) / std_i`` over question ``i``'s
  valid trajectories;
* ``env``: same numerator, but the denominator is the population std of
  all valid rewards in the question's environment.

Trajectories whose user simulator made an error (``meu_ok`` false) are
excluded everywhere, which makes masking equivalent to deletion.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .client import ClientUnavailable, GeneratorClient
from .statestore import canonical_json

log = logging.getLogger(__name__)


class DegenerateGroup(ValueError):
    pass


class DegenerateEnvironment(ValueError):
    pass


class AllMasked(ValueError):
    pass


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryReward:
    traj_id: str
    reward: int
    meu_ok: bool = True
    logprob_new: float = 0.0
    logprob_old: float = 0.0

    def __post_init__(self):
        if self.reward not in (0, 1) or isinstance(self.reward, bool):
            raise ValueError(f"{self.traj_id}: reward must be 0 or 1, got {self.reward!r}")


@dataclass(frozen=True)
class QuestionGroup:
    question_id: str
    trajectories: tuple

    @property
    def valid(self) -> list[TrajectoryReward]:
        return [t for t in self.trajectories if t.meu_ok]


@dataclass(frozen=True)
class EnvironmentGroup:
    env_id: str
    questions: tuple

    @property
    def valid(self) -> list[TrajectoryReward]:
        return [t for q in self.questions for t in q.valid]


@dataclass(frozen=True)
class RewardBatch:
    environments: tuple
    dropped: tuple = ()  # (id, reason) pairs removed before this batch was formed

    def __post_init__(self):
        ids = [t.traj_id for e in self.environments for q in e.questions for t in q.trajectories]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate trajectory ids in batch")

    def trajectories(self) -> Iterable[tuple[str, str, TrajectoryReward]]:
        for e in self.environments:
            for q in e.questions:
                for t in q.trajectories:
                    yield e.env_id, q.question_id, t

    def to_json(self) -> dict:
        return {
            "environments": [
                {
                    "env_id": e.env_id,
                    "questions": [
                        {
                            "question_id": q.question_id,
                            "trajectories": [
                                {"traj_id": t.traj_id, "reward": t.reward, "meu_ok": t.meu_ok,
                                 "logprob_new": t.logprob_new, "logprob_old": t.logprob_old}
                                for t in q.trajectories
                            ],
                        }
                        for q in e.questions
                    ],
                }
                for e in self.environments
            ],
            "dropped": [list(d) for d in self.dropped],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RewardBatch":
        return cls(
            tuple(
                EnvironmentGroup(e["env_id"], tuple(
                    QuestionGroup(q["question_id"], tuple(TrajectoryReward(**t) for t in q["trajectories"]))
                    for q in e["questions"]
                ))
                for e in obj["environments"]
            ),
            tuple(tuple(d) for d in obj.get("dropped", ())),
        )

    @classmethod
    def from_records(cls, records: Iterable[Mapping], logprobs: Mapping | None = None) -> "RewardBatch":
        """Group trajectory records (``trajectories.jsonl`` rows) by env and task.

        Infra-failed records are skipped; a missing ``meu_ok`` counts as
        valid and missing log-probabilities default to 0 (ratio 1).
        ``logprobs`` maps traj_id to ``{"logprob_new", "logprob_old"}``.
        """
        logprobs = logprobs or {}
        envs: dict[str, dict[str, list]] = {}
        for r in records:
            if r.get("failed_infra"):
                continue
            side = logprobs.get(r["traj_id"], {})
            new = side.get("logprob_new", r.get("logprob_new"))
            old = side.get("logprob_old", r.get("logprob_old"))
            t = TrajectoryReward(
                r["traj_id"],
                int(r["reward"]),
                r.get("meu_ok") is not False,
                float(new) if new is not None else 0.0,
                float(old) if old is not None else 0.0,
            )
            envs.setdefault(r["env_id"], {}).setdefault(r["task_id"], []).append(t)
        return cls(tuple(
            EnvironmentGroup(env, tuple(QuestionGroup(q, tuple(ts)) for q, ts in qs.items()))
            for env, qs in envs.items()
        ))


# ---------------------------------------------------------------------------
# MEU judging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeuJudgement:
    meu_ok: bool
    raw: str | None
    flag: str | None = None  # "judge_unavailable" | "unparseable"


def judge_meu(traj, task, client: GeneratorClient | None) -> MeuJudgement:
    """Ask the judge whether the simulated user erred.

    The judge answers ``True`` when the user gave wrong or out-of-scope
    information, so ``meu_ok`` is the negation.  Without a judge, or with an
    unreadable answer, the trajectory stays valid and a flag is set.
    """
    from .rollout import render_context

    conversation = [
        {"role": "agent" if m["role"] == "assistant" else m["role"], "text": m["content"]}
        for m in render_context(traj.turns, "stripped")
    ]
    payload = {"instruction": task.question, "conversation": conversation}
    if client is None or not client.available:
        return MeuJudgement(True, None, "judge_unavailable")
    try:
        raw = client.generate("meu_judge", payload)
    except ClientUnavailable as exc:
        log.warning("%s: judge unavailable (%s); keeping trajectory", traj.traj_id, exc)
        return MeuJudgement(True, None, "judge_unavailable")
    verdict = raw.strip().strip(".").strip("*`\"'").lower()
    log.info("%s: judge said %r", traj.traj_id, raw)
    if verdict == "true":
        return MeuJudgement(False, raw)
    if verdict == "false":
        return MeuJudgement(True, raw)
    return MeuJudgement(True, raw, "unparseable")


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveConfig:
    epsilon: float = 0.2
    beta: float = 0.0
    std_floor: float = 1e-6
    kl_estimator: str = "k3"  # k3: rho - 1 - log rho; k1: log rho; k2: (log rho)^2 / 2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")
        if self.kl_estimator not in ("k1", "k2", "k3"):
            raise ValueError(f"unknown KL estimator {self.kl_estimator!r}")


def mean_fraction(rewards: Sequence[int]) -> Fraction:
    return Fraction(sum(rewards), len(rewards))


def variance_fraction(rewards: Sequence[int]) -> Fraction:
    """Population variance, exact."""
    m = mean_fraction(rewards)
    return sum((Fraction(r) - m) ** 2 for r in rewards) / len(rewards)


def _std(var: Fraction) -> float:
    return math.sqrt(var.numerator) / math.sqrt(var.denominator)


def _divide(num: Fraction, std: float, floor: float) -> float:
    return float(num) / max(std, floor)


def group_advantages(rewards: Sequence[int], std_floor: float = 1e-6) -> list[float]:
    """``(R_j - mean) / std`` over one question's valid rewards."""
    if len(rewards) < 2 or len(set(rewards)) < 2:
        raise DegenerateGroup(f"rewards {list(rewards)} have zero variance")
    m = mean_fraction(rewards)
    std = _std(variance_fraction(rewards))
    return [_divide(r - m, std, std_floor) for r in rewards]


@dataclass(frozen=True)
class TrajectoryAdvantage:
    traj_id: str
    env_id: str
    question_id: str
    advantage: float
    numerator: Fraction
    mode: str

    def to_json(self) -> dict:
        return {
            "traj_id": self.traj_id,
            "env_id": self.env_id,
            "question_id": self.question_id,
            "advantage": self.advantage,
            "numerator": str(self.numerator),
            "mode": self.mode,
        }


@dataclass(frozen=True)
class AdvantageReport:
    mode: str
    advantages: tuple
    env_std: Mapping = field(default_factory=dict)
    question_mean: Mapping = field(default_factory=dict)  # (env_id, question_id) -> Fraction
    dropped: tuple = ()

    def by_id(self) -> dict[str, TrajectoryAdvantage]:
        return {a.traj_id: a for a in self.advantages}

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "trajectories": len(self.advantages),
            "env_std": {k: self.env_std[k] for k in sorted(self.env_std)},
            "question_mean": {f"{e}/{q}": str(v) for (e, q), v in sorted(self.question_mean.items())},
            "dropped": [list(d) for d in self.dropped],
        }


def compute_advantages(
    batch: RewardBatch, cfg: ObjectiveConfig = ObjectiveConfig(), mode: str = "env", on_degenerate: str = "raise"
) -> AdvantageReport:
    """Advantages for every valid trajectory of ``batch``.

    ``on_degenerate`` decides what happens to a zero-variance question
    (group mode) or environment (env mode): ``"raise"``; ``"drop"`` (log it
    in ``dropped``); or ``"zero"``, which keeps the floored formula and so
    yields advantage 0 for each of its trajectories.
    """
    if mode not in ("env", "group"):
        raise ValueError(f"unknown mode {mode!r}")
    if on_degenerate not in ("raise", "drop", "zero"):
        raise ValueError(f"unknown on_degenerate {on_degenerate!r}")
    out: list[TrajectoryAdvantage] = []
    env_std: dict[str, float] = {}
    q_mean: dict[tuple, Fraction] = {}
    dropped = list(batch.dropped)
    for env in batch.environments:
        for q in env.questions:
            dropped += [(t.traj_id, "meu") for t in q.trajectories if not t.meu_ok]
        pooled = [t.reward for t in env.valid]
        if mode == "env":
            if len(pooled) < 2 or len(set(pooled)) < 2:
                if on_degenerate == "raise":
                    raise DegenerateEnvironment(f"{env.env_id}: env-wide rewards have zero variance")
                if on_degenerate == "drop":
                    dropped += [(t.traj_id, "degenerate") for t in env.valid]
                    continue
            std = _std(variance_fraction(pooled)) if pooled else 0.0
            env_std[env.env_id] = std
        for q in env.questions:
            valid = q.valid
            if not valid:
                continue
            rewards = [t.reward for t in valid]
            m = mean_fraction(rewards)
            if mode == "group":
                if len(set(rewards)) < 2 or len(rewards) < 2:
                    if on_degenerate == "raise":
                        raise DegenerateGroup(f"{env.env_id}/{q.question_id}: zero variance")
                    if on_degenerate == "drop":
                        dropped += [(t.traj_id, "degenerate") for t in valid]
                        continue
                std = _std(variance_fraction(rewards))
            q_mean[(env.env_id, q.question_id)] = m
            for t in valid:
                num = t.reward - m
                out.append(TrajectoryAdvantage(t.traj_id, env.env_id, q.question_id,
                                               _divide(num, std, cfg.std_floor), num, mode))
    return AdvantageReport(mode, tuple(out), env_std, q_mean, tuple(dropped))


def env_advantages(batch: RewardBatch, cfg: ObjectiveConfig = ObjectiveConfig(), on_degenerate: str = "raise") -> AdvantageReport:
    return compute_advantages(batch, cfg, "env", on_degenerate)


def dynamic_filter(batch: RewardBatch) -> RewardBatch:
    """Remove question groups whose valid rewards are all 1 or all 0.

    Removed trajectories are listed in ``dropped`` with reason
    ``degenerate``; environments left without questions disappear.
    """
    envs = []
    dropped = list(batch.dropped)
    for env in batch.environments:
        kept = []
        for q in env.questions:
            rewards = {t.reward for t in q.valid}
            if len(rewards) == 2:
                kept.append(q)
            else:
                dropped += [(t.traj_id, "degenerate") for t in q.trajectories]
        if kept:
            envs.append(replace(env, questions=tuple(kept)))
    return RewardBatch(tuple(envs), tuple(dropped))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _kl(log_ratio: float, rho: float, estimator: str) -> float:
    if estimator == "k1":
        return log_ratio
    if estimator == "k2":
        return 0.5 * log_ratio * log_ratio
    return rho - 1.0 - log_ratio


def trajectory_term(advantage: float, logprob_new: float, logprob_old: float, cfg: ObjectiveConfig) -> float:
    log_ratio = logprob_new - logprob_old
    rho = math.exp(log_ratio)
    clipped = min(max(rho, 1.0 - cfg.epsilon), 1.0 + cfg.epsilon)
    surrogate = min(rho * advantage, clipped * advantage)
    return surrogate - cfg.beta * _kl(log_ratio, rho, cfg.kl_estimator)


def objective_value(batch: RewardBatch, report: AdvantageReport, cfg: ObjectiveConfig = ObjectiveConfig()) -> float:
    """Masked clipped objective, averaged per question then across questions.

    Masked trajectories contribute to neither sums nor counts.  Every valid
    trajectory needs an advantage in ``report``.
    """
    adv = report.by_id()
    group_values = []
    n_valid = 0
    for _, q in ((e, q) for e in batch.environments for q in e.questions):
        valid = q.valid
        if not valid:
            continue
        n_valid += len(valid)
        terms = []
        for t in valid:
            if t.traj_id not in adv:
                raise KeyError(f"no advantage for valid trajectory {t.traj_id}")
            terms.append(trajectory_term(adv[t.traj_id].advantage, t.logprob_new, t.logprob_old, cfg))
        group_values.append(math.fsum(terms) / len(terms))
    if n_valid == 0:
        raise AllMasked("every trajectory is masked")
    return math.fsum(group_values) / len(group_values)


def advantage_records(report: AdvantageReport) -> list[dict]:
    return [a.to_json() for a in sorted(report.advantages, key=lambda a: (a.env_id, a.question_id, a.traj_id))]


def report_digest(report: AdvantageReport) -> str:
    return hashlib.sha256(canonical_json(advantage_records(report)).encode()).hexdigest()
