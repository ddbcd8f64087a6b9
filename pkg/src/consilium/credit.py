"""Turn-level scoring and group-to-agent credit assignment.

Given a finished consultation transcript, this module produces per-utterance
judge scores, allocates the terminal team outcome backward over turns with a
decay kernel, splits each turn's credit across agents (naive proportional,
difference rewards, or Shapley), fuses the signals into one reward per
agent-turn cell, and selects the high-value cells worth distilling.
"""

from __future__ import annotations

import itertools
import math
import random
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .errors import ParseError, ScoreRangeError
from .gateway import StepTag, complete, render_template, user_request
from .gateway.parsing import parse_judge_score, parse_yes_no
from .transcript import Transcript

# Replaces an agent's utterance when evaluating the counterfactual team
# without that agent; explicit and visible to the judge.
NOOP_TOKEN = "[no contribution this turn]"

SCHEMES = ("naive", "difference", "shapley")


@dataclass(frozen=True)
class Selector:
    """Keep rule for scored cells: inclusive threshold or top quantile."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("threshold", "quantile"):
            raise ValueError(f"unknown selector mode {self.mode!r}")
        if self.mode == "threshold" and not 0.0 <= self.value <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.mode == "quantile" and not 0.0 < self.value <= 1.0:
            raise ValueError("quantile must be in (0, 1]")


@dataclass(frozen=True)
class CreditParams:
    gamma: float = 0.85
    lam: float = 0.6
    epsilon: float = 1e-9
    beta: float = 1.0
    scheme: str = "naive"
    mc_permutations: int = 200
    rng_seed: int = 0
    selector: Selector = field(default_factory=lambda: Selector("quantile", 0.25))
    graded_outcome: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown credit scheme {self.scheme!r}")
        if self.mc_permutations < 1:
            raise ValueError("mc_permutations must be >= 1")

    def to_json(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "beta": self.beta,
            "scheme": self.scheme,
            "mc_permutations": self.mc_permutations,
            "rng_seed": self.rng_seed,
            "selector": {"mode": self.selector.mode, "value": self.selector.value},
            "graded_outcome": self.graded_outcome,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CreditParams":
        sel = obj.get("selector", {"mode": "quantile", "value": 0.25})
        return cls(
            gamma=obj.get("gamma", 0.85),
            lam=obj.get("lambda", 0.6),
            epsilon=obj.get("epsilon", 1e-9),
            beta=obj.get("beta", 1.0),
            scheme=obj.get("scheme", "naive"),
            mc_permutations=obj.get("mc_permutations", 200),
            rng_seed=obj.get("rng_seed", 0),
            selector=Selector(sel["mode"], sel["value"]),
            graded_outcome=obj.get("graded_outcome", False),
        )


# --- Numerical kernels -------------------------------------------------------


def decay_weights(R: int, gamma: float) -> list[float]:
    """w_t = gamma^(R-t) for t = 1..R; the final turn always weighs 1."""
    if R < 1:
        raise ValueError("R must be >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    return [gamma ** (R - t) for t in range(1, R + 1)]


def contribution_ratios_naive(scores: list[float], epsilon: float = 1e-9) -> list[float]:
    """c_i = s_i / (sum_j s_j + epsilon); an all-zero turn yields all zeros."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    for s in scores:
        if s < 0.0:
            raise ValueError(f"scores must be nonnegative, got {s}")
    total = math.fsum(scores) + epsilon
    return [s / total for s in scores]


def softmax_credit(q: list[float], beta: float = 1.0) -> list[float]:
    """c_i = exp(beta*q_i) / sum_j exp(beta*q_j), max-subtracted for safety."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    if not q:
        raise ValueError("q must be non-empty")
    for value in q:
        if not math.isfinite(value):
            raise ValueError(f"q values must be finite, got {value}")
    peak = max(q)
    exps = [math.exp(beta * (value - peak)) for value in q]
    total = math.fsum(exps)
    return [e / total for e in exps]


def turn_reward(s: float, G: float, w: float, c: float, lam: float) -> float:
    """r = lam*s + (1-lam)*G*w*c, all inputs in [0, 1]."""
    for name, value in (("s", s), ("G", G), ("w", w), ("c", c), ("lambda", lam)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    return lam * s + (1.0 - lam) * G * w * c


# --- Team objective and counterfactual credit --------------------------------


class TeamObjective:
    """Memoized coalition evaluator F_t: (coalition, turn) -> [0, 1]."""

    def __init__(self, fn: Callable[[frozenset, int], float]):
        self._fn = fn
        self._cache: dict[tuple[frozenset, int], float] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def evaluate(self, coalition, t: int) -> float:
        key = (frozenset(coalition), t)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = float(self._fn(key[0], t))
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"team objective must be in [0, 1], got {value}")
        with self._lock:
            self._cache.setdefault(key, value)
            self.evaluations += 1
        return value

    @property
    def cache_size(self) -> int:
        return len(self._cache)


def judge_team_objective(transcript: Transcript, backend) -> TeamObjective:
    """F_t backed by a judge rating the coalition's turn-t contributions.

    Excluded members' utterances are replaced by the no-op token, so the
    judge sees the same member structure for every coalition.
    """
    task = transcript.task
    member_order = transcript.team.member_ids() if transcript.team else sorted(
        {u.agent for u in transcript.utterances}
    )

    def evaluate(coalition: frozenset, t: int) -> float:
        spoken = {u.agent: u.text for u in transcript.utterances_in_round(t)}
        lines = []
        for member in member_order:
            text = spoken.get(member, NOOP_TOKEN) if member in coalition else NOOP_TOKEN
            lines.append(f"- [{member}] {text}")
        prompt = render_template(
            "judge_team_progress",
            {
                "turn": str(t),
                "question": task.body,
                "gold": task.gold or "(not provided)",
                "contributions": "\n".join(lines),
            },
        )
        response = complete(user_request("judge", prompt, StepTag.JUDGE), backend)
        return parse_judge_score(response.text)

    return TeamObjective(evaluate)


def difference_reward(F: TeamObjective, team: list[str], agent: str, t: int) -> float:
    """Marginal value of the agent at turn t: F(TEAM) - F(TEAM minus agent)."""
    if agent not in team:
        raise ValueError(f"agent {agent!r} not in team")
    full = frozenset(team)
    return F.evaluate(full, t) - F.evaluate(full - {agent}, t)


def shapley_estimate(
    F: TeamObjective,
    team: list[str],
    t: int,
    permutations: int,
    seed: int = 0,
) -> list[float]:
    """Monte Carlo Shapley values via seeded permutation sampling.

    For each sampled ordering, each agent is credited their marginal effect
    on joining the prefix coalition; means over orderings are returned in
    team order. F memoization keeps repeated coalitions cheap.
    """
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    rng = random.Random(seed)
    totals = {agent: 0.0 for agent in team}
    order = list(team)
    for _ in range(permutations):
        rng.shuffle(order)
        prefix: frozenset = frozenset()
        previous = F.evaluate(prefix, t)
        for agent in order:
            prefix = prefix | {agent}
            current = F.evaluate(prefix, t)
            totals[agent] += current - previous
            previous = current
    return [totals[agent] / permutations for agent in team]


def exact_shapley(F: TeamObjective, team: list[str], t: int) -> list[float]:
    """Exact Shapley values by full coalition enumeration (|team| <= 8)."""
    n = len(team)
    if n > 8:
        raise ValueError("exact_shapley is limited to teams of 8 or fewer")
    if n == 0:
        return []
    values = []
    for agent in team:
        others = [a for a in team if a != agent]
        total = 0.0
        for size in range(n):
            weight = float(
                Fraction(
                    math.factorial(size) * math.factorial(n - size - 1),
                    math.factorial(n),
                )
            )
            for subset in itertools.combinations(others, size):
                base = frozenset(subset)
                marginal = F.evaluate(base | {agent}, t) - F.evaluate(base, t)
                total += weight * marginal
        values.append(total)
    return values


# --- Judge scoring of individual utterances -----------------------------------


def judge_utterance(
    utterance_text: str,
    history_text: str,
    rubric_id: str,
    backend,
    *,
    question: str,
    gold: str = "",
    role: str = "",
    pretest_answer: str = "",
    pretest_reasoning: str = "",
) -> float:
    """One judge call scoring an utterance on the 0-5 rubric, returned as /5.

    An unparseable reply gets exactly one format re-ask; an out-of-range
    score is a hard error on first sight.
    """
    if rubric_id not in ("medicine", "math", "education"):
        raise ValueError(f"unknown rubric {rubric_id!r}")
    if rubric_id == "education":
        prompt = render_template(
            "judge_education",
            {
                "question": question,
                "pretest_answer": pretest_answer or "(not recorded)",
                "pretest_reasoning": pretest_reasoning or "(not recorded)",
                "gold": gold or "(not provided)",
                "utterance": utterance_text,
            },
        )
    else:
        prompt = render_template(
            f"judge_{rubric_id}",
            {
                "question": question,
                "history": history_text or "(none)",
                "gold": gold or "(not provided)",
                "role": role or "(unknown)",
                "utterance": utterance_text,
            },
        )
    response = complete(user_request("judge", prompt, StepTag.JUDGE), backend)
    try:
        return parse_judge_score(response.text)
    except ScoreRangeError:
        raise
    except ParseError:
        retry_prompt = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": (
                    'One JSON object only: {"analysis": "...", "score": <integer 0-5>}'
                ),
            },
        )
        retry = complete(user_request("judge", retry_prompt, StepTag.JUDGE), backend)
        return parse_judge_score(retry.text)


# --- Whole-transcript scoring ---------------------------------------------------


@dataclass
class TurnRewards:
    """All per-cell signals for one consultation."""

    team: list[str]
    R: int
    G: float
    scores: dict[tuple[str, int], float]
    weights: list[float]
    credits: dict[tuple[str, int], float]
    rewards: dict[tuple[str, int], float]
    scheme: str

    def speakers(self, t: int) -> list[str]:
        return [a for a in self.team if (a, t) in self.scores]

    def cells(self) -> list[tuple[str, int]]:
        """All spoken cells ordered by (turn, member order)."""
        member_index = {a: i for i, a in enumerate(self.team)}
        return sorted(self.scores, key=lambda cell: (cell[1], member_index[cell[0]]))

    def to_json(self) -> dict:
        def cell_map(data: dict[tuple[str, int], float]) -> dict:
            return {f"{agent}|{t}": value for (agent, t), value in sorted(data.items())}

        return {
            "team": list(self.team),
            "R": self.R,
            "G": self.G,
            "s": cell_map(self.scores),
            "w": list(self.weights),
            "c": cell_map(self.credits),
            "r": cell_map(self.rewards),
            "scheme": self.scheme,
        }


def terminal_outcome(transcript: Transcript, backend=None, graded: bool = False) -> float:
    """Case-level success signal G in [0, 1] from the final decision.

    Medicine: normalized membership of the gold label in the ranked list
    (rank-graded 1/rank behind the flag). Math: judged answer equivalence.
    Education: the recorded post-test outcome in task metadata.
    """
    task = transcript.task
    decision = transcript.decision
    if decision is None:
        raise ValueError("transcript has no final decision")
    if task.domain == "education":
        raw = task.metadata.get("outcome")
        if raw is None:
            raise ValueError("education outcome requires task.metadata['outcome']")
        value = float(raw)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"recorded outcome {value} outside [0, 1]")
        return value
    if task.gold is None:
        raise ValueError("terminal outcome requires a gold label")
    if task.domain == "medicine":
        def norm(s: str) -> str:
            return " ".join(s.split()).casefold()

        for rank, item in enumerate(decision.ranked, start=1):
            if norm(item) == norm(task.gold):
                return 1.0 / rank if graded else 1.0
        return 0.0
    if task.domain == "math":
        if decision.is_abstention:
            return 0.0
        if backend is None:
            raise ValueError("math outcome requires a judge backend")
        prompt = render_template(
            "match_math",
            {
                "question": task.body,
                "final_answer": decision.answer,
                "golden": task.gold,
            },
        )
        response = complete(user_request("judge", prompt, StepTag.MATCH), backend)
        return 1.0 if parse_yes_no(response.text) else 0.0
    raise ValueError(f"no terminal outcome rule for domain {task.domain!r}")


def score_transcript(
    transcript: Transcript,
    params: CreditParams,
    backend,
    *,
    outcome: Optional[float] = None,
    objective: Optional[TeamObjective] = None,
) -> TurnRewards:
    """Judge every utterance and fuse the signals into per-cell rewards."""
    task = transcript.task
    team = transcript.team.member_ids() if transcript.team else sorted(
        {u.agent for u in transcript.utterances}
    )
    rounds = transcript.rounds()
    if not rounds:
        raise ValueError("transcript has no utterances to score")
    R = max(rounds)

    rubric = task.domain if task.domain in ("medicine", "math", "education") else "math"
    scores: dict[tuple[str, int], float] = {}
    bulletins = {b.round: b for b in transcript.bulletins}
    for utterance in transcript.utterances:
        history_lines = []
        for r in range(1, utterance.round):
            if r in bulletins and bulletins[r].items:
                history_lines.append(
                    f"Round {r} bulletin: " + "; ".join(bulletins[r].items)
                )
        scores[(utterance.agent, utterance.round)] = judge_utterance(
            utterance.text,
            "\n".join(history_lines),
            rubric,
            backend,
            question=task.body,
            gold=task.gold or "",
            role=utterance.agent,
            pretest_answer=task.metadata.get("pretest_answer", ""),
            pretest_reasoning=task.metadata.get("pretest_reasoning", ""),
        )

    if outcome is None:
        G = terminal_outcome(transcript, backend, graded=params.graded_outcome)
    else:
        if not 0.0 <= outcome <= 1.0:
            raise ValueError("outcome must be in [0, 1]")
        G = outcome

    weights = decay_weights(R, params.gamma)

    if params.scheme in ("difference", "shapley") and objective is None:
        objective = judge_team_objective(transcript, backend)

    credits: dict[tuple[str, int], float] = {}
    rewards: dict[tuple[str, int], float] = {}
    for t in range(1, R + 1):
        speakers = [a for a in team if (a, t) in scores]
        if not speakers:
            continue
        if params.scheme == "naive":
            c_list = contribution_ratios_naive(
                [scores[(a, t)] for a in speakers], params.epsilon
            )
        elif params.scheme == "difference":
            q = [difference_reward(objective, speakers, a, t) for a in speakers]
            c_list = softmax_credit(q, params.beta)
        else:
            q = shapley_estimate(
                objective, speakers, t, params.mc_permutations, params.rng_seed
            )
            c_list = softmax_credit(q, params.beta)
        for agent, c in zip(speakers, c_list):
            credits[(agent, t)] = c
            rewards[(agent, t)] = turn_reward(
                scores[(agent, t)], G, weights[t - 1], c, params.lam
            )

    return TurnRewards(
        team=team,
        R=R,
        G=G,
        scores=scores,
        weights=weights,
        credits=credits,
        rewards=rewards,
        scheme=params.scheme,
    )


def select_keep(
    rewards: dict[tuple[str, int], float],
    selector: Selector,
    member_order: list[str],
) -> list[tuple[str, int]]:
    """High-value cells to distill, ordered by (turn, member order).

    Threshold mode keeps rewards >= tau (inclusive). Quantile mode keeps the
    top ceil(p*N) cells; equal rewards favor earlier turns, then earlier
    members.
    """
    if not rewards:
        return []
    member_index = {agent: i for i, agent in enumerate(member_order)}
    for agent, _ in rewards:
        if agent not in member_index:
            member_index[agent] = len(member_index)

    def commit_order(cell: tuple[str, int]):
        return (cell[1], member_index[cell[0]])

    if selector.mode == "threshold":
        kept = [cell for cell, reward in rewards.items() if reward >= selector.value]
    else:
        n_keep = math.ceil(selector.value * len(rewards))
        ranked = sorted(
            rewards,
            key=lambda cell: (-rewards[cell], cell[1], member_index[cell[0]]),
        )
        kept = ranked[:n_keep]
    return sorted(kept, key=commit_order)


def reward_dump(turn_rewards: TurnRewards, params: CreditParams, run_id: str) -> dict:
    """One JSON-ready record per consultation for downstream pool building."""
    return {
        "run_id": run_id,
        "params": params.to_json(),
        **turn_rewards.to_json(),
    }
