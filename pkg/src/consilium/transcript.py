"""Consultation data model and its lossless JSONL serialization.

One transcript captures a full consultation: the task, the recruited team,
every specialist utterance with its prompt digest, the per-round bulletins,
the chair's report, and the final decision. The JSONL form is canonical
(sorted keys, fixed separators) so identical consultations serialize to
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

VALID_DOMAINS = ("medicine", "math", "education", "other")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TaskRecord:
    """One problem instance: a case, a math problem, or a pre-test question."""

    id: str
    body: str
    domain: str = "other"
    gold: Optional[str] = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("task id must be non-empty")
        if not self.body.strip():
            raise ValueError("task body must be non-empty")
        if self.domain not in VALID_DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    def to_json(self) -> dict:
        obj: dict = {"id": self.id, "body": self.body, "domain": self.domain}
        if self.gold is not None:
            obj["gold"] = self.gold
        if self.metadata:
            obj["metadata"] = dict(self.metadata)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TaskRecord":
        return cls(
            id=obj["id"],
            body=obj["body"],
            domain=obj.get("domain", "other"),
            gold=obj.get("gold"),
            metadata=dict(obj.get("metadata", {})),
        )


@dataclass(frozen=True)
class SpecialistProfile:
    specialty: str
    role: str
    description: str
    is_leader: bool = False

    def __post_init__(self):
        if not self.specialty:
            raise ValueError("specialty must be non-empty")
        if not self.role:
            raise ValueError("role must be non-empty")

    def to_json(self) -> dict:
        return {
            "specialty": self.specialty,
            "role": self.role,
            "description": self.description,
            "is_leader": self.is_leader,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SpecialistProfile":
        return cls(
            specialty=obj["specialty"],
            role=obj["role"],
            description=obj.get("description", ""),
            is_leader=bool(obj.get("is_leader", False)),
        )


@dataclass
class Team:
    """Recruited specialists in a fixed member order, exactly one leader."""

    members: list[SpecialistProfile]
    max_rounds: int = 3

    def __post_init__(self):
        if not self.members:
            raise ValueError("team must have at least one member")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        specialties = [m.specialty for m in self.members]
        if len(set(specialties)) != len(specialties):
            raise ValueError("member specialties must be pairwise distinct")
        leaders = [m for m in self.members if m.is_leader]
        if len(leaders) != 1:
            raise ValueError(f"team must have exactly one leader, found {len(leaders)}")

    @property
    def leader(self) -> SpecialistProfile:
        return next(m for m in self.members if m.is_leader)

    def member_ids(self) -> list[str]:
        return [m.specialty for m in self.members]

    def to_json(self) -> dict:
        return {
            "members": [m.to_json() for m in self.members],
            "max_rounds": self.max_rounds,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Team":
        return cls(
            members=[SpecialistProfile.from_json(m) for m in obj["members"]],
            max_rounds=obj.get("max_rounds", 3),
        )


@dataclass
class RoundDelta:
    """Items a specialist added in one round relative to their prior set."""

    specialist: str
    round: int
    added_items: list[str]

    def to_json(self) -> dict:
        return {
            "specialist": self.specialist,
            "round": self.round,
            "added_items": list(self.added_items),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoundDelta":
        return cls(obj["specialist"], obj["round"], list(obj["added_items"]))


@dataclass
class SharedBulletin:
    """Deduplicated union of the round's deltas, in member order."""

    round: int
    items: list[str]

    def to_json(self) -> dict:
        return {"round": self.round, "items": list(self.items)}

    @classmethod
    def from_json(cls, obj: dict) -> "SharedBulletin":
        return cls(obj["round"], list(obj["items"]))


class OpinionState:
    """Round-indexed opinion sets and convergence flags, one per specialist.

    Opinion sets are cumulative: the set at round r is the union of the set
    at round r-1 and that round's delta, so deltas are always disjoint from
    the prior set. Convergence is sticky within a consultation.
    """

    def __init__(self, member_ids: list[str]):
        self.member_ids = list(member_ids)
        self._sets: dict[str, list[list[str]]] = {m: [[]] for m in member_ids}
        self._converged: dict[str, bool] = {m: False for m in member_ids}

    def opinions(self, member: str, round_idx: Optional[int] = None) -> list[str]:
        history = self._sets[member]
        if round_idx is None:
            round_idx = len(history) - 1
        return list(history[round_idx])

    def is_converged(self, member: str) -> bool:
        return self._converged[member]

    def all_converged(self) -> bool:
        return all(self._converged.values())

    def commit_round(self, member: str, new_items: list[str], round_idx: int) -> RoundDelta:
        """Fold a round's items into the cumulative set; empty delta converges."""
        prior = self._sets[member][-1]
        prior_keys = {_norm(i) for i in prior}
        added: list[str] = []
        added_keys: set[str] = set()
        for item in new_items:
            key = _norm(item)
            if key in prior_keys or key in added_keys:
                continue
            added.append(item)
            added_keys.add(key)
        self._sets[member].append(prior + added)
        if not added:
            self._converged[member] = True
        return RoundDelta(member, round_idx, added)

    def carry_forward(self, member: str) -> None:
        """A converged specialist keeps their set unchanged for the round."""
        self._sets[member].append(list(self._sets[member][-1]))


def _norm(item: str) -> str:
    return " ".join(item.split()).casefold()


@dataclass
class Utterance:
    agent: str
    round: int
    text: str
    prompt_digest: str

    def to_json(self) -> dict:
        return {
            "agent": self.agent,
            "round": self.round,
            "text": self.text,
            "prompt_digest": self.prompt_digest,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        return cls(obj["agent"], obj["round"], obj["text"], obj["prompt_digest"])


@dataclass
class FinalDecision:
    """Domain-shaped verdict: ranked 10-list, single answer, or guidance text."""

    kind: str  # ranked_list | answer | guidance
    ranked: list[str] = field(default_factory=list)
    answer: str = ""
    guidance: str = ""

    def __post_init__(self):
        if self.kind not in ("ranked_list", "answer", "guidance"):
            raise ValueError(f"unknown decision kind {self.kind!r}")
        if self.kind == "ranked_list":
            if len(self.ranked) != 10:
                raise ValueError("ranked decision must have exactly 10 items")
            normalized = {_norm(i) for i in self.ranked}
            if len(normalized) != 10:
                raise ValueError("ranked decision items must be pairwise distinct")

    @property
    def is_abstention(self) -> bool:
        return self.kind == "answer" and self.answer.strip().casefold() == "n/a"

    def headline(self) -> str:
        if self.kind == "ranked_list":
            return self.ranked[0]
        if self.kind == "answer":
            return self.answer
        first = self.guidance.strip().splitlines()
        return first[0] if first else ""

    def to_json(self) -> dict:
        obj: dict = {"kind": self.kind}
        if self.kind == "ranked_list":
            obj["ranked"] = list(self.ranked)
        elif self.kind == "answer":
            obj["answer"] = self.answer
        else:
            obj["guidance"] = self.guidance
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "FinalDecision":
        return cls(
            kind=obj["kind"],
            ranked=list(obj.get("ranked", [])),
            answer=obj.get("answer", ""),
            guidance=obj.get("guidance", ""),
        )


@dataclass
class Transcript:
    """Everything one consultation produced, in event order."""

    run_id: str
    task: TaskRecord
    team: Optional[Team] = None
    utterances: list[Utterance] = field(default_factory=list)
    bulletins: list[SharedBulletin] = field(default_factory=list)
    report: str = ""
    decision: Optional[FinalDecision] = None
    r_actual: int = 0

    def utterances_in_round(self, round_idx: int) -> list[Utterance]:
        return [u for u in self.utterances if u.round == round_idx]

    def rounds(self) -> list[int]:
        return sorted({u.round for u in self.utterances})

    def to_events(self) -> list[dict]:
        """Transcript as ordered JSONL events (one dict per line)."""
        events: list[dict] = [
            {"event": "task", "run_id": self.run_id, "payload": self.task.to_json()}
        ]
        if self.team is not None:
            events.append(
                {"event": "recruit", "run_id": self.run_id, "payload": self.team.to_json()}
            )
        by_round: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            by_round.setdefault(u.round, []).append(u)
        bulletins = {b.round: b for b in self.bulletins}
        for round_idx in sorted(by_round):
            for u in by_round[round_idx]:
                events.append(
                    {
                        "event": "utterance",
                        "run_id": self.run_id,
                        "round": u.round,
                        "agent": u.agent,
                        "payload": {"text": u.text, "prompt_digest": u.prompt_digest},
                    }
                )
            if round_idx in bulletins:
                events.append(
                    {
                        "event": "bulletin",
                        "run_id": self.run_id,
                        "round": round_idx,
                        "payload": bulletins[round_idx].to_json(),
                    }
                )
        if self.report:
            events.append(
                {"event": "report", "run_id": self.run_id, "payload": {"text": self.report}}
            )
        if self.decision is not None:
            events.append(
                {
                    "event": "decision",
                    "run_id": self.run_id,
                    "payload": self.decision.to_json(),
                }
            )
        events.append(
            {"event": "end", "run_id": self.run_id, "payload": {"r_actual": self.r_actual}}
        )
        return events

    def to_jsonl(self) -> str:
        return "\n".join(canonical_json(e) for e in self.to_events()) + "\n"

    def digest(self) -> str:
        return text_digest(self.to_jsonl())

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_events(cls, events: list[dict]) -> "Transcript":
        task = None
        run_id = ""
        team = None
        utterances: list[Utterance] = []
        bulletins: list[SharedBulletin] = []
        report = ""
        decision = None
        r_actual = 0
        for event in events:
            run_id = event.get("run_id", run_id)
            kind = event["event"]
            payload = event.get("payload", {})
            if kind == "task":
                task = TaskRecord.from_json(payload)
            elif kind == "recruit":
                team = Team.from_json(payload)
            elif kind == "utterance":
                utterances.append(
                    Utterance(
                        agent=event["agent"],
                        round=event["round"],
                        text=payload["text"],
                        prompt_digest=payload["prompt_digest"],
                    )
                )
            elif kind == "bulletin":
                bulletins.append(SharedBulletin.from_json(payload))
            elif kind == "report":
                report = payload["text"]
            elif kind == "decision":
                decision = FinalDecision.from_json(payload)
            elif kind == "end":
                r_actual = payload.get("r_actual", 0)
        if task is None:
            raise ValueError("transcript events lack a task record")
        return cls(
            run_id=run_id,
            task=task,
            team=team,
            utterances=utterances,
            bulletins=bulletins,
            report=report,
            decision=decision,
            r_actual=r_actual,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        events = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    events.append(json.loads(line))
        return cls.from_events(events)
