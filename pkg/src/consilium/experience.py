"""Experience pool: distillation of kept utterances and persistence.

High-reward agent-turn cells are summarized by a model into retrieval-ready
key/value pairs; each pair becomes one entry tagged with role, subject,
difficulty, its source reward, and full provenance. The pool deduplicates
exactly (by content digest) and round-trips losslessly through JSONL.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .credit import CreditParams, score_transcript, select_keep
from .errors import ParseError, PoolFormatError
from .gateway import StepTag, complete, render_template, user_request
from .gateway.parsing import extract_json_object
from .transcript import Transcript, canonical_json, text_digest

logger = logging.getLogger(__name__)

JUDGMENT_PREFIXES = ("good practice:", "pitfall:")

SUMMARIZER_RETRY_FORMAT = (
    'ONE JSON object only, where every entry is "KEY": "EXPERIENCE" '
    "(string to string). No prose outside the object."
)


@dataclass(frozen=True)
class ExperienceEntry:
    """One distilled ACTION/EXPERIENCE pair with tags and provenance."""

    action_key: str
    experience_text: str
    role: str = ""
    subject: str = ""
    difficulty: str = ""
    score: float = 0.0
    run_id: str = ""
    agent: str = ""
    turn: int = 0

    def __post_init__(self):
        if not self.action_key.strip():
            raise ValueError("action_key must be non-empty")
        if not self.experience_text.strip():
            raise ValueError("experience_text must be non-empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def id(self) -> str:
        return text_digest(self.action_key + "\n" + self.experience_text)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "action_key": self.action_key,
            "experience_text": self.experience_text,
            "role": self.role,
            "subject": self.subject,
            "difficulty": self.difficulty,
            "score": self.score,
            "provenance": {"run_id": self.run_id, "agent": self.agent, "turn": self.turn},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperienceEntry":
        prov = obj.get("provenance", {})
        return cls(
            action_key=obj["action_key"],
            experience_text=obj["experience_text"],
            role=obj.get("role", ""),
            subject=obj.get("subject", ""),
            difficulty=obj.get("difficulty", ""),
            score=obj.get("score", 0.0),
            run_id=prov.get("run_id", ""),
            agent=prov.get("agent", ""),
            turn=prov.get("turn", 0),
        )


class ExperiencePool:
    """Ordered entry collection with exact dedup on content digest."""

    def __init__(self, entries: Optional[list[ExperienceEntry]] = None):
        self.entries: list[ExperienceEntry] = []
        self._ids: set[str] = set()
        for entry in entries or []:
            self.add(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._ids

    def add(self, entry: ExperienceEntry) -> bool:
        """Insert one entry; False when an identical pair already exists."""
        if entry.id in self._ids:
            return False
        self.entries.append(entry)
        self._ids.add(entry.id)
        return True

    def digest(self) -> str:
        return text_digest(
            "\n".join(canonical_json(e.to_json()) for e in self.entries)
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(canonical_json(entry.to_json()) + "\n")


def load_pool(path: str | Path) -> ExperiencePool:
    """Read a pool file; any malformed or duplicate line aborts with its number."""
    pool = ExperiencePool()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PoolFormatError(str(path), line_no, f"invalid JSON: {exc}") from exc
            try:
                entry = ExperienceEntry.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise PoolFormatError(str(path), line_no, str(exc)) from exc
            if not pool.add(entry):
                raise PoolFormatError(str(path), line_no, f"duplicate entry id {entry.id[:12]}")
    return pool


def append_and_save(
    pool: ExperiencePool, entries: list[ExperienceEntry], path: str | Path
) -> int:
    """Add entries to the pool and append the genuinely new ones to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    added = [entry for entry in entries if pool.add(entry)]
    with open(path, "a", encoding="utf-8") as fh:
        for entry in added:
            fh.write(canonical_json(entry.to_json()) + "\n")
    return len(added)


def distill(
    history_text: str,
    utterance_text: str,
    reward: float,
    template_id: str,
    backend,
    *,
    role: str = "",
    subject: str = "",
    difficulty: str = "",
    gold: str = "",
    eval_analysis: str = "",
    run_id: str = "",
    agent: str = "",
    turn: int = 0,
    model_id: str = "engine",
) -> list[ExperienceEntry]:
    """Summarize one kept cell into entries; one format re-ask on bad JSON.

    Pairs whose experience lacks the mandated judgment prefix are rejected
    with a warning; duplicate pairs collapse to one entry.
    """
    if template_id not in ("medicine", "math", "education"):
        raise ValueError(f"unknown distillation template {template_id!r}")
    prompt = render_template(
        f"summarize_experience_{template_id}",
        {
            "prompt_role": role or "(unknown)",
            "input_prompt": history_text or "(none)",
            "input_response": utterance_text,
            "ground_truth": gold or "(not provided)",
            "eval_analysis": eval_analysis or "(none)",
            "final_score": f"{reward:.4f}",
        },
    )
    response = complete(user_request(model_id, prompt, StepTag.SUMMARIZE), backend)
    try:
        pairs = extract_json_object(response.text)
    except ParseError:
        retry_prompt = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": SUMMARIZER_RETRY_FORMAT,
            },
        )
        retry = complete(user_request(model_id, retry_prompt, StepTag.SUMMARIZE), backend)
        pairs = extract_json_object(retry.text)

    if not pairs:
        logger.warning("summarizer produced zero experience pairs")
        return []
    entries: list[ExperienceEntry] = []
    seen: set[str] = set()
    for key, value in pairs.items():
        if not isinstance(key, str) or not isinstance(value, str):
            logger.warning("skipping non-string experience pair %r", key)
            continue
        if not key.strip() or not value.strip():
            logger.warning("skipping empty experience pair %r", key)
            continue
        if not value.strip().casefold().startswith(JUDGMENT_PREFIXES):
            logger.warning(
                "rejecting experience without judgment prefix: %r", value[:60]
            )
            continue
        entry = ExperienceEntry(
            action_key=key.strip(),
            experience_text=value.strip(),
            role=role,
            subject=subject,
            difficulty=difficulty,
            score=reward,
            run_id=run_id,
            agent=agent,
            turn=turn,
        )
        if entry.id in seen:
            continue
        seen.add(entry.id)
        entries.append(entry)
    return entries


def _history_for_cell(transcript: Transcript, turn: int) -> str:
    """Reconstructable judge-visible context: task body plus prior bulletins."""
    lines = [transcript.task.body]
    for bulletin in transcript.bulletins:
        if bulletin.round < turn and bulletin.items:
            lines.append(
                f"Round {bulletin.round} bulletin: " + "; ".join(bulletin.items)
            )
    return "\n".join(lines)


def build_pool_from_runs(
    run_dirs: list[str | Path],
    credit_params: CreditParams,
    backend,
    *,
    out_path: Optional[str | Path] = None,
    model_id: str = "engine",
) -> tuple[ExperiencePool, dict]:
    """Score, select, and distill every run into one deduplicated pool.

    Runs without the labels needed for scoring are skipped with a warning.
    The manifest records per-run kept-cell counts and the dedup ledger.
    """
    pool = ExperiencePool()
    per_run = []
    skipped = []
    before_dedup = 0
    for run_dir in run_dirs:
        transcript_path = Path(run_dir) / "transcript.jsonl"
        transcript = Transcript.load(transcript_path)
        task = transcript.task
        scorable = task.gold is not None or (
            task.domain == "education" and "outcome" in task.metadata
        )
        if not scorable:
            logger.warning("skipping run %s: no gold label", transcript.run_id)
            skipped.append(transcript.run_id)
            continue
        rewards = score_transcript(transcript, credit_params, backend)
        kept = select_keep(rewards.rewards, credit_params.selector, rewards.team)
        run_entries = 0
        rubric = task.domain if task.domain in ("medicine", "math", "education") else "math"
        utterance_by_cell = {
            (u.agent, u.round): u for u in transcript.utterances
        }
        for agent, turn in kept:
            utterance = utterance_by_cell[(agent, turn)]
            cell_entries = distill(
                _history_for_cell(transcript, turn),
                utterance.text,
                rewards.rewards[(agent, turn)],
                rubric,
                backend,
                role=agent,
                subject=task.metadata.get("subject", ""),
                difficulty=task.metadata.get("difficulty", ""),
                gold=task.gold or "",
                eval_analysis=(
                    f"judge score {rewards.scores[(agent, turn)]:.2f}; "
                    f"terminal outcome {rewards.G:.2f}"
                ),
                run_id=transcript.run_id,
                agent=agent,
                turn=turn,
                model_id=model_id,
            )
            before_dedup += len(cell_entries)
            run_entries += len(cell_entries)
            for entry in cell_entries:
                pool.add(entry)
        per_run.append(
            {
                "run_id": transcript.run_id,
                "scored_cells": len(rewards.rewards),
                "kept_cells": len(kept),
                "entries": run_entries,
                "outcome": rewards.G,
            }
        )
    manifest = {
        "runs": len(per_run),
        "skipped_runs": skipped,
        "kept_cells": sum(r["kept_cells"] for r in per_run),
        "entries_before_dedup": before_dedup,
        "entries_after_dedup": len(pool),
        "params": credit_params.to_json(),
        "per_run": per_run,
        "pool_digest": pool.digest(),
    }
    if out_path is not None:
        pool.save(out_path)
    return pool, manifest
