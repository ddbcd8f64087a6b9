"""Metrics and the benchmark harness.

Hit@k and MRR are computed with exact rational arithmetic and cast to float
at the edge, so hand-checkable literals compare exactly. The harness runs
four pipeline arms (single solver, plain multi-agent, experience-augmented
multi-agent, and multi-agent with few-shot exemplars), with per-case
isolation: one failing case is logged and scored as a miss, never aborting
the batch.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .deliberation import run_consultation
from .errors import ParseError
from .experience import load_pool
from .gateway import (
    MeteredBackend,
    StepTag,
    complete,
    format_option_lines,
    render_template,
    user_request,
)
from .gateway.parsing import (
    extract_tag_block,
    headline,
    parse_answer_letter,
    parse_final_answer,
    parse_match_verdict,
    parse_numbered_items,
    parse_yes_no,
)
from .retrieval import PoolRetriever
from .transcript import TaskRecord

logger = logging.getLogger(__name__)

PIPELINES = ("single", "multi", "mattrl", "multi+fewshot")

DEFAULT_KS = (1, 3, 5, 10)

MATCH_RETRY_FORMAT = (
    "A <think>...</think> block, then exactly one <answer>No|1-10</answer> tag."
)


@dataclass
class MetricReport:
    n_cases: int
    hit: dict[int, float] = field(default_factory=dict)
    mrr: float = 0.0
    acc: Optional[float] = None
    acc_pre: Optional[float] = None
    acc_post: Optional[float] = None
    delta_acc: Optional[float] = None

    def to_json(self) -> dict:
        obj: dict = {"n_cases": self.n_cases, "mrr": self.mrr}
        for k in sorted(self.hit):
            obj[f"hit@{k}"] = self.hit[k]
        for name in ("acc", "acc_pre", "acc_post", "delta_acc"):
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
        return obj


def compute_metrics(
    matches: list[Optional[int]], ks: tuple[int, ...] = DEFAULT_KS
) -> MetricReport:
    """hit@k = fraction with rank <= k; mrr = mean of 1/rank (none counts 0)."""
    if not matches:
        raise ValueError("compute_metrics requires at least one match entry")
    n = len(matches)
    hit = {}
    for k in ks:
        hit[k] = float(Fraction(sum(1 for m in matches if m is not None and m <= k), n))
    mrr = float(
        sum((Fraction(1, m) for m in matches if m is not None), start=Fraction(0)) / n
    )
    return MetricReport(n_cases=n, hit=hit, mrr=mrr)


def judge_match(ranked: list[str], gold: str, backend, *, model_id: str = "engine") -> Optional[int]:
    """Judge-mediated rank of the gold label in a prediction list, or None.

    The judge sees the numbered predictions and answers with one rank or
    "No"; a malformed reply gets exactly one format re-ask.
    """
    if len(ranked) > 10:
        raise ValueError("judge_match accepts at most 10 predictions")
    numbered = "\n".join(f"{i}. {item}" for i, item in enumerate(ranked, start=1))
    prompt = render_template(
        "match_medicine",
        {"predict_diagnosis": numbered, "golden_diagnosis": gold},
    )
    response = complete(user_request(model_id, prompt, StepTag.MATCH), backend)
    try:
        rank = parse_match_verdict(response.text)
    except ParseError:
        retry_prompt = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": MATCH_RETRY_FORMAT,
            },
        )
        retry = complete(user_request(model_id, retry_prompt, StepTag.MATCH), backend)
        rank = parse_match_verdict(retry.text)
    if rank is not None and rank > 10:
        raise ParseError(f"match rank {rank} outside 1-10")
    if rank is not None and rank > len(ranked):
        raise ParseError(f"match rank {rank} exceeds the {len(ranked)} predictions")
    return rank


def load_dataset(path: str | Path, domain: Optional[str] = None) -> list[TaskRecord]:
    """Neutral JSONL records {id, body, gold, metadata} as task records."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {line_no}: invalid JSON: {exc}") from exc
            metadata = {
                k: v for k, v in obj.get("metadata", {}).items() if k != "options"
            }
            options = obj.get("metadata", {}).get("options")
            if options:
                metadata["options"] = json.dumps(options, sort_keys=True)
            records.append(
                TaskRecord(
                    id=str(obj["id"]),
                    body=obj["body"],
                    domain=obj.get("domain") or domain or obj.get("metadata", {}).get("domain", "other"),
                    gold=obj.get("gold"),
                    metadata=metadata,
                )
            )
    if not records:
        raise ValueError(f"dataset {path} is empty")
    return records


def _case_options(task: TaskRecord) -> str:
    raw = task.metadata.get("options")
    if not raw:
        return "(options are included in the question text)"
    return format_option_lines(json.loads(raw))


def _student_answer(task: TaskRecord, backend, model_id: str, *, guidance: str = "") -> tuple[Optional[str], str]:
    """One student call; returns (letter or None, full reply text)."""
    if guidance:
        prompt = render_template(
            "student_posttest",
            {
                "question": task.body,
                "options": _case_options(task),
                "guidance": guidance,
            },
        )
    else:
        prompt = render_template(
            "student_pretest",
            {"question": task.body, "options": _case_options(task)},
        )
    reply = complete(user_request(model_id, prompt, StepTag.OPINION), backend)
    return parse_answer_letter(reply.text), reply.text


def _single_prediction(task: TaskRecord, backend, model_id: str, hints_text: str) -> dict:
    """One-call solver arm; returns domain-shaped prediction fields."""
    hints_block = hints_text + "\n\n" if hints_text else ""
    if task.domain == "medicine":
        prompt = render_template(
            "single_medicine", {"question": task.body, "hints_block": hints_block}
        )
        reply = complete(user_request(model_id, prompt, StepTag.OPINION), backend)
        block = extract_tag_block(reply.text, "diagnosis")
        items = parse_numbered_items(block if block is not None else reply.text)
        ranked = []
        seen = set()
        for item in items:
            name = headline(item)
            key = " ".join(name.split()).casefold()
            if name and key not in seen:
                seen.add(key)
                ranked.append(name)
        return {"ranked": ranked[:10]}
    prompt = render_template(
        "single_math", {"question": task.body, "hints_block": hints_block}
    )
    reply = complete(user_request(model_id, prompt, StepTag.OPINION), backend)
    return {"answer": parse_final_answer(reply.text)}


def _math_correct(task: TaskRecord, answer: str, backend, model_id: str) -> bool:
    if answer.strip().casefold() == "n/a":
        return False
    prompt = render_template(
        "match_math",
        {"question": task.body, "final_answer": answer, "golden": task.gold or ""},
    )
    reply = complete(user_request(model_id, prompt, StepTag.MATCH), backend)
    return parse_yes_no(reply.text)


def _fewshot_prefix(
    exemplars: list[dict], case_id: str, seed: int, n: int
) -> str:
    rng = random.Random(f"{seed}:{case_id}")
    chosen = rng.sample(exemplars, min(n, len(exemplars)))
    rendered = "\n\n".join(
        render_template("fewshot_example", {"body": e["body"], "gold": e["gold"]})
        for e in chosen
    )
    return render_template("fewshot_block", {"examples": rendered})


def run_benchmark(
    dataset_path: str | Path,
    pipeline: str,
    backend,
    *,
    out_dir: Optional[str | Path] = None,
    domain: Optional[str] = None,
    team_size: int = 3,
    max_rounds: int = 3,
    k: int = 8,
    pool_path: Optional[str | Path] = None,
    exemplar_path: Optional[str | Path] = None,
    fewshot_n: int = 3,
    seed: int = 0,
    model_id: str = "engine",
) -> tuple[MetricReport, list[dict]]:
    """Evaluate one pipeline arm over a dataset; returns (report, case log)."""
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    tasks = load_dataset(dataset_path, domain)
    eval_domain = tasks[0].domain

    retriever = None
    if pipeline == "mattrl":
        if pool_path is None:
            raise ValueError("mattrl pipeline requires pool_path")
        retriever = PoolRetriever(load_pool(pool_path), backend)
    exemplars: list[dict] = []
    if pipeline == "multi+fewshot":
        if exemplar_path is None:
            raise ValueError("multi+fewshot pipeline requires exemplar_path")
        with open(exemplar_path, encoding="utf-8") as fh:
            exemplars = [json.loads(line) for line in fh if line.strip()]
        if not exemplars:
            raise ValueError("exemplar file is empty")

    cases: list[dict] = []
    matches: list[Optional[int]] = []
    correct_flags: list[bool] = []
    pre_flags: list[bool] = []
    post_flags: list[bool] = []
    transcripts = []

    for task in tasks:
        metered = MeteredBackend(backend)
        started = time.monotonic()
        row: dict = {"case_id": task.id, "pipeline": pipeline, "rank": "", "error": ""}
        try:
            body = task.body
            if pipeline == "multi+fewshot":
                body = _fewshot_prefix(exemplars, task.id, seed, fewshot_n) + task.body
            work_task = TaskRecord(
                id=task.id,
                body=body,
                domain=task.domain,
                gold=task.gold,
                metadata=dict(task.metadata),
            )
            if eval_domain == "education":
                outcome = _run_education_case(
                    work_task, pipeline, metered, retriever,
                    team_size=team_size, max_rounds=max_rounds, k=k,
                    model_id=model_id, transcripts=transcripts,
                )
                pre_flags.append(outcome["pre_correct"])
                post_flags.append(outcome["post_correct"])
                row["rank"] = "1" if outcome["post_correct"] else ""
            elif eval_domain == "medicine":
                ranked = _run_ranked_case(
                    work_task, pipeline, metered, retriever,
                    team_size=team_size, max_rounds=max_rounds, k=k,
                    model_id=model_id, transcripts=transcripts,
                )
                rank = judge_match(ranked, task.gold or "", metered, model_id=model_id)
                matches.append(rank)
                row["rank"] = "" if rank is None else str(rank)
            else:
                answer = _run_answer_case(
                    work_task, pipeline, metered, retriever,
                    team_size=team_size, max_rounds=max_rounds, k=k,
                    model_id=model_id, transcripts=transcripts,
                )
                ok = _math_correct(task, answer, metered, model_id)
                correct_flags.append(ok)
                row["rank"] = "1" if ok else ""
        except Exception as exc:
            logger.warning("case %s failed: %s", task.id, exc)
            row["error"] = str(exc)
            if eval_domain == "education":
                pre_flags.append(False)
                post_flags.append(False)
            elif eval_domain == "medicine":
                matches.append(None)
            else:
                correct_flags.append(False)
        row["latency"] = f"{time.monotonic() - started:.3f}"
        row["tokens"] = str(metered.total_tokens)
        cases.append(row)

    if eval_domain == "medicine":
        report = compute_metrics(matches)
    elif eval_domain == "education":
        n = len(pre_flags)
        acc_pre = float(Fraction(sum(pre_flags), n))
        acc_post = float(Fraction(sum(post_flags), n))
        report = MetricReport(
            n_cases=n,
            acc_pre=acc_pre,
            acc_post=acc_post,
            delta_acc=acc_post - acc_pre,
            acc=acc_post,
        )
    else:
        n = len(correct_flags)
        report = MetricReport(n_cases=n, acc=float(Fraction(sum(correct_flags), n)))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        with open(out_dir / "cases.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["case_id", "pipeline", "rank", "latency", "tokens", "error"]
            )
            writer.writeheader()
            writer.writerows(cases)
        for transcript in transcripts:
            transcript.save(out_dir / "runs" / transcript.run_id / "transcript.jsonl")
    return report, cases


def _run_ranked_case(
    task, pipeline, backend, retriever, *, team_size, max_rounds, k, model_id, transcripts
) -> list[str]:
    if pipeline == "single":
        return _single_prediction(task, backend, model_id, "")["ranked"]
    transcript = run_consultation(
        task,
        backend,
        team_size=team_size,
        max_rounds=max_rounds,
        retriever=retriever if pipeline == "mattrl" else None,
        k=k,
        model_id=model_id,
    )
    transcripts.append(transcript)
    return list(transcript.decision.ranked)


def _run_answer_case(
    task, pipeline, backend, retriever, *, team_size, max_rounds, k, model_id, transcripts
) -> str:
    if pipeline == "single":
        return _single_prediction(task, backend, model_id, "")["answer"]
    transcript = run_consultation(
        task,
        backend,
        team_size=team_size,
        max_rounds=max_rounds,
        retriever=retriever if pipeline == "mattrl" else None,
        k=k,
        model_id=model_id,
    )
    transcripts.append(transcript)
    return transcript.decision.answer


def _run_education_case(
    task, pipeline, backend, retriever, *, team_size, max_rounds, k, model_id, transcripts
) -> dict:
    """Pre-test, conditional teaching, post-test; correct pre-tests skip teaching."""
    gold_letter = (task.gold or "").strip().upper()
    pre_letter, pre_text = _student_answer(task, backend, model_id)
    pre_correct = pre_letter is not None and pre_letter == gold_letter
    if pre_correct:
        # The pre-test answer is reused; no teaching calls happen at all.
        return {"pre_correct": True, "post_correct": True, "taught": False}

    task.metadata["pretest_answer"] = pre_letter or "(none)"
    task.metadata["pretest_reasoning"] = pre_text
    if pipeline == "single":
        prompt = render_template(
            "teach_single",
            {
                "question": task.body,
                "answer": pre_letter or "(none)",
                "reasoning": pre_text,
                "gold_answer": task.gold or "",
                "hints_block": "",
            },
        )
        guidance = complete(
            user_request(model_id, prompt, StepTag.DECIDE, temperature=0.3), backend
        ).text
    else:
        transcript = run_consultation(
            task,
            backend,
            team_size=team_size,
            max_rounds=max_rounds,
            retriever=retriever if pipeline == "mattrl" else None,
            k=k,
            model_id=model_id,
        )
        guidance = transcript.decision.guidance
        transcripts.append(transcript)
    post_letter, _ = _student_answer(task, backend, model_id, guidance=guidance)
    post_correct = post_letter is not None and post_letter == gold_letter
    # Recorded on the shared task record so saved transcripts carry the
    # terminal outcome needed later for reward scoring.
    task.metadata["outcome"] = "1.0" if post_correct else "0.0"
    return {"pre_correct": False, "post_correct": post_correct, "taught": True}
