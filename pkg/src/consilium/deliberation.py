"""Three-stage consultation engine: recruit, deliberate, decide.

Stage I recruits a specialist team from a catalog (or free-form for math).
Stage II runs synchronized consensus rounds: each non-converged specialist
sees the task, their own cumulative opinion set, the previous round's
bulletin, and retrieved experience hints, then emits a revised opinion set;
per-round deltas merge into a deduplicated bulletin. A specialist whose
delta is empty is converged, and the loop halts when everyone is or the
round cap is hit. Stage III has the chair summarize the opinion union into
a report and produce the domain-shaped final decision.
"""

from __future__ import annotations

import hashlib
import logging
from typing import Callable, Optional

from .errors import ConsultationError, GatewayError, ParseError
from .gateway import (
    OPINION_TAGS,
    StepTag,
    TEAM_GOALS,
    TEAM_NOUNS,
    as_block,
    complete,
    render_template,
    user_request,
)
from .gateway.parsing import (
    extract_json_array,
    extract_tag_block,
    headline,
    parse_final_answer,
    parse_numbered_items,
    parse_ranked_list,
)
from .retrieval import render_hints
from .transcript import (
    FinalDecision,
    OpinionState,
    RoundDelta,
    SharedBulletin,
    SpecialistProfile,
    TaskRecord,
    Team,
    Transcript,
    Utterance,
    text_digest,
)

logger = logging.getLogger(__name__)

MEDICINE_CATALOG = [
    "Pediatrics",
    "Urology",
    "Hematology",
    "Rheumatology",
    "Psychiatry",
    "Pulmonology",
    "Dentistry",
    "Endocrinology",
    "Allergy and Immunology",
    "Cardiology",
    "Pathology",
    "Neurology",
    "Obstetrics and Gynecology",
    "Ophthalmology",
    "Dermatology",
    "Geriatrics",
    "Traditional Chinese Medicine",
    "Nephrology",
    "Oncology",
    "General Practice",
    "Gastroenterology",
    "Infectious Diseases",
    "Rehabilitation Medicine",
    "Otorhinolaryngology",
]

EDUCATION_CATALOG = [
    "Mathematics",
    "Engineering",
    "Physics",
    "Chemistry",
    "Biology",
    "Computer Science",
    "Medicine",
    "Agriculture",
    "Economics",
    "Management",
    "Law",
    "Education",
    "Military Science",
    "History",
    "Literature",
    "Philosophy",
    "Sociology",
    "Language Arts",
    "Pedagogy",
    "Educational Psychology",
    "Assessment and Evaluation",
    "Curriculum Design",
    "STEM",
    "Humanities",
    "Social Sciences",
]

DEFAULT_CATALOGS = {"medicine": MEDICINE_CATALOG, "education": EDUCATION_CATALOG}

# Education agents default to a mildly sampled temperature; other domains
# stay greedy so scripted and replay runs are trivially stable.
DOMAIN_TEMPERATURES = {"medicine": 0.0, "math": 0.0, "education": 0.3, "other": 0.0}

RECRUIT_RETRY_FORMAT = (
    "Return ONLY a valid JSON array of objects, each with string fields "
    '"specialty", "role", and "description"; exactly one item\'s role '
    "contains 'leader'."
)


def default_run_id(task: TaskRecord, *parts) -> str:
    """Deterministic run id from the task and the consultation parameters."""
    seed = "|".join([task.id, task.domain, *[str(p) for p in parts]])
    return hashlib.sha256(seed.encode("utf-8")).hexdigest()[:16]


def _recruit_prompt(task: TaskRecord, catalog: Optional[list[str]], n_max: int) -> str:
    if task.domain == "medicine":
        return render_template(
            "recruit_medicine",
            {"question": task.body, "pool": "; ".join(catalog), "n": str(n_max)},
        )
    if task.domain == "education":
        return render_template(
            "recruit_education",
            {"question": task.body, "pool": "; ".join(catalog), "n": str(n_max)},
        )
    return render_template("recruit_math", {"problem": task.body, "n": str(n_max)})


def form_team(
    task: TaskRecord,
    backend,
    *,
    catalog: Optional[list[str]] = None,
    n_max: int = 3,
    max_rounds: int = 3,
    model_id: str = "engine",
    temperature: float = 0.0,
) -> Team:
    """Stage I: recruit up to n_max specialists with exactly one leader."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    catalog_mode = task.domain in DEFAULT_CATALOGS
    if catalog_mode:
        catalog = catalog or DEFAULT_CATALOGS[task.domain]
        if not catalog:
            raise ValueError("catalog must be non-empty for catalog recruitment")
    prompt = _recruit_prompt(task, catalog, n_max)
    response = complete(
        user_request(model_id, prompt, StepTag.RECRUIT, temperature=temperature),
        backend,
    )
    try:
        raw = extract_json_array(response.text)
    except ParseError:
        retry = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": RECRUIT_RETRY_FORMAT,
            },
        )
        response = complete(
            user_request(model_id, retry, StepTag.RECRUIT, temperature=temperature),
            backend,
        )
        raw = extract_json_array(response.text)

    if len(raw) > n_max:
        raise ValueError(f"coordinator recruited {len(raw)} members, cap is {n_max}")
    members = []
    canonical = {name.casefold(): name for name in (catalog or [])}
    for item in raw:
        if not isinstance(item, dict):
            raise ParseError(f"recruitment item is not an object: {item!r}")
        specialty = str(item.get("specialty", "")).strip()
        role = str(item.get("role", "")).strip()
        description = str(item.get("description", "")).strip()
        if catalog_mode:
            match = canonical.get(specialty.casefold())
            if match is None:
                raise ValueError(f"specialty {specialty!r} is not in the catalog")
            specialty = match
        members.append(
            SpecialistProfile(
                specialty=specialty,
                role=role,
                description=description,
                is_leader="leader" in role.casefold(),
            )
        )
    return Team(members=members, max_rounds=max_rounds)


def meeting_aggregate(deltas: list[RoundDelta]) -> SharedBulletin:
    """Merge same-round deltas into one deduplicated bulletin.

    Items keep first-appearance order: by delta (member) order, then item
    order within a delta; later case/whitespace-insensitive duplicates drop.
    """
    rounds = {d.round for d in deltas}
    if len(rounds) > 1:
        raise ValueError(f"deltas span multiple rounds: {sorted(rounds)}")
    round_idx = deltas[0].round if deltas else 0
    seen: set[str] = set()
    items: list[str] = []
    for delta in deltas:
        for item in delta.added_items:
            key = " ".join(item.split()).casefold()
            if key in seen:
                continue
            seen.add(key)
            items.append(item)
    return SharedBulletin(round=round_idx, items=items)


def _opinion_prompt(
    task: TaskRecord,
    member: SpecialistProfile,
    own_opinions: list[str],
    bulletin: Optional[SharedBulletin],
    hints_text: str,
) -> str:
    previous_block = as_block("previous_opinions_block", own_opinions)
    bulletin_block = as_block("bulletin_block", bulletin.items if bulletin else [])
    hints_block = hints_text + "\n\n" if hints_text else ""
    goal = TEAM_GOALS.get(task.domain, TEAM_GOALS["math"])
    if member.description:
        goal = f"{goal} Your brief: {member.description}"
    common = {
        "question": task.body,
        "goal": goal,
        "previous_block": previous_block,
        "bulletin_block": bulletin_block,
        "hints_block": hints_block,
    }
    if task.domain == "medicine":
        return render_template(
            "opinion_medicine",
            {**common, "role": f"{member.specialty} ({member.role})"},
        )
    if task.domain == "education":
        return render_template(
            "opinion_education",
            {
                **common,
                "role": f"{member.specialty} ({member.role})",
                "answer": task.metadata.get("pretest_answer", "(not recorded)"),
                "reasoning": task.metadata.get("pretest_reasoning", "(not recorded)"),
                "gold_answer": task.gold or "(withheld)",
            },
        )
    return render_template(
        "opinion_math",
        {**common, "specialty": member.specialty, "role": member.role},
    )


def _extract_opinion_items(text: str, domain: str) -> list[str]:
    tag = OPINION_TAGS.get(domain, "solution")
    block = extract_tag_block(text, tag)
    source = block if block is not None else text
    items = parse_numbered_items(source)
    headlines: list[str] = []
    for item in items:
        head = headline(item)
        if head:
            headlines.append(head)
    return headlines


def run_round(
    round_idx: int,
    task: TaskRecord,
    team: Team,
    state: OpinionState,
    transcript: Transcript,
    backend,
    *,
    retriever=None,
    k: int = 8,
    model_id: str = "engine",
    temperature: float = 0.0,
) -> tuple[list[RoundDelta], SharedBulletin]:
    """Stage II, one round: revised opinions, deltas, and the merged bulletin.

    Specialists execute in member order and their results commit in member
    order, so scripted and replay backends see a stable request sequence.
    """
    if state.all_converged():
        raise ValueError("run_round requires at least one non-converged specialist")
    previous_bulletin = transcript.bulletins[-1] if transcript.bulletins else None
    deltas: list[RoundDelta] = []
    for member in team.members:
        if state.is_converged(member.specialty):
            state.carry_forward(member.specialty)
            continue
        own = state.opinions(member.specialty)
        hints_text = ""
        if retriever is not None:
            query = task.body if not own else f"{task.body}\n{own[0]}"
            try:
                hints = retriever.retrieve(query, k)
                hints_text = render_hints(hints)
            except Exception as exc:  # degraded, never fatal
                logger.warning("hint retrieval failed for %s: %s", member.specialty, exc)
        prompt = _opinion_prompt(task, member, own, previous_bulletin, hints_text)
        response = complete(
            user_request(model_id, prompt, StepTag.OPINION, temperature=temperature),
            backend,
        )
        transcript.utterances.append(
            Utterance(
                agent=member.specialty,
                round=round_idx,
                text=response.text,
                prompt_digest=text_digest(prompt),
            )
        )
        items = _extract_opinion_items(response.text, task.domain)
        deltas.append(state.commit_round(member.specialty, items, round_idx))
    bulletin = meeting_aggregate(deltas) if deltas else SharedBulletin(round_idx, [])
    return deltas, bulletin


DECIDE_FORMATS = {
    "medicine": (
        "An <analysis>...</analysis> block, then a <top10>...</top10> block "
        "holding exactly 10 lines, each '[rank] Diagnosis name'."
    ),
    "math": (
        "An <analysis> block, a <final_answer> block holding one line "
        "(write 'N/A' if unknown), and a <formal_proof> block."
    ),
    "education": "Non-empty final teaching guidance text.",
}


def _parse_decision(text: str, domain: str) -> FinalDecision:
    if domain == "medicine":
        return FinalDecision(kind="ranked_list", ranked=parse_ranked_list(text))
    if domain == "education":
        guidance = text.strip()
        if not guidance:
            raise ParseError("empty teaching guidance")
        return FinalDecision(kind="guidance", guidance=guidance)
    return FinalDecision(kind="answer", answer=parse_final_answer(text))


def synthesize_and_decide(
    task: TaskRecord,
    team: Team,
    state: OpinionState,
    backend,
    *,
    retriever=None,
    k: int = 8,
    model_id: str = "engine",
    temperature: float = 0.0,
) -> tuple[str, FinalDecision]:
    """Stage III: chair report over the opinion union, then the decision."""
    sections = []
    for member in team.members:
        items = state.opinions(member.specialty)
        lines = "\n".join(f"- {item}" for item in items) if items else "- (none)"
        sections.append(f"[{member.specialty}]\n{lines}")
    summary_prompt = render_template(
        "chair_summary",
        {
            "team_noun": TEAM_NOUNS.get(task.domain, TEAM_NOUNS["math"]),
            "question": task.body,
            "opinions": "\n".join(sections),
        },
    )
    report = complete(
        user_request(model_id, summary_prompt, StepTag.SUMMARIZE, temperature=temperature),
        backend,
    ).text.strip()

    hints_text = ""
    if retriever is not None:
        try:
            hints = retriever.retrieve(f"{task.body}\n{report}", k)
            hints_text = render_hints(hints)
        except Exception as exc:
            logger.warning("coordinator hint retrieval failed: %s", exc)
    hints_block = hints_text + "\n\n" if hints_text else ""

    if task.domain == "medicine":
        decide_prompt = render_template(
            "decide_medicine",
            {
                "assessment_report": report,
                "question": task.body,
                "hints_block": hints_block,
            },
        )
    elif task.domain == "education":
        decide_prompt = render_template(
            "decide_education",
            {
                "question": task.body,
                "answer": task.metadata.get("pretest_answer", "(not recorded)"),
                "reasoning": task.metadata.get("pretest_reasoning", "(not recorded)"),
                "gold_answer": task.gold or "(withheld)",
                "assessment_report": report,
                "hints_block": hints_block,
            },
        )
    else:
        decide_prompt = render_template(
            "decide_math",
            {
                "assessment_report": report,
                "question": task.body,
                "hints_block": hints_block,
            },
        )
    response = complete(
        user_request(model_id, decide_prompt, StepTag.DECIDE, temperature=temperature),
        backend,
    )
    domain = task.domain if task.domain in DECIDE_FORMATS else "math"
    try:
        decision = _parse_decision(response.text, task.domain)
    except (ParseError, ValueError):
        retry_prompt = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": DECIDE_FORMATS[domain],
            },
        )
        retry = complete(
            user_request(model_id, retry_prompt, StepTag.DECIDE, temperature=temperature),
            backend,
        )
        decision = _parse_decision(retry.text, task.domain)
    return report, decision


def run_consultation(
    task: TaskRecord,
    backend,
    *,
    catalog: Optional[list[str]] = None,
    team_size: int = 3,
    max_rounds: int = 3,
    retriever=None,
    k: int = 8,
    model_id: str = "engine",
    temperature: Optional[float] = None,
    run_id: Optional[str] = None,
) -> Transcript:
    """One full consultation; failures carry the partial transcript."""
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    if temperature is None:
        temperature = DOMAIN_TEMPERATURES.get(task.domain, 0.0)
    if run_id is None:
        run_id = default_run_id(task, team_size, max_rounds, k, model_id, temperature)
    transcript = Transcript(run_id=run_id, task=task)
    try:
        team = form_team(
            task,
            backend,
            catalog=catalog,
            n_max=team_size,
            max_rounds=max_rounds,
            model_id=model_id,
            temperature=temperature,
        )
        transcript.team = team
        state = OpinionState(team.member_ids())
        for round_idx in range(1, max_rounds + 1):
            deltas, bulletin = run_round(
                round_idx,
                task,
                team,
                state,
                transcript,
                backend,
                retriever=retriever,
                k=k,
                model_id=model_id,
                temperature=temperature,
            )
            transcript.bulletins.append(bulletin)
            transcript.r_actual = round_idx
            if state.all_converged():
                break
        report, decision = synthesize_and_decide(
            task,
            team,
            state,
            backend,
            retriever=retriever,
            k=k,
            model_id=model_id,
            temperature=temperature,
        )
        transcript.report = report
        transcript.decision = decision
    except ConsultationError:
        raise
    except (GatewayError, ParseError, ValueError) as exc:
        raise ConsultationError(str(exc), partial=transcript) from exc
    return transcript
