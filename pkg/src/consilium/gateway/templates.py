"""Prompt templates for every pipeline step, rendered bit-exactly.

Placeholders are lowercase ``{snake_case}`` names. Anything else in braces
(literal JSON examples, ``{CLASS}``-style format descriptions) passes through
untouched, so templates can show model-facing JSON without escaping.

Every prompt the engine sends is produced by :func:`render_template`; no
call site assembles prompt text ad hoc.
"""

from __future__ import annotations

import re

from ..errors import MissingPlaceholderError, UnknownTemplateError

_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")

HINTS_HEADER = "===== EXPERIENCE HINTS ====="
HINTS_FOOTER = "===== END OF EXPERIENCE HINTS ====="

# Opinion-set container tag per domain; specialists must itemize inside it.
OPINION_TAGS = {"medicine": "diagnosis", "math": "solution", "education": "plan"}

TEAM_GOALS = {
    "medicine": "Propose and refine the top 10 possible diagnoses for this case.",
    "math": "Solve the problem rigorously and converge on one final answer.",
    "education": "Plan teaching moves that lead the student to the correct answer.",
}

TEAM_NOUNS = {
    "medicine": "multidisciplinary medical team",
    "math": "math problem-solving team",
    "education": "teaching team",
}

TEMPLATES: dict[str, str] = {}


def register(name: str, text: str) -> None:
    TEMPLATES[name] = text


def placeholders(name: str) -> list[str]:
    """Sorted unique placeholder names of a registered template."""
    if name not in TEMPLATES:
        raise UnknownTemplateError(name)
    return sorted(set(_PLACEHOLDER_RE.findall(TEMPLATES[name])))


def render_template(name: str, bindings: dict[str, str]) -> str:
    """Substitute every placeholder; unknown names and gaps are hard errors."""
    if name not in TEMPLATES:
        raise UnknownTemplateError(name)
    text = TEMPLATES[name]
    needed = set(_PLACEHOLDER_RE.findall(text))
    missing = sorted(needed - set(bindings))
    if missing:
        raise MissingPlaceholderError(name, missing)

    def _sub(m: re.Match) -> str:
        return str(bindings[m.group(1)])

    return _PLACEHOLDER_RE.sub(_sub, text)


# --- Team formation -------------------------------------------------------

register(
    "recruit_medicine",
    """You are the Chief Medical Officer assembling a single MDT.
Case: {question}
From this specialist pool: {pool}
Pick no more than {n} distinct specialties best suited for this case. Never add unnecessary specialties just to complete the size.
Return only a valid JSON array. Each item must be:
{
  "specialty": "<one from the pool>",
  "role": "<short role name, exactly one item has 'leader'>",
  "description": "<2-4 sentences instructing how this specialist should reason for THIS case, including differential focus, red flags, and collaboration style>"
}
No prose outside JSON. No special characters.""",
)

register(
    "recruit_math",
    """You are the Chief Problem Solving Officer assembling a small math team.
Problem: {problem}
Design up to {n} distinct specialties best suited for this problem.
You are NOT restricted to any preset pool. Create precise specialist titles that reflect reasoning roles (e.g., invariant designer, structure normalizer, edge-case auditor).
Exactly ONE item must have role 'leader'.

Return ONLY a valid JSON array. Each item must be:
{
  "specialty": "<your created specialist title>",
  "role": "<short role name, exactly one item has 'leader'>",
  "description": "<2-4 sentences on how this specialist will reason for THIS problem: key invariants, typical tactics, how to communicate>"
}
No prose outside JSON.""",
)

register(
    "recruit_education",
    """You are an experienced educational coordinator assembling a teaching team.
Pre-test Question: {question}

IMPORTANT: Your team MUST include these key pedagogical roles:
1. The Diagnostician: Analyzes why the student failed the pre-test (e.g., calculation error vs. conceptual misunderstanding)
2. The Pedagogy Strategist: Proposes the next move (e.g., 'Ask a probing question' vs. 'Provide a counter-example')
3. Subject Matter Experts: Provide disciplinary knowledge explanation (select 1-2 from the pool based on question topic)

From this teacher/specialist pool: {pool}
Pick no more than {n} distinct specialties best suited for this question.
Assign roles so that you have:
- At least one Diagnostician role (can assign to any specialty, but they focus on analyzing student errors)
- At least one Pedagogy Strategist role (can assign to any specialty, but they focus on teaching strategy)
- 1-2 Subject Matter Experts (actual domain specialists from the pool)
- Optionally one lead teacher to coordinate
Exactly ONE item must have role containing 'leader'.
Never add unnecessary specialties just to complete the size.

Return only a valid JSON array. Each item must be:
{
  "specialty": "<one from the pool>",
  "role": "<short role name, exactly one item has 'leader'>",
  "description": "<2-4 sentences instructing an LLM acting as this teacher on how to approach THIS question, including how to collaborate with other teachers>"
}
No prose outside JSON. No special characters.""",
)

# --- Specialist opinions --------------------------------------------------

register(
    "opinion_medicine",
    """You are {role} in an MDT.
Goal: {goal}
Patient info: {question}

HARD CONSTRAINTS:
- Base reasoning strictly on Goal and Patient info.
- DO NOT introduce or infer external facts, tests, or treatments.
- DO NOT copy reasoning from other roles.
- If information is missing, write "insufficient evidence" instead of guessing.

{previous_block}{bulletin_block}{hints_block}OUTPUT FORMAT (STRICT):
1) Reflection (2-3 sentences)
2) <diagnosis> block with exactly 10 numbered items:
   1. [Diagnosis 1]: [1-2 sentence rationale]
   ...
   10. [Diagnosis 10]: [1-2 sentence rationale]
</diagnosis>""",
)

register(
    "opinion_math",
    """You are {specialty} ({role}) in a math problem-solving team.
Goal: {goal}
Problem: {question}

{previous_block}{bulletin_block}{hints_block}Please think step by step from your expert perspective, and produce ONE integrated, concise solution message.
Include: brief reflection (1-2 sentences), core reasoning leading to the result, and the final answer (one line if known).
Keep it rigorous and self-contained.

OUTPUT FORMAT (STRICT):
1) Reflection (1-2 sentences)
2) <solution> block with your key claims as numbered items, each opening with a short claim headline before a colon:
   1. [Claim]: [short justification]
   ...
</solution>""",
)

register(
    "opinion_education",
    """You are {role}, a specialized teacher analyzing a student's pre-test response.
FULL QUESTION: {question}
STUDENT'S PRE-TEST RESPONSE:
- Answer: {answer}
- Reasoning: {reasoning}

CORRECT ANSWER: {gold_answer} (You know this, but DO NOT reveal it directly to the student)

YOUR TASK (based on your role): {goal}

ROLE-SPECIFIC INSTRUCTIONS:
Diagnostician: focus on identifying WHY the student failed
Pedagogy Strategist: focus on HOW to teach this student
Subject Matter Expert: focus on WHAT domain knowledge the student is missing or misunderstanding

{previous_block}{bulletin_block}{hints_block}OUTPUT FORMAT (STRICT):
1) Brief analysis (2-3 sentences)
2) <plan> block with your proposed teaching points as numbered items, each opening with a short headline before a colon:
   1. [Teaching point]: [short rationale]
   ...
</plan>""",
)

# --- Context blocks spliced into opinion prompts ---------------------------

register(
    "previous_opinions_block",
    """Your opinion set from earlier rounds (restate items you keep, revise or extend as needed):
{items}

""",
)

register(
    "bulletin_block",
    """Team meeting bulletin (new points raised by the team last round):
{items}

""",
)

register("experience_hints_block", HINTS_HEADER + "\n{pairs}\n" + HINTS_FOOTER)

register("experience_hint_pair", "- ACTION: {action}\n  EXPERIENCE: {experience}")

# --- Chair synthesis and final decision ------------------------------------

register(
    "chair_summary",
    """You are the chair of a {team_noun}. Condense the team's deliberation into a concise assessment report for the final decision step.

Task: {question}

Team opinions (union across all rounds, grouped by member):
{opinions}

Write a compact assessment report that:
- Summarizes the key findings and the main points of agreement or tension.
- Preserves every distinct hypothesis or claim the team raised.
- Avoids speculative language and verbosity.
Return the report text only.""",
)

register(
    "decide_medicine",
    """You are the chair of an MDT. Read the case snapshot and reason step by step.
MDT Investigations Summary: {assessment_report}
Question: {question}

{hints_block}Output format (STRICT):
<analysis>
- Summarize key findings and red flags.
- Differential logic: why certain classes of diseases are prioritized.
- Tie-breakers and evidence weighting.
</analysis>

<top10>
[1] <Diagnosis name>
[2] <Diagnosis name>
[3] <Diagnosis name>
[4] <Diagnosis name>
[5] <Diagnosis name>
[6] <Diagnosis name>
[7] <Diagnosis name>
[8] <Diagnosis name>
[9] <Diagnosis name>
[10] <Diagnosis name>
</top10>

Rules:
- Provide exactly 10 diagnoses, one per line, each starting with [rank].
- Be precise and avoid variants on the same concept unless clinically distinct.
- No extra text outside <analysis> and <top10>.""",
)

register(
    "decide_math",
    """You are the chair of a math team. Integrate accepted outlines and produce a concise, rigorous write-up.
Snapshot summary (accepted/unresolved):
{assessment_report}

Problem:
{question}

{hints_block}OUTPUT FORMAT (STRICT):
<analysis>
- Key ideas and why this route is effective.
- Note any edge cases handled.
</analysis>

<final_answer>
Single line with the final numeric/symbolic answer; if unknown, write 'N/A'.
</final_answer>

<formal_proof>
Provide a clean, step-by-step solution/proof.
</formal_proof>

No extra text outside these tags.""",
)

register(
    "decide_education",
    """You are the lead teacher concluding a teaching session for one student.
Question: {question}
Student's Pre-Test Answer: {answer}
Student's Reasoning: {reasoning}
Correct Answer: {gold_answer} (You know this, but DO NOT reveal it directly)

Team planning summary:
{assessment_report}

{hints_block}Now provide final teaching guidance:
- Summarize key concepts they should understand
- Clarify any remaining misconceptions
- Guide them on how to approach this type of problem correctly
- Explain the underlying principles and reasoning process
- DO NOT directly state which option/letter is the correct answer""",
)

# --- Judges (utterance scoring, 0-5 integer in strict JSON) -----------------

register(
    "judge_medicine",
    """You are a clinical reasoning evaluator. Your task is to score how much the target specialist utterance advances the team toward the correct diagnosis.
Score range: 0 (no helpful influence) to 5 (decisive helpful influence).

Patient case: {question}
Discussion snapshot before the utterance: {history}
Standard diagnosis: {gold}
Target specialist: {role}
Target utterance: {utterance}

When judging diagnostic content, treat synonyms, eponyms, and abbreviations of the same condition as equivalent, but do not credit clearly distinct subtypes.

Output STRICT JSON only:
{"analysis": "1-3 sentences explaining why this utterance helps/hurts.", "score": 0-5}""",
)

register(
    "judge_math",
    """You are a math reasoning evaluator. Your task is to score how much the target agent utterance influences reaching the correct final answer.
Score range: 0 (no helpful influence) to 5 (decisive helpful influence).

Problem: {question}
Discussion snapshot before the utterance: {history}
Golden answer: {gold}
Target agent: {role}
Target utterance: {utterance}

Output STRICT JSON only:
{"analysis": "1-3 sentences explaining why this utterance helps/hurts.", "score": 0-5}""",
)

register(
    "judge_education",
    """You are an expert educational evaluator.

Evaluate a teacher's utterance based on these criteria:
1. CORRECTNESS (30%): Is the utterance factually correct and accurate?
2. INFORMATION GAIN (25%): Does it provide useful information for student to learn and get closer to the correct answer?
3. RELEVANCE (25%): Is it relevant to the student's misconception or the learning task?
4. CLARITY (20%): Is it clear, understandable, and well-structured?

Question: {question}
Student's Pre-Test Answer: {pretest_answer}
Student's Pre-Test Reasoning: {pretest_reasoning}
Correct Answer: {gold}

Teacher Utterance: {utterance}

Output STRICT JSON:
{
  "correctness_score": 0-5,
  "information_gain_score": 0-5,
  "relevance_score": 0-5,
  "clarity_score": 0-5,
  "analysis": "<brief explanation of scores>",
  "global_score": 0-5
}

Calculate global_score as weighted sum:
global_score = 0.30 * correctness_score + 0.25 * information_gain_score + 0.25 * relevance_score + 0.20 * clarity_score
Round to nearest integer (0-5).""",
)

register(
    "judge_team_progress",
    """You are a team-progress evaluator. Score how much the following set of turn {turn} contributions advances the team toward solving the task.
Score range: 0 (no progress) to 5 (decisive progress).

Task: {question}
Reference outcome: {gold}
Turn contributions, one per member ("[no contribution this turn]" marks a member whose input is withheld):
{contributions}

Output STRICT JSON only:
{"analysis": "1-2 sentences.", "score": 0-5}""",
)

# --- Outcome matching -------------------------------------------------------

register(
    "match_medicine",
    """I will now give you ten predicted diseases. If the predicted diagnosis is in the standard diagnosis list, output its rank (1-10); otherwise, output "No". Output exactly one value, either "No" or a single number from 1 to 10. If multiple match, choose the highest rank.

Decide whether the predicted disease and a standard diagnosis are the same medical condition. Be moderately strict: allow synonyms and parent unspecified subtype matches, but do not accept clearly distinct subtypes or genetic forms as the same.

Matching Rules:
- ACCEPT if they are synonyms, eponyms, abbreviations, or different wording for the same condition.
- ACCEPT if one is a broad parent category and the other is an unspecified form within that category.
- REJECT if they specify different subtypes (e.g., type I vs type II), different enzyme defects, or different genes.
- REJECT if they are unrelated conditions or only partially overlapping.

Output Format:
<think>
Step-by-step reasoning:
</think>
<answer>No|1-10</answer>

Predicted diseases: {predict_diagnosis}
Standard diagnosis: {golden_diagnosis}""",
)

register(
    "match_math",
    """You are a strict math judge. Determine whether the predicted final answer matches the golden answer (allowing standard mathematical equivalence).

Problem: {question}
Predicted Final Answer: {final_answer}
Golden Answer: {golden}

Output format (STRICT):
<analysis>
Briefly justify equivalence/non-equivalence.
</analysis>
<answer>
Yes|No
</answer>""",
)

# --- Experience distillation ------------------------------------------------

_SUMMARIZER_BODY = """INPUTS
- PROMPT ROLE: {prompt_role}
- INPUT PROMPT: {input_prompt}
- INPUT RESPONSE: {input_response}
- GROUND TRUTH (optional): {ground_truth}
- EVAL ANALYSIS (optional): {eval_analysis}
- FINAL SCORE (optional numeric): {final_score}

OUTPUT
Return ONE JSON object ONLY where each entry is: "KEY": "EXPERIENCE".

KEY CONSTRUCTION (single line, natural English, no brackets):
- Format: "{CLASS} — {Role} {action type} {working situation} in {Subject} {Difficulty}: {concise content}"
- CLASS is either "GUIDANCE" or "STRATEGY"
- Role is the speaker's role
- working situation describes the working context
- Subject and Difficulty come from the task metadata

EXPERIENCE (value) — 1-2 sentences, must:
- Be generalizable, instructional guidance.
- Include a clear judgment prefix:
  * "Good practice: ..." when the behavior aligns with successful outcomes.
  * "Pitfall: ..." when the behavior conflicts with effectiveness or adds confusion.
- Optionally append a simple outcome tag at the end: [helpful] / [harmful] / [neutral] / [insufficient].
- Justify the judgment ONLY by contrasts observable between INPUT RESPONSE and GROUND TRUTH / EVAL ANALYSIS / FINAL SCORE. If these are absent or inconclusive, use "Pitfall/Good practice" only if you can justify from INPUT RESPONSE behavior; otherwise end with [insufficient]."""

register(
    "summarize_experience_medicine",
    """You are an expert clinical experience analyzer.

TASK: From a {ROLE, PROMPT, RESPONSE, GROUND TRUTH, EVAL ANALYSIS, FINAL SCORE} record, produce retrieval-ready key:value experiences in TWO classes:
1) GUIDANCE — how a specialist handles a diagnostic situation or reasoning error.
2) STRATEGY — how a specialist implements a specific diagnostic approach.

"""
    + _SUMMARIZER_BODY,
)

register(
    "summarize_experience_math",
    """You are an expert mathematical experience analyzer.

TASK: From a {ROLE, PROMPT, RESPONSE, GROUND TRUTH, EVAL ANALYSIS, FINAL SCORE} record, produce retrieval-ready key:value experiences in TWO classes:
1) GUIDANCE — how a solver handles a problem situation or reasoning error.
2) STRATEGY — how a solver implements a specific proof or computation tactic.

"""
    + _SUMMARIZER_BODY,
)

register(
    "summarize_experience_education",
    """You are an expert educational experience analyzer.

TASK: From a {ROLE, PROMPT, RESPONSE, GROUND TRUTH, EVAL ANALYSIS, FINAL SCORE} pair, produce retrieval-ready key:value experiences in TWO classes:
1) GUIDANCE — how a teacher handles a teaching situation or student error.
2) STRATEGY — how a teacher implements a specific teaching approach.

"""
    + _SUMMARIZER_BODY,
)

# --- Students (education pre/post tests) ------------------------------------

register(
    "student_pretest",
    """Answer the following multiple-choice question. There is only one correct answer.

Before giving the final answer, briefly explain: (1) Your reasoning for how the correct option is determined (2) Any uncertainties, ambiguities, or alternative interpretations you considered.

The last line of your response should be in the format:

Answer: $LETTER (without quotes),

(where LETTER is one of A, B, C, D, E, F, G, H, I, or J).

{question}

{options}""",
)

register(
    "student_posttest",
    """You previously answered a pre-test question and then received teaching guidance.

Teaching guidance:
{guidance}

Now answer the question again, applying what you learned.

Answer the following multiple-choice question. There is only one correct answer.

The last line of your response should be in the format:

Answer: $LETTER (without quotes),

(where LETTER is one of A, B, C, D, E, F, G, H, I, or J).

{question}

{options}""",
)

# --- Single-agent solvers (baseline arm) -------------------------------------

register(
    "single_medicine",
    """You are an expert clinician AI agent participating in a diagnostic reasoning task.
Your goal is to reason step by step and propose the top 10 possible diagnoses for the given case.

Patient Case
{question}

{hints_block}Output Requirements
Return exactly the following structure; no extra prose outside it.
1) Reflection (2-3 sentences)
2) <diagnosis> block with exactly 10 numbered items:
   1. [Diagnosis 1]: [1-2 sentence rationale]
   ...
   10. [Diagnosis 10]: [1-2 sentence rationale]
</diagnosis>""",
)

register(
    "single_math",
    """You are an expert mathematician. Solve the problem step by step.

Problem
{question}

{hints_block}OUTPUT FORMAT (STRICT):
<analysis>
Your key reasoning steps.
</analysis>

<final_answer>
Single line with the final numeric/symbolic answer; if unknown, write 'N/A'.
</final_answer>""",
)

register(
    "teach_single",
    """You are teaching a student who just took a pre-test.
Question: {question}
Student's Pre-Test Answer: {answer}
Student's Reasoning: {reasoning}
Correct Answer: {gold_answer} (You know this, but DO NOT directly reveal it)

{hints_block}Provide final teaching guidance:
- Summarize key concepts they should understand
- Clarify any remaining misconceptions
- Guide them on how to approach this type of problem correctly
- Explain the underlying principles and reasoning process
- DO NOT directly state which option/letter is the correct answer""",
)

# --- Few-shot exemplars -------------------------------------------------------

register(
    "fewshot_block",
    """Worked examples from prior cases:

{examples}

""",
)

register("fewshot_example", "Case: {body}\nFinal answer: {gold}")

# --- Routing ------------------------------------------------------------------

register(
    "route_features",
    """You are a triage analyst. Read the case and rate the five routing features.

Case: {question}

Rate each feature as an integer:
- symptom_complexity: 0-5, overall complexity of the presentation
- needs_multidisciplinary: 0 or 1, whether the case needs multidisciplinary consultation
- n_specialties_involved: 0-5, how many distinct specialties the case plausibly involves
- cross_specialty_divergence: 0-5, how much independent specialists would disagree on this case
- single_expert_risk: 0-5, risk of error if a single expert answers alone

Output STRICT JSON only:
{"symptom_complexity": 0, "needs_multidisciplinary": 0, "n_specialties_involved": 0, "cross_specialty_divergence": 0, "single_expert_risk": 0}""",
)

# --- Format enforcement re-ask ------------------------------------------------

register(
    "format_retry",
    """Your previous response did not follow the required output format.

Previous response:
{previous_response}

Rewrite it now, preserving the content but strictly following this format:
{format_instructions}

Return only the reformatted response.""",
)


def render_hint_pairs(pairs: list[tuple[str, str]]) -> str:
    """The fenced hints block for (action, experience) pairs; '' when empty.

    Multi-line payloads are flattened (keys) or indented (experiences) so no
    embedded line can collide with the fence delimiters or the pair prefix.
    """
    if not pairs:
        return ""
    rendered = []
    for action, experience in pairs:
        action_flat = " ".join(action.split())
        exp_lines = experience.splitlines() or [""]
        exp_text = "\n".join(
            [exp_lines[0]] + ["    " + ln for ln in exp_lines[1:]]
        )
        rendered.append(
            render_template(
                "experience_hint_pair",
                {"action": action_flat, "experience": exp_text},
            )
        )
    return render_template("experience_hints_block", {"pairs": "\n".join(rendered)})


def as_block(template_name: str, items: list[str]) -> str:
    """Render a context block over bullet items; '' when there are none."""
    if not items:
        return ""
    lines = "\n".join(f"- {item}" for item in items)
    return render_template(template_name, {"items": lines})


def format_option_lines(options: dict[str, str]) -> str:
    """Multiple-choice options as 'A) text' lines in letter order."""
    return "\n".join(f"{letter}) {text}" for letter, text in sorted(options.items()))
