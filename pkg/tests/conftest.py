"""Shared scripted fixtures.

Three fully scripted medicine consultations (one three-round, two
two-round), plus the judge/summarizer script that scores them into an
experience pool. Builders return fresh objects so each test consumes its
own script.
"""

from __future__ import annotations

import json

from consilium.experience import ExperienceEntry, ExperiencePool
from consilium.gateway import ScriptEntry, ScriptedBackend
from consilium.transcript import TaskRecord

# --- Tasks --------------------------------------------------------------------


def task_chest_pain() -> TaskRecord:
    return TaskRecord(
        id="case-001",
        body=(
            "A 52-year-old man presents with crushing substernal chest pain "
            "radiating to the left arm, diaphoresis, and dyspnea for the past "
            "two hours."
        ),
        domain="medicine",
        gold="Acute myocardial infarction",
    )


def task_thyrotoxicosis() -> TaskRecord:
    return TaskRecord(
        id="case-002",
        body=(
            "A 29-year-old woman presents with episodic palpitations, heat "
            "intolerance, tremor, and weight loss despite increased appetite."
        ),
        domain="medicine",
        gold="Graves disease",
    )


def task_heart_failure() -> TaskRecord:
    return TaskRecord(
        id="case-003",
        body=(
            "A 61-year-old man presents with progressive exertional dyspnea, "
            "orthopnea, and bilateral ankle swelling over three weeks."
        ),
        domain="medicine",
        gold="Congestive heart failure",
    )


# --- Response builders ----------------------------------------------------------


def opinion_response(reflection: str, items: list[str], tag: str = "diagnosis") -> str:
    numbered = "\n".join(f"{i}. {item}" for i, item in enumerate(items, start=1))
    return f"{reflection}\n<{tag}>\n{numbered}\n</{tag}>"


def decide_response(analysis: str, ranked: list[str]) -> str:
    assert len(ranked) == 10
    lines = "\n".join(f"[{i}] {name}" for i, name in enumerate(ranked, start=1))
    return f"<analysis>\n{analysis}\n</analysis>\n<top10>\n{lines}\n</top10>"


def judge_json(score: int, analysis: str = "scored") -> str:
    return json.dumps({"analysis": analysis, "score": score})


def recruit_json(members: list[tuple[str, str, str]]) -> str:
    return json.dumps(
        [
            {"specialty": s, "role": r, "description": d}
            for s, r, d in members
        ]
    )


# --- Golden consultation scripts -------------------------------------------------

TOP10_CHEST_PAIN = [
    "Acute myocardial infarction",
    "Unstable angina",
    "Aortic dissection",
    "Pulmonary embolism",
    "Esophageal spasm",
    "Gastroesophageal reflux disease",
    "Pneumothorax",
    "Acute pancreatitis",
    "Pericarditis",
    "Costochondritis",
]


def script_chest_pain() -> list[ScriptEntry]:
    """3 specialists, 3 rounds (convergence exactly at the round cap)."""
    recruit = recruit_json(
        [
            (
                "Cardiology",
                "Team Leader",
                "Lead the differential; weigh ischemic causes first.",
            ),
            (
                "Pulmonology",
                "Specialist",
                "Assess embolic and pleural causes of acute chest pain.",
            ),
            (
                "Gastroenterology",
                "Specialist",
                "Assess esophageal and upper abdominal mimics.",
            ),
        ]
    )
    entries = [ScriptEntry(response=recruit, tag="recruit", contains="52-year-old")]
    rounds = [
        # round 1: two fresh items each
        [
            (
                "Cardiology (",
                "The presentation is classic for an acute coronary event.",
                [
                    "Acute myocardial infarction: crushing pain with radiation and diaphoresis",
                    "Unstable angina: same spectrum pending biomarkers",
                ],
            ),
            (
                "Pulmonology (",
                "Embolic causes must stay on the list.",
                [
                    "Pulmonary embolism: dyspnea with acute chest pain",
                    "Pneumothorax: sudden-onset chest pain with dyspnea",
                ],
            ),
            (
                "Gastroenterology (",
                "Esophageal mimics can present identically.",
                [
                    "Gastroesophageal reflux disease: retrosternal burning can mimic ischemia",
                    "Esophageal spasm: crushing quality overlaps with angina",
                ],
            ),
        ],
        # round 2: cardiology and gastro extend; pulmonology repeats (converges)
        [
            (
                "Cardiology (",
                "Aortic catastrophe must be excluded before settling.",
                [
                    "Acute myocardial infarction: remains most likely",
                    "Unstable angina: retained",
                    "Aortic dissection: radiation and severity warrant exclusion",
                ],
            ),
            (
                "Pulmonology (",
                "No new hypotheses from the pulmonary side.",
                [
                    "Pulmonary embolism: unchanged",
                    "Pneumothorax: unchanged",
                ],
            ),
            (
                "Gastroenterology (",
                "Adding a pancreatic mimic for completeness.",
                [
                    "Gastroesophageal reflux disease: retained",
                    "Esophageal spasm: retained",
                    "Acute pancreatitis: epigastric pain can radiate to the chest",
                ],
            ),
        ],
        # round 3: remaining two repeat (everyone converges)
        [
            (
                "Cardiology (",
                "My differential is stable.",
                [
                    "Acute myocardial infarction: unchanged",
                    "Unstable angina: unchanged",
                    "Aortic dissection: unchanged",
                ],
            ),
            (
                "Gastroenterology (",
                "Nothing further to add.",
                [
                    "Gastroesophageal reflux disease: unchanged",
                    "Esophageal spasm: unchanged",
                    "Acute pancreatitis: unchanged",
                ],
            ),
        ],
    ]
    for round_specs in rounds:
        for contains, reflection, items in round_specs:
            entries.append(
                ScriptEntry(
                    response=opinion_response(reflection, items),
                    tag="opinion",
                    contains=contains,
                )
            )
    entries.append(
        ScriptEntry(
            response=(
                "The team converged on an ischemic-first differential: acute "
                "myocardial infarction leads, with unstable angina and aortic "
                "dissection as the key alternates; embolic and esophageal or "
                "pancreatic mimics complete the set."
            ),
            tag="summarize",
        )
    )
    entries.append(
        ScriptEntry(
            response=decide_response(
                "Crushing pain with radiation, diaphoresis, and dyspnea "
                "prioritize acute coronary syndromes; lethal mimics rank "
                "above benign esophageal causes.",
                TOP10_CHEST_PAIN,
            ),
            tag="decide",
        )
    )
    return entries


TOP10_THYROTOXICOSIS = [
    "Graves disease",
    "Toxic multinodular goiter",
    "Supraventricular tachycardia",
    "Atrial fibrillation",
    "Generalized anxiety disorder",
    "Panic disorder",
    "Pheochromocytoma",
    "Subacute thyroiditis",
    "Factitious thyrotoxicosis",
    "Caffeine-induced anxiety disorder",
]


def _two_round_script(
    case_marker: str,
    members: list[tuple[str, str, str]],
    round_one: list[tuple[str, str, list[str]]],
    report: str,
    analysis: str,
    top10: list[str],
) -> list[ScriptEntry]:
    """Recruit, one substantive round, one all-repeat round, report, decision."""
    entries = [
        ScriptEntry(response=recruit_json(members), tag="recruit", contains=case_marker)
    ]
    for contains, reflection, items in round_one:
        entries.append(
            ScriptEntry(
                response=opinion_response(reflection, items),
                tag="opinion",
                contains=contains,
            )
        )
    for contains, _, items in round_one:
        entries.append(
            ScriptEntry(
                response=opinion_response("Holding my assessment.", items),
                tag="opinion",
                contains=contains,
            )
        )
    entries.append(ScriptEntry(response=report, tag="summarize"))
    entries.append(ScriptEntry(response=decide_response(analysis, top10), tag="decide"))
    return entries


def script_thyrotoxicosis() -> list[ScriptEntry]:
    return _two_round_script(
        "29-year-old",
        [
            (
                "Endocrinology",
                "Team Leader",
                "Anchor on thyroid causes of the hypermetabolic picture.",
            ),
            ("Cardiology", "Specialist", "Assess primary rhythm disorders."),
            ("Psychiatry", "Specialist", "Assess anxiety-spectrum mimics."),
        ],
        [
            (
                "Endocrinology (",
                "This is a textbook thyrotoxic cluster.",
                [
                    "Graves disease: classic thyrotoxicosis in a young woman",
                    "Toxic multinodular goiter: alternative hyperthyroid cause",
                ],
            ),
            (
                "Cardiology (",
                "Rhythm disorders need exclusion.",
                [
                    "Supraventricular tachycardia: episodic palpitations",
                    "Atrial fibrillation: palpitations with systemic signs",
                ],
            ),
            (
                "Psychiatry (",
                "Anxiety can mimic the autonomic surge.",
                [
                    "Generalized anxiety disorder: tremor and palpitations",
                    "Panic disorder: episodic autonomic surges",
                ],
            ),
        ],
        "Endocrine causes lead: the thyrotoxic cluster points to Graves "
        "disease with nodular disease the alternate; rhythm and anxiety "
        "mimics are retained for completeness.",
        "Weight loss with increased appetite and heat intolerance make "
        "primary hyperthyroidism far likelier than cardiac or anxiety causes.",
        TOP10_THYROTOXICOSIS,
    )


TOP10_HEART_FAILURE = [
    "Congestive heart failure",
    "Ischemic cardiomyopathy",
    "Nephrotic syndrome",
    "Chronic kidney disease",
    "Pulmonary hypertension",
    "Chronic obstructive pulmonary disease",
    "Cirrhosis with ascites",
    "Constrictive pericarditis",
    "Anemia",
    "Hypoalbuminemia",
]


def script_heart_failure() -> list[ScriptEntry]:
    return _two_round_script(
        "61-year-old",
        [
            (
                "Cardiology",
                "Team Leader",
                "Lead with congestion physiology and its causes.",
            ),
            ("Nephrology", "Specialist", "Assess renal causes of edema."),
            ("Pulmonology", "Specialist", "Assess primary pulmonary causes."),
        ],
        [
            (
                "Cardiology (",
                "Orthopnea with edema is congestion until proven otherwise.",
                [
                    "Congestive heart failure: orthopnea and dependent edema pattern",
                    "Ischemic cardiomyopathy: likeliest underlying cause",
                ],
            ),
            (
                "Nephrology (",
                "Renal protein loss can produce the same edema.",
                [
                    "Nephrotic syndrome: edema with possible renal protein loss",
                    "Chronic kidney disease: volume overload",
                ],
            ),
            (
                "Pulmonology (",
                "Primary lung disease explains dyspnea but not edema well.",
                [
                    "Chronic obstructive pulmonary disease: exertional dyspnea",
                    "Pulmonary hypertension: progressive dyspnea",
                ],
            ),
        ],
        "Cardiac congestion leads; renal protein loss is the main "
        "non-cardiac alternate, and primary lung disease explains only part "
        "of the picture.",
        "Orthopnea plus bilateral edema weights cardiac congestion over "
        "renal and pulmonary causes.",
        TOP10_HEART_FAILURE,
    )


# --- Scoring and distillation script (pool build over the three runs) ----------

ARRHYTHMIA_PAIR = (
    "STRATEGY — Cardiology screens rhythm disorders when palpitations are "
    "episodic: keep arrhythmia on the list until an ECG clears it",
    "Good practice: retain arrhythmic causes for episodic palpitations "
    "until electrocardiography excludes them. [helpful]",
)

SUMMARIZER_PAYLOADS = {
    "chest_pain_1": {
        "GUIDANCE — Cardiology leads with an ischemia-first differential in "
        "acute chest pain: anchor on myocardial infarction before mimics": (
            "Good practice: open the differential with the most lethal and "
            "most likely ischemic cause, then justify alternates against it. "
            "[helpful]"
        )
    },
    "chest_pain_2": {
        "STRATEGY — Cardiology adds aortic dissection exclusion in severe "
        "radiating chest pain: rule out catastrophes before settling": (
            "Good practice: explicitly add aortic dissection when pain "
            "radiates and severity is high, even when ischemia leads. "
            "[helpful]"
        )
    },
    "thyro_1": {
        "GUIDANCE — Endocrinology anchors on thyrotoxicosis pattern "
        "recognition in systemic hyperactivity: name the syndrome before "
        "the cause": (
            "Good practice: recognize the thyrotoxic cluster as one syndrome "
            "before splitting etiologies. [helpful]"
        )
    },
    "thyro_2": {ARRHYTHMIA_PAIR[0]: ARRHYTHMIA_PAIR[1]},
    "hf_1": {
        "GUIDANCE — Cardiology prioritizes congestion syndrome in orthopnea "
        "with edema: treat the pattern as cardiac until proven otherwise": (
            "Good practice: treat orthopnea with dependent edema as cardiac "
            "congestion first and order natriuretic peptides early. [helpful]"
        ),
        # exact duplicate of thyro_2; the pool must collapse it
        ARRHYTHMIA_PAIR[0]: ARRHYTHMIA_PAIR[1],
    },
    "hf_2": {
        "GUIDANCE — Nephrology keeps renal protein loss in the differential "
        "for generalized edema: check urine before blaming the heart": (
            "Good practice: screen urinalysis for proteinuria whenever edema "
            "is bilateral, even with a cardiac-looking picture. [helpful]"
        )
    },
}

# Judge scores per run, in utterance order (round-major, member order within).
JUDGE_SCORES = {
    "case-001": [5, 3, 2, 4, 1, 2, 1, 1],
    "case-002": [5, 2, 2, 1, 1, 1],
    "case-003": [5, 3, 2, 1, 1, 1],
}


def script_scoring() -> list[ScriptEntry]:
    """Judges and summarizers for building the pool from the three runs.

    Per run: one judge call per utterance, then one summarizer call per
    kept cell (top-quantile 0.25 keeps 2 cells per run).
    """
    entries: list[ScriptEntry] = []
    for case_id, payload_keys in (
        ("case-001", ("chest_pain_1", "chest_pain_2")),
        ("case-002", ("thyro_1", "thyro_2")),
        ("case-003", ("hf_1", "hf_2")),
    ):
        for score in JUDGE_SCORES[case_id]:
            entries.append(ScriptEntry(response=judge_json(score), tag="judge"))
        for key in payload_keys:
            entries.append(
                ScriptEntry(
                    response=json.dumps(SUMMARIZER_PAYLOADS[key]), tag="summarize"
                )
            )
    return entries


def scripted(entries: list[ScriptEntry]) -> ScriptedBackend:
    return ScriptedBackend(entries)


# --- Small hand-built pool for retrieval tests ----------------------------------


def tiny_pool(n: int = 5) -> ExperiencePool:
    pool = ExperiencePool()
    for i in range(n):
        pool.add(
            ExperienceEntry(
                action_key=f"GUIDANCE — role handles situation variant {i}: detail {i}",
                experience_text=f"Good practice: apply rule {i} before concluding.",
                role="Cardiology" if i % 2 == 0 else "Nephrology",
                score=0.5,
                run_id=f"run-{i}",
                agent="Cardiology",
                turn=1,
            )
        )
    return pool


# --- Acceptance verdict lines in the terminal summary ---------------------------


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in report.nodeid and report.when == "call":
                rows.append((report.nodeid.split("::")[-1], outcome))
    if rows:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, outcome in rows:
            label = "PASS" if outcome == "passed" else "FAIL"
            terminalreporter.write_line(f"[{label}] {name}")
