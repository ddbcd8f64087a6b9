"""Case routing between the single-agent solver and the full pipeline.

A judge call rates five case features; a transparent threshold policy over
those features decides single vs multi. The policy is a pure function of
(features, policy) so routing is deterministic and auditable; a learned
classifier is an extension point, not a default.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError
from .gateway import StepTag, complete, render_template, user_request
from .gateway.parsing import extract_json_object
from .transcript import TaskRecord

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "symptom_complexity",
    "needs_multidisciplinary",
    "n_specialties_involved",
    "cross_specialty_divergence",
    "single_expert_risk",
)

ROUTE_RETRY_FORMAT = (
    'STRICT JSON only: {"symptom_complexity": 0, "needs_multidisciplinary": 0, '
    '"n_specialties_involved": 0, "cross_specialty_divergence": 0, '
    '"single_expert_risk": 0} with every value an integer in range.'
)


@dataclass(frozen=True)
class CaseFeatures:
    """Five routing features, each an integer 0-5 (the need flag is 0/1)."""

    symptom_complexity: int
    needs_multidisciplinary: int
    n_specialties_involved: int
    cross_specialty_divergence: int
    single_expert_risk: int

    def __post_init__(self):
        for name in FEATURE_NAMES:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            if not 0 <= value <= 5:
                raise ValueError(f"{name}={value} outside 0-5")
        if self.needs_multidisciplinary not in (0, 1):
            raise ValueError(
                f"needs_multidisciplinary={self.needs_multidisciplinary} must be 0 or 1"
            )

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in FEATURE_NAMES}

    @classmethod
    def from_json(cls, obj: dict) -> "CaseFeatures":
        missing = sorted(set(FEATURE_NAMES) - set(obj))
        if missing:
            raise ParseError(f"routing features missing keys: {', '.join(missing)}")
        values = {}
        for name in FEATURE_NAMES:
            raw = obj[name]
            if isinstance(raw, bool):
                raw = int(raw)
            if isinstance(raw, float) and raw.is_integer():
                raw = int(raw)
            if not isinstance(raw, int):
                raise ParseError(f"routing feature {name} is not an integer: {raw!r}")
            values[name] = raw
        try:
            return cls(**values)
        except ValueError as exc:
            raise ParseError(str(exc)) from exc


@dataclass(frozen=True)
class RoutePolicy:
    """Thresholds for the default rule; lower thresholds favor multi."""

    specialties_threshold: int = 2
    divergence_threshold: int = 3

    def __post_init__(self):
        if self.specialties_threshold < 1:
            raise ValueError("specialties_threshold must be >= 1")
        if self.divergence_threshold < 1:
            raise ValueError("divergence_threshold must be >= 1")


DEFAULT_POLICY = RoutePolicy()


@dataclass(frozen=True)
class RouteDecision:
    route: str  # single | multi
    features: CaseFeatures
    rationale: str

    def __post_init__(self):
        if self.route not in ("single", "multi"):
            raise ValueError(f"unknown route {self.route!r}")
        if not self.rationale.strip():
            raise ValueError("rationale must be non-empty")

    def to_json(self) -> dict:
        return {
            "route": self.route,
            "features": self.features.to_json(),
            "rationale": self.rationale,
        }


def extract_features(
    task: TaskRecord, backend, *, model_id: str = "engine"
) -> CaseFeatures:
    """Judge-rated features for one case, with one format re-ask."""
    prompt = render_template("route_features", {"question": task.body})
    response = complete(user_request(model_id, prompt, StepTag.ROUTE), backend)
    try:
        features = _parse_features(response.text)
    except ParseError:
        retry_prompt = render_template(
            "format_retry",
            {
                "previous_response": response.text,
                "format_instructions": ROUTE_RETRY_FORMAT,
            },
        )
        retry = complete(user_request(model_id, retry_prompt, StepTag.ROUTE), backend)
        features = _parse_features(retry.text)
    if features.needs_multidisciplinary == 1 and features.n_specialties_involved == 0:
        logger.warning(
            "task %s: needs_multidisciplinary=1 but n_specialties_involved=0; "
            "accepting the inconsistent rating as given",
            task.id,
        )
    return features


def _parse_features(text: str) -> CaseFeatures:
    return CaseFeatures.from_json(extract_json_object(text))


def route(features: CaseFeatures, policy: RoutePolicy = DEFAULT_POLICY) -> RouteDecision:
    """Default rule: multi iff the need flag is set, enough specialties are
    involved, or cross-specialty divergence is high; single otherwise."""
    triggers = []
    if features.needs_multidisciplinary == 1:
        triggers.append("multidisciplinary consultation flagged")
    if features.n_specialties_involved >= policy.specialties_threshold:
        triggers.append(
            f"{features.n_specialties_involved} specialties involved "
            f"(threshold {policy.specialties_threshold})"
        )
    if features.cross_specialty_divergence >= policy.divergence_threshold:
        triggers.append(
            f"cross-specialty divergence {features.cross_specialty_divergence} "
            f"(threshold {policy.divergence_threshold})"
        )
    if triggers:
        return RouteDecision("multi", features, "; ".join(triggers))
    return RouteDecision(
        "single",
        features,
        "no multi trigger: need flag unset, below specialty and divergence thresholds",
    )


def route_case(
    task: TaskRecord,
    backend,
    *,
    policy: RoutePolicy = DEFAULT_POLICY,
    model_id: str = "engine",
) -> RouteDecision:
    return route(extract_features(task, backend, model_id=model_id), policy)


def write_routing_log(rows: list[tuple[str, RouteDecision]], path: str | Path) -> None:
    """Routing log CSV: case_id, the five features, route."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *FEATURE_NAMES, "route"])
        for case_id, decision in rows:
            writer.writerow(
                [
                    case_id,
                    *(getattr(decision.features, n) for n in FEATURE_NAMES),
                    decision.route,
                ]
            )


def load_features_json(text: str) -> CaseFeatures:
    """Features from a raw JSON string (CLI convenience, same validation)."""
    return CaseFeatures.from_json(json.loads(text))
