"""Engine configuration and run manifests.

One structured config file drives every subcommand; CLI flags override
individual fields (flags win). Loading is strict: unknown keys are rejected
at every nesting level and all parameter ranges are enforced, so a typo
fails fast instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .credit import CreditParams, Selector
from .errors import ConfigError
from .transcript import VALID_DOMAINS, canonical_json, text_digest

BACKEND_KINDS = ("scripted", "cached", "live")

_BACKEND_KEYS = {
    "kind",
    "script_path",
    "cache_path",
    "strict",
    "endpoint_url",
    "model_id",
    "embed_model_id",
    "credential_env",
    "timeout",
}

_CREDIT_KEYS = {
    "gamma",
    "lambda",
    "epsilon",
    "beta",
    "scheme",
    "mc_permutations",
    "rng_seed",
    "selector",
    "graded_outcome",
}

_SELECTOR_KEYS = {"mode", "value"}

_ROUTER_KEYS = {"specialties_threshold", "divergence_threshold"}

_ENGINE_KEYS = {
    "domain",
    "team_size",
    "max_rounds",
    "k",
    "credit",
    "backend",
    "router",
    "pool_path",
    "runs_dir",
    "model_id",
}


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass(frozen=True)
class BackendConfig:
    """Which model backend to build and how to reach it."""

    kind: str = "scripted"
    script_path: Optional[str] = None
    cache_path: Optional[str] = None
    strict: bool = False
    endpoint_url: str = ""
    model_id: str = "engine"
    embed_model_id: str = ""
    credential_env: str = "CONSILIUM_API_KEY"
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "scripted" and not self.script_path:
            raise ConfigError("scripted backend requires script_path")
        if self.kind == "cached" and not self.cache_path:
            raise ConfigError("cached backend requires cache_path")
        if self.kind == "live" and not self.endpoint_url:
            raise ConfigError("live backend requires endpoint_url")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "script_path": self.script_path,
            "cache_path": self.cache_path,
            "strict": self.strict,
            "endpoint_url": self.endpoint_url,
            "model_id": self.model_id,
            "embed_model_id": self.embed_model_id,
            "credential_env": self.credential_env,
            "timeout": self.timeout,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BackendConfig":
        _reject_unknown(obj, _BACKEND_KEYS, "backend")
        return cls(
            kind=obj.get("kind", "scripted"),
            script_path=obj.get("script_path"),
            cache_path=obj.get("cache_path"),
            strict=bool(obj.get("strict", False)),
            endpoint_url=obj.get("endpoint_url", ""),
            model_id=obj.get("model_id", "engine"),
            embed_model_id=obj.get("embed_model_id", ""),
            credential_env=obj.get("credential_env", "CONSILIUM_API_KEY"),
            timeout=float(obj.get("timeout", 60.0)),
        )


@dataclass(frozen=True)
class EngineConfig:
    """Full operating point; the defaults reproduce the reference settings."""

    domain: str = "medicine"
    team_size: int = 3
    max_rounds: int = 3
    k: int = 8
    credit: CreditParams = field(default_factory=CreditParams)
    backend: BackendConfig = field(
        default_factory=lambda: BackendConfig(kind="scripted", script_path="script.json")
    )
    router_specialties_threshold: int = 2
    router_divergence_threshold: int = 3
    pool_path: Optional[str] = None
    runs_dir: str = "runs"
    model_id: str = "engine"

    def __post_init__(self):
        if self.domain not in VALID_DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        if not 1 <= self.team_size <= 10:
            raise ConfigError("team_size must be in 1-10")
        if not 1 <= self.max_rounds <= 10:
            raise ConfigError("max_rounds must be in 1-10")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.runs_dir:
            raise ConfigError("runs_dir must be non-empty")
        if not self.model_id:
            raise ConfigError("model_id must be non-empty")

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "team_size": self.team_size,
            "max_rounds": self.max_rounds,
            "k": self.k,
            "credit": self.credit.to_json(),
            "backend": self.backend.to_json(),
            "router": {
                "specialties_threshold": self.router_specialties_threshold,
                "divergence_threshold": self.router_divergence_threshold,
            },
            "pool_path": self.pool_path,
            "runs_dir": self.runs_dir,
            "model_id": self.model_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EngineConfig":
        _reject_unknown(obj, _ENGINE_KEYS, "config")
        credit_obj = obj.get("credit", {})
        _reject_unknown(credit_obj, _CREDIT_KEYS, "credit")
        selector_obj = credit_obj.get("selector")
        if selector_obj is not None:
            _reject_unknown(selector_obj, _SELECTOR_KEYS, "selector")
        router_obj = obj.get("router", {})
        _reject_unknown(router_obj, _ROUTER_KEYS, "router")
        try:
            credit = CreditParams.from_json(credit_obj)
            backend = BackendConfig.from_json(obj.get("backend", {"kind": "scripted", "script_path": "script.json"}))
            return cls(
                domain=obj.get("domain", "medicine"),
                team_size=int(obj.get("team_size", 3)),
                max_rounds=int(obj.get("max_rounds", 3)),
                k=int(obj.get("k", 8)),
                credit=credit,
                backend=backend,
                router_specialties_threshold=int(
                    router_obj.get("specialties_threshold", 2)
                ),
                router_divergence_threshold=int(
                    router_obj.get("divergence_threshold", 3)
                ),
                pool_path=obj.get("pool_path"),
                runs_dir=obj.get("runs_dir", "runs"),
                model_id=obj.get("model_id", "engine"),
            )
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return text_digest(canonical_json(self.to_json()))

    def with_overrides(self, **overrides) -> "EngineConfig":
        """Flag-style overrides; None values mean "keep the config value"."""
        fields = {k: v for k, v in overrides.items() if v is not None}
        credit_overrides = {
            k: fields.pop(k)
            for k in ("gamma", "lam", "beta", "epsilon", "scheme", "mc_permutations", "rng_seed", "graded_outcome")
            if k in fields
        }
        selector_mode = fields.pop("selector_mode", None)
        selector_value = fields.pop("selector_value", None)
        credit = self.credit
        if credit_overrides or selector_mode is not None or selector_value is not None:
            selector = credit.selector
            if selector_mode is not None or selector_value is not None:
                selector = Selector(
                    selector_mode if selector_mode is not None else selector.mode,
                    selector_value if selector_value is not None else selector.value,
                )
            credit = replace(credit, selector=selector, **credit_overrides)
        try:
            return replace(self, credit=credit, **fields)
        except TypeError as exc:
            raise ConfigError(f"unknown override: {exc}") from exc


def load_config(path: str | Path) -> EngineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return EngineConfig.from_json(obj)


def write_config(config: EngineConfig, path: str | Path) -> str:
    """Persist the config canonically; returns the digest of the written bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = canonical_json(config.to_json()) + "\n"
    path.write_text(text, encoding="utf-8")
    return text_digest(text)


@dataclass
class RunManifest:
    """Provenance card for one artifact-producing invocation."""

    run_id: str
    config_digest: str
    pipeline: str
    created_at: str
    finished_at: str = ""
    outcome: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_digest": self.config_digest,
            "pipeline": self.pipeline,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "outcome": self.outcome,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        return cls(
            run_id=obj["run_id"],
            config_digest=obj["config_digest"],
            pipeline=obj["pipeline"],
            created_at=obj["created_at"],
            finished_at=obj.get("finished_at", ""),
            outcome=dict(obj.get("outcome", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
