"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine failures."""


class ConfigError(EngineError):
    """Invalid or incomplete configuration."""


class GatewayError(EngineError):
    """Model gateway failure (transport, script, cache)."""


class TransportError(GatewayError):
    """Live HTTP call failed after bounded retries."""


class NoMatchingScriptEntryError(GatewayError):
    """Scripted backend has no unconsumed entry matching the request.

    Signals test misconfiguration: the script was exhausted or never
    covered this request.
    """


class CacheMissError(GatewayError):
    """Strict replay hit a request that is absent from the cache.

    Signals nondeterministic prompt drift between record and replay.
    """


class TemplateError(EngineError):
    """Template rendering failure."""


class UnknownTemplateError(TemplateError):
    def __init__(self, name: str):
        super().__init__(f"unknown template: {name!r}")
        self.name = name


class MissingPlaceholderError(TemplateError):
    def __init__(self, template: str, missing: list[str]):
        super().__init__(
            f"template {template!r} missing bindings: {', '.join(sorted(missing))}"
        )
        self.template = template
        self.missing = sorted(missing)


class ParseError(EngineError):
    """Model output did not contain the required structure."""


class ScoreRangeError(ParseError):
    """Judge returned a score outside the allowed range."""


class ConsultationError(EngineError):
    """A consultation failed mid-flight; carries the partial transcript."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class RunLockError(EngineError):
    """Run directory is already held by another writer."""


class PoolFormatError(EngineError):
    """Experience pool file is malformed; names the offending line."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}: line {line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class DimensionMismatchError(EngineError):
    """Embedding dimension disagrees with an existing index."""
