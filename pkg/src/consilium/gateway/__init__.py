"""Single choke-point for model interactions: backends, templates, parsing."""

from .backends import (
    CachedReplayBackend,
    LiveHTTPBackend,
    MeteredBackend,
    RETRY_DELAYS,
    SCRIPTED_EMBED_DIM,
    ScriptEntry,
    ScriptedBackend,
    complete,
    embed,
    hash_embedding,
)
from .templates import (
    HINTS_FOOTER,
    HINTS_HEADER,
    OPINION_TAGS,
    TEAM_GOALS,
    TEAM_NOUNS,
    TEMPLATES,
    as_block,
    format_option_lines,
    placeholders,
    render_hint_pairs,
    render_template,
)
from .types import (
    CallRecord,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    EmbedRecord,
    FinishReason,
    StepTag,
    embed_cache_key,
    user_request,
)

__all__ = [
    "CachedReplayBackend",
    "CallRecord",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "EmbedRecord",
    "FinishReason",
    "HINTS_FOOTER",
    "HINTS_HEADER",
    "LiveHTTPBackend",
    "MeteredBackend",
    "OPINION_TAGS",
    "RETRY_DELAYS",
    "SCRIPTED_EMBED_DIM",
    "ScriptEntry",
    "ScriptedBackend",
    "StepTag",
    "TEAM_GOALS",
    "TEAM_NOUNS",
    "TEMPLATES",
    "as_block",
    "complete",
    "embed",
    "embed_cache_key",
    "format_option_lines",
    "hash_embedding",
    "placeholders",
    "render_hint_pairs",
    "render_template",
    "user_request",
]
