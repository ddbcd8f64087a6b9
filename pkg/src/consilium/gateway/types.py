"""Request/response types for the model gateway.

Every model interaction in the engine flows through one :class:`ChatRequest`
per call, tagged with the pipeline step that issued it. Tags are a closed
set so scripted backends and call logs can be matched mechanically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class StepTag(str, Enum):
    """Pipeline step issuing a request."""

    RECRUIT = "recruit"
    OPINION = "opinion"
    MEETING = "meeting"
    REVIEW = "review"
    JUDGE = "judge"
    SUMMARIZE = "summarize"
    DECIDE = "decide"
    ROUTE = "route"
    MATCH = "match"


_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"invalid message role: {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    tag: StepTag
    temperature: float = 0.0
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if not isinstance(self.tag, StepTag):
            object.__setattr__(self, "tag", StepTag(self.tag))

    @property
    def flat_text(self) -> str:
        """All message text concatenated, used for content matching."""
        return "\n".join(m.text for m in self.messages)

    def cache_key(self) -> str:
        """Stable digest over (model_id, messages, temperature, max_tokens).

        The tag is deliberately excluded: two steps issuing byte-identical
        requests should share a cache slot.
        """
        payload = {
            "model_id": self.model_id,
            "messages": [[m.role, m.text] for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        raw = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "messages": [{"role": m.role, "text": m.text} for m in self.messages],
            "tag": self.tag.value,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChatRequest":
        return cls(
            model_id=obj["model_id"],
            messages=tuple(ChatMessage(m["role"], m["text"]) for m in obj["messages"]),
            tag=StepTag(obj["tag"]),
            temperature=obj["temperature"],
            max_tokens=obj.get("max_tokens"),
        )


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")
        if not isinstance(self.finish_reason, FinishReason):
            object.__setattr__(self, "finish_reason", FinishReason(self.finish_reason))
        # Trailing whitespace is the only permitted normalization.
        object.__setattr__(self, "text", self.text.rstrip())

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason.value,
            "usage": [self.prompt_tokens, self.completion_tokens],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChatResponse":
        usage = obj.get("usage", [0, 0])
        return cls(
            text=obj["text"],
            finish_reason=FinishReason(obj["finish_reason"]),
            prompt_tokens=usage[0],
            completion_tokens=usage[1],
        )


@dataclass
class CallRecord:
    """One gateway call, persisted to the run's calls.jsonl."""

    cache_key: str
    request: ChatRequest
    response: ChatResponse
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return {
            "kind": "chat",
            "cache_key": self.cache_key,
            "request": self.request.to_json(),
            "response": self.response.to_json(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CallRecord":
        return cls(
            cache_key=obj["cache_key"],
            request=ChatRequest.from_json(obj["request"]),
            response=ChatResponse.from_json(obj["response"]),
            timestamp=obj.get("timestamp", 0.0),
        )


def embed_cache_key(text: str) -> str:
    """Cache key for an embedding request (run-scoped, text-addressed)."""
    return hashlib.sha256(b"embed\x00" + text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EmbedRecord:
    cache_key: str
    text: str
    vector: tuple[float, ...]
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return {
            "kind": "embed",
            "cache_key": self.cache_key,
            "text": self.text,
            "vector": list(self.vector),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EmbedRecord":
        return cls(
            cache_key=obj["cache_key"],
            text=obj["text"],
            vector=tuple(obj["vector"]),
            timestamp=obj.get("timestamp", 0.0),
        )


def user_request(
    model_id: str,
    text: str,
    tag: StepTag,
    temperature: float = 0.0,
    max_tokens: Optional[int] = None,
) -> ChatRequest:
    """Single user-message request, the common case in this pipeline."""
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage("user", text),),
        tag=tag,
        temperature=temperature,
        max_tokens=max_tokens,
    )
