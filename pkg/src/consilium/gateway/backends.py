"""Model backends: live HTTP, cached replay, and deterministic scripted.

All completions and embeddings in the engine go through :func:`complete`
and :func:`embed` against one of these backends, so a whole pipeline run
can be recorded once and replayed bit-exactly with zero network traffic.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..errors import (
    CacheMissError,
    ConfigError,
    GatewayError,
    NoMatchingScriptEntryError,
    TransportError,
)
from .types import (
    CallRecord,
    ChatRequest,
    ChatResponse,
    EmbedRecord,
    FinishReason,
    embed_cache_key,
)

SCRIPTED_EMBED_DIM = 64

# Backoff schedule for transport errors only; model-content errors never retry.
RETRY_DELAYS = (0.5, 1.0, 2.0)


def hash_embedding(text: str) -> np.ndarray:
    """Deterministic pseudo-embedding: digest bytes mapped to [-1, 1], unit norm.

    sha512 yields exactly 64 bytes, one per dimension. Byte values are
    integers in [0, 255], so the vector can never be all-zero.
    """
    if not text:
        raise ValueError("cannot embed empty text")
    digest = hashlib.sha512(text.encode("utf-8")).digest()
    raw = np.frombuffer(digest, dtype=np.uint8).astype(np.float64)
    vec = raw / 255.0 * 2.0 - 1.0
    return vec / np.linalg.norm(vec)


@dataclass
class ScriptEntry:
    """One canned response, optionally gated on tag and/or prompt content."""

    response: str
    tag: Optional[str] = None
    contains: Optional[str] = None
    finish_reason: str = "stop"

    def matches(self, request: ChatRequest) -> bool:
        if self.tag is not None and self.tag != request.tag.value:
            return False
        if self.contains is not None and self.contains not in request.flat_text:
            return False
        return True

    def to_json(self) -> dict:
        obj: dict = {"response": self.response}
        if self.tag is not None:
            obj["tag"] = self.tag
        if self.contains is not None:
            obj["contains"] = self.contains
        if self.finish_reason != "stop":
            obj["finish_reason"] = self.finish_reason
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ScriptEntry":
        return cls(
            response=obj["response"],
            tag=obj.get("tag"),
            contains=obj.get("contains"),
            finish_reason=obj.get("finish_reason", "stop"),
        )


class ScriptedBackend:
    """Fully deterministic backend driven by an ordered script.

    Each call consumes exactly one matching entry (first unconsumed match
    in script order); an identical request sequence therefore yields an
    identical response sequence. Embeddings use the hash scheme above.
    """

    kind = "scripted"

    def __init__(self, entries: list[ScriptEntry]):
        self._entries = list(entries)
        self._consumed = [False] * len(self._entries)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise ConfigError(f"script file {path} must hold a JSON array")
        return cls([ScriptEntry.from_json(e) for e in data])

    @property
    def remaining(self) -> int:
        return self._consumed.count(False)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            for i, entry in enumerate(self._entries):
                if self._consumed[i] or not entry.matches(request):
                    continue
                self._consumed[i] = True
                return ChatResponse(
                    text=entry.response,
                    finish_reason=FinishReason(entry.finish_reason),
                    prompt_tokens=len(request.flat_text) // 4,
                    completion_tokens=len(entry.response) // 4,
                )
        raise NoMatchingScriptEntryError(
            f"no unconsumed script entry matches tag={request.tag.value!r} "
            f"({self.remaining} entries left)"
        )

    def embed(self, text: str) -> np.ndarray:
        return hash_embedding(text)


class CachedReplayBackend:
    """Append-only JSONL cache in front of an optional inner backend.

    A hit returns the stored response without touching the inner backend.
    On a miss: strict mode raises :class:`CacheMissError`; otherwise the
    inner backend (when present) answers and the record is persisted.
    Readers are lock-free; writes are serialized.
    """

    kind = "cached_replay"

    def __init__(
        self,
        path: str | Path,
        inner=None,
        strict: bool = False,
        clock: Callable[[], float] = time.time,
    ):
        self.path = Path(path)
        self.inner = inner
        self.strict = strict
        self._clock = clock
        self._chat: dict[str, ChatResponse] = {}
        self._embeds: dict[str, np.ndarray] = {}
        self._write_lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise GatewayError(
                        f"{self.path}: line {line_no}: corrupt cache record: {e}"
                    ) from e
                if obj.get("kind") == "embed":
                    rec = EmbedRecord.from_json(obj)
                    self._embeds[rec.cache_key] = np.array(rec.vector, dtype=np.float64)
                else:
                    rec = CallRecord.from_json(obj)
                    self._chat[rec.cache_key] = rec.response

    def _append(self, obj: dict) -> None:
        with self._write_lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        hit = self._chat.get(key)
        if hit is not None:
            return hit
        if self.strict:
            raise CacheMissError(
                f"strict replay: no cached response for tag={request.tag.value!r} "
                f"key={key[:12]}"
            )
        if self.inner is None:
            raise CacheMissError(
                f"cache miss with no inner backend for tag={request.tag.value!r}"
            )
        response = self.inner.complete(request)
        record = CallRecord(key, request, response, timestamp=self._clock())
        with self._write_lock:
            self._chat[key] = response
        self._append(record.to_json())
        return response

    def embed(self, text: str) -> np.ndarray:
        key = embed_cache_key(text)
        hit = self._embeds.get(key)
        if hit is not None:
            return hit.copy()
        if self.strict:
            raise CacheMissError(f"strict replay: no cached embedding, key={key[:12]}")
        if self.inner is None:
            raise CacheMissError("embedding cache miss with no inner backend")
        vec = self.inner.embed(text)
        record = EmbedRecord(key, text, tuple(float(x) for x in vec), timestamp=self._clock())
        with self._write_lock:
            self._embeds[key] = np.asarray(vec, dtype=np.float64)
        self._append(record.to_json())
        return np.asarray(vec, dtype=np.float64)


class LiveHTTPBackend:
    """Client for a JSON chat-completion endpoint (messages-in/choices-out).

    `endpoint_url` is the API base (e.g. ``https://host/v1``); the client
    posts to ``{base}/chat/completions`` and ``{base}/embeddings``. The
    credential comes from an environment variable, never from config files.
    """

    kind = "live_http"

    def __init__(
        self,
        endpoint_url: str,
        model_id: str,
        embed_model_id: Optional[str] = None,
        credential_env: str = "CONSILIUM_API_KEY",
        timeout: float = 120.0,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        if not endpoint_url:
            raise ConfigError("live_http backend requires endpoint_url")
        self._base = endpoint_url.rstrip("/")
        self._model = model_id
        self._embed_model = embed_model_id or model_id
        self._credential_env = credential_env
        self._timeout = timeout
        self._sleep = sleeper

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self._credential_env)
        if not key:
            raise ConfigError(
                f"live_http backend requires credential in ${self._credential_env}"
            )
        headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, url: str, payload: dict) -> dict:
        import requests

        last_error: Exception | None = None
        for attempt, delay in enumerate((*RETRY_DELAYS, None)):
            try:
                resp = requests.post(
                    url, headers=self._headers(), json=payload, timeout=self._timeout
                )
            except requests.RequestException as e:
                last_error = e
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = TransportError(f"HTTP {resp.status_code} from {url}")
                elif resp.status_code >= 400:
                    # Model/content error: never retried.
                    raise GatewayError(
                        f"HTTP {resp.status_code} from {url}: {resp.text[:300]}"
                    )
                else:
                    try:
                        return resp.json()
                    except json.JSONDecodeError as e:
                        raise GatewayError(f"non-JSON response from {url}: {e}") from e
            if delay is None:
                break
            self._sleep(delay)
        raise TransportError(f"transport failure after retries for {url}: {last_error}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": request.model_id or self._model,
            "messages": [{"role": m.role, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        data = self._post(f"{self._base}/chat/completions", payload)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"unexpected completion schema: {e}") from e
        usage = data.get("usage", {})
        return ChatResponse(
            text=text,
            finish_reason=FinishReason(finish if finish in ("stop", "length") else "error"),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        data = self._post(
            f"{self._base}/embeddings", {"model": self._embed_model, "input": text}
        )
        try:
            vec = np.array(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"unexpected embedding schema: {e}") from e
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise GatewayError("embedding endpoint returned a zero vector")
        return vec / norm


def complete(request: ChatRequest, backend) -> ChatResponse:
    """Route a chat request through the given backend."""
    return backend.complete(request)


def embed(text: str, backend) -> np.ndarray:
    """Embed text through the given backend; result has unit Euclidean norm."""
    if not text:
        raise ValueError("cannot embed empty text")
    vec = np.asarray(backend.embed(text), dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > 1e-6:
        vec = vec / norm
    return vec


class MeteredBackend:
    """Thin proxy that tallies calls and token usage, e.g. per benchmark case."""

    def __init__(self, inner):
        self.inner = inner
        self.kind = getattr(inner, "kind", "unknown")
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        self.calls += 1
        self.prompt_tokens += response.prompt_tokens
        self.completion_tokens += response.completion_tokens
        return response

    def embed(self, text: str) -> np.ndarray:
        return self.inner.embed(text)
