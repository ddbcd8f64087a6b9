"""Gateway backends: scripted determinism, cache replay, HTTP client, metering."""

from __future__ import annotations

import json
import threading

import numpy as np
import pytest

from consilium.errors import (
    CacheMissError,
    ConfigError,
    GatewayError,
    NoMatchingScriptEntryError,
    TransportError,
)
from consilium.gateway.backends import (
    RETRY_DELAYS,
    CachedReplayBackend,
    LiveHTTPBackend,
    MeteredBackend,
    ScriptedBackend,
    ScriptEntry,
    complete,
    embed,
    hash_embedding,
)
from consilium.gateway.types import (
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


def req(text: str, tag: StepTag = StepTag.OPINION, **kw) -> ChatRequest:
    return user_request("engine", text, tag, **kw)


class TestChatTypes:
    def test_invalid_role_rejected(self):
        with pytest.raises(ValueError):
            ChatMessage("narrator", "hi")

    def test_first_message_must_open_conversation(self):
        with pytest.raises(ValueError):
            ChatRequest("m", (ChatMessage("assistant", "hi"),), StepTag.OPINION)

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest("m", (), StepTag.OPINION)

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            req("x", temperature=-0.1)

    def test_nonpositive_max_tokens_rejected(self):
        with pytest.raises(ValueError):
            req("x", max_tokens=0)

    def test_tag_coerced_from_string(self):
        r = ChatRequest("m", (ChatMessage("user", "x"),), "judge")
        assert r.tag is StepTag.JUDGE

    def test_flat_text_joins_all_messages(self):
        r = ChatRequest(
            "m",
            (ChatMessage("system", "sys"), ChatMessage("user", "ask")),
            StepTag.OPINION,
        )
        assert r.flat_text == "sys\nask"

    def test_cache_key_stable_and_content_addressed(self):
        a = req("same prompt")
        b = req("same prompt")
        c = req("other prompt")
        assert a.cache_key() == b.cache_key()
        assert a.cache_key() != c.cache_key()

    def test_cache_key_ignores_tag(self):
        a = req("same prompt", tag=StepTag.OPINION)
        b = req("same prompt", tag=StepTag.JUDGE)
        assert a.cache_key() == b.cache_key()

    def test_cache_key_sensitive_to_sampling(self):
        assert req("p").cache_key() != req("p", temperature=0.5).cache_key()
        assert req("p").cache_key() != req("p", max_tokens=9).cache_key()

    def test_request_json_roundtrip(self):
        r = ChatRequest(
            "m",
            (ChatMessage("system", "s"), ChatMessage("user", "u")),
            StepTag.DECIDE,
            temperature=0.3,
            max_tokens=77,
        )
        assert ChatRequest.from_json(r.to_json()) == r

    def test_response_strips_trailing_whitespace_only(self):
        r = ChatResponse("  keep leading\nbody\n\n  ")
        assert r.text == "  keep leading\nbody"

    def test_response_rejects_negative_usage(self):
        with pytest.raises(ValueError):
            ChatResponse("x", prompt_tokens=-1)

    def test_response_json_roundtrip(self):
        r = ChatResponse("out", FinishReason.LENGTH, 12, 34)
        back = ChatResponse.from_json(r.to_json())
        assert back == r

    def test_call_record_roundtrip(self):
        r = req("payload")
        rec = CallRecord(r.cache_key(), r, ChatResponse("answer"), timestamp=1.5)
        obj = rec.to_json()
        assert obj["kind"] == "chat"
        back = CallRecord.from_json(obj)
        assert back.request == r
        assert back.response.text == "answer"
        assert back.timestamp == 1.5

    def test_embed_record_roundtrip(self):
        rec = EmbedRecord(embed_cache_key("t"), "t", (0.5, -0.5), timestamp=2.0)
        obj = rec.to_json()
        assert obj["kind"] == "embed"
        assert EmbedRecord.from_json(obj) == rec

    def test_embed_cache_key_distinct_per_text(self):
        assert embed_cache_key("a") != embed_cache_key("b")


class TestHashEmbedding:
    def test_dimension_and_unit_norm(self):
        v = hash_embedding("clinical note")
        assert v.shape == (64,)
        assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-12

    def test_deterministic(self):
        assert np.array_equal(hash_embedding("x"), hash_embedding("x"))

    def test_distinct_texts_distinct_vectors(self):
        assert not np.array_equal(hash_embedding("x"), hash_embedding("y"))

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            hash_embedding("")

    def test_values_bounded(self):
        v = hash_embedding("bounds")
        # Pre-normalization values live in [-1, 1]; the unit vector is tighter.
        assert np.all(np.abs(v) <= 1.0)


class TestScriptedBackend:
    def test_first_match_consumed_once(self):
        backend = ScriptedBackend(
            [ScriptEntry("first"), ScriptEntry("second")]
        )
        assert backend.complete(req("a")).text == "first"
        assert backend.complete(req("a")).text == "second"
        assert backend.remaining == 0

    def test_tag_gating(self):
        backend = ScriptedBackend(
            [ScriptEntry("j", tag="judge"), ScriptEntry("o", tag="opinion")]
        )
        assert backend.complete(req("x", tag=StepTag.OPINION)).text == "o"
        assert backend.complete(req("x", tag=StepTag.JUDGE)).text == "j"

    def test_contains_gating(self):
        backend = ScriptedBackend(
            [
                ScriptEntry("cardio", contains="chest pain"),
                ScriptEntry("endo", contains="palpitations"),
            ]
        )
        assert backend.complete(req("woman with palpitations")).text == "endo"
        assert backend.complete(req("man with chest pain")).text == "cardio"

    def test_exhaustion_raises_with_tag_in_message(self):
        backend = ScriptedBackend([ScriptEntry("only", tag="judge")])
        backend.complete(req("x", tag=StepTag.JUDGE))
        with pytest.raises(NoMatchingScriptEntryError, match="judge"):
            backend.complete(req("x", tag=StepTag.JUDGE))

    def test_no_match_leaves_entries_unconsumed(self):
        backend = ScriptedBackend([ScriptEntry("r", tag="recruit")])
        with pytest.raises(NoMatchingScriptEntryError):
            backend.complete(req("x", tag=StepTag.JUDGE))
        assert backend.remaining == 1

    def test_concurrent_calls_each_consume_distinct_entries(self):
        n = 16
        backend = ScriptedBackend([ScriptEntry(f"r{i}") for i in range(n)])
        seen: list[str] = []
        lock = threading.Lock()

        def worker():
            text = backend.complete(req("go")).text
            with lock:
                seen.append(text)

        threads = [threading.Thread(target=worker) for _ in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(seen) == sorted(f"r{i}" for i in range(n))
        assert backend.remaining == 0

    def test_from_file_roundtrip(self, tmp_path):
        entries = [
            ScriptEntry("a", tag="recruit", contains="case"),
            ScriptEntry("b", finish_reason="length"),
        ]
        path = tmp_path / "script.json"
        path.write_text(json.dumps([e.to_json() for e in entries]), encoding="utf-8")
        backend = ScriptedBackend.from_file(path)
        assert backend.remaining == 2
        out = backend.complete(req("the case", tag=StepTag.RECRUIT))
        assert out.text == "a"
        out2 = backend.complete(req("anything"))
        assert out2.finish_reason is FinishReason.LENGTH

    def test_from_file_rejects_non_array(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text('{"response": "x"}', encoding="utf-8")
        with pytest.raises(ConfigError):
            ScriptedBackend.from_file(path)

    def test_embed_uses_hash_scheme(self):
        backend = ScriptedBackend([])
        assert np.array_equal(backend.embed("t"), hash_embedding("t"))

    def test_token_accounting_derived_from_lengths(self):
        backend = ScriptedBackend([ScriptEntry("abcd" * 5)])
        out = backend.complete(req("x" * 40))
        assert out.prompt_tokens == 10
        assert out.completion_tokens == 5


class TestCachedReplayBackend:
    def test_records_then_replays_without_inner(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([ScriptEntry("ans")]))
        first = rec.complete(req("q"))
        assert first.text == "ans"

        replay = CachedReplayBackend(cache, inner=None, strict=True)
        assert replay.complete(req("q")) == first

    def test_hit_does_not_touch_inner(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        inner = ScriptedBackend([ScriptEntry("once")])
        backend = CachedReplayBackend(cache, inner=inner)
        backend.complete(req("q"))
        # The script is exhausted; a second identical call must hit the cache.
        assert backend.complete(req("q")).text == "once"
        assert inner.remaining == 0

    def test_strict_miss_raises(self, tmp_path):
        backend = CachedReplayBackend(
            tmp_path / "calls.jsonl",
            inner=ScriptedBackend([ScriptEntry("x")]),
            strict=True,
        )
        with pytest.raises(CacheMissError):
            backend.complete(req("never recorded"))

    def test_miss_with_no_inner_raises(self, tmp_path):
        backend = CachedReplayBackend(tmp_path / "calls.jsonl", inner=None)
        with pytest.raises(CacheMissError):
            backend.complete(req("q"))

    def test_replay_hit_across_different_tags(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([ScriptEntry("a")]))
        rec.complete(req("shared", tag=StepTag.OPINION))
        replay = CachedReplayBackend(cache, inner=None, strict=True)
        # Same content under another tag shares the cache slot.
        assert replay.complete(req("shared", tag=StepTag.REVIEW)).text == "a"

    def test_embed_recorded_and_replayed_exactly(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([]))
        v1 = rec.embed("notes")
        replay = CachedReplayBackend(cache, inner=None, strict=True)
        v2 = replay.embed("notes")
        assert np.array_equal(v1, v2)
        with pytest.raises(CacheMissError):
            replay.embed("unseen")

    def test_embed_returns_copy_not_alias(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([]))
        rec.embed("t")
        replay = CachedReplayBackend(cache, inner=None, strict=True)
        v = replay.embed("t")
        v[:] = 0.0
        assert not np.array_equal(replay.embed("t"), v)

    def test_corrupt_line_reports_line_number(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([ScriptEntry("a")]))
        rec.complete(req("q"))
        with open(cache, "a", encoding="utf-8") as fh:
            fh.write("{not json\n")
        with pytest.raises(GatewayError, match="line 2"):
            CachedReplayBackend(cache)

    def test_cache_file_is_jsonl_of_tagged_records(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(cache, inner=ScriptedBackend([ScriptEntry("a")]))
        rec.complete(req("q"))
        rec.embed("t")
        lines = [json.loads(l) for l in cache.read_text(encoding="utf-8").splitlines()]
        assert [obj["kind"] for obj in lines] == ["chat", "embed"]
        assert all("cache_key" in obj for obj in lines)

    def test_clock_injected_into_records(self, tmp_path):
        cache = tmp_path / "calls.jsonl"
        rec = CachedReplayBackend(
            cache, inner=ScriptedBackend([ScriptEntry("a")]), clock=lambda: 123.0
        )
        rec.complete(req("q"))
        obj = json.loads(cache.read_text(encoding="utf-8").splitlines()[0])
        assert obj["timestamp"] == 123.0


class _FakeResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise json.JSONDecodeError("empty", "", 0)
        return self._payload


def _completion_payload(text: str) -> dict:
    return {
        "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 4},
    }


class TestLiveHTTPBackend:
    def _backend(self, **kw) -> LiveHTTPBackend:
        kw.setdefault("sleeper", lambda _: None)
        return LiveHTTPBackend("https://api.test/v1", "engine", **kw)

    def test_requires_endpoint(self):
        with pytest.raises(ConfigError):
            LiveHTTPBackend("", "engine")

    def test_missing_credential_is_config_error(self, monkeypatch):
        monkeypatch.delenv("CONSILIUM_API_KEY", raising=False)
        with pytest.raises(ConfigError, match="CONSILIUM_API_KEY"):
            self._backend().complete(req("q"))

    def test_success_posts_expected_payload(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "sk-test")
        calls: list[tuple] = []

        def fake_post(url, headers=None, json=None, timeout=None):
            calls.append((url, headers, json, timeout))
            return _FakeResponse(200, _completion_payload("hello"))

        monkeypatch.setattr("requests.post", fake_post)
        out = self._backend(timeout=9.0).complete(
            req("ask me", temperature=0.2, max_tokens=50)
        )
        assert out.text == "hello"
        assert out.prompt_tokens == 3 and out.completion_tokens == 4
        url, headers, payload, timeout = calls[0]
        assert url == "https://api.test/v1/chat/completions"
        assert headers["Authorization"] == "Bearer sk-test"
        assert payload["model"] == "engine"
        assert payload["messages"] == [{"role": "user", "content": "ask me"}]
        assert payload["temperature"] == 0.2
        assert payload["max_tokens"] == 50
        assert timeout == 9.0

    def test_request_model_id_overrides_default(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        seen = {}

        def fake_post(url, **kw):
            seen["model"] = kw["json"]["model"]
            return _FakeResponse(200, _completion_payload("x"))

        monkeypatch.setattr("requests.post", fake_post)
        self._backend().complete(
            ChatRequest("special", (ChatMessage("user", "q"),), StepTag.OPINION)
        )
        assert seen["model"] == "special"

    def test_transport_errors_retry_then_fail(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        attempts = []
        delays = []

        def fake_post(url, **kw):
            attempts.append(url)
            return _FakeResponse(503)

        monkeypatch.setattr("requests.post", fake_post)
        backend = self._backend(sleeper=delays.append)
        with pytest.raises(TransportError):
            backend.complete(req("q"))
        assert len(attempts) == len(RETRY_DELAYS) + 1
        assert tuple(delays) == RETRY_DELAYS

    def test_rate_limit_retries_and_recovers(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        responses = [_FakeResponse(429), _FakeResponse(200, _completion_payload("ok"))]

        monkeypatch.setattr("requests.post", lambda url, **kw: responses.pop(0))
        assert self._backend().complete(req("q")).text == "ok"

    def test_client_error_never_retried(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        attempts = []

        def fake_post(url, **kw):
            attempts.append(url)
            return _FakeResponse(400, text="bad request body")

        monkeypatch.setattr("requests.post", fake_post)
        with pytest.raises(GatewayError, match="400"):
            self._backend().complete(req("q"))
        assert len(attempts) == 1

    def test_connection_failure_retried(self, monkeypatch):
        import requests

        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        state = {"n": 0}

        def fake_post(url, **kw):
            state["n"] += 1
            if state["n"] == 1:
                raise requests.ConnectionError("refused")
            return _FakeResponse(200, _completion_payload("back"))

        monkeypatch.setattr("requests.post", fake_post)
        assert self._backend().complete(req("q")).text == "back"

    def test_malformed_completion_schema(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        monkeypatch.setattr(
            "requests.post", lambda url, **kw: _FakeResponse(200, {"choices": []})
        )
        with pytest.raises(GatewayError):
            self._backend().complete(req("q"))

    def test_embed_normalizes_and_posts_to_embeddings(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        seen = {}

        def fake_post(url, **kw):
            seen["url"] = url
            seen["payload"] = kw["json"]
            return _FakeResponse(200, {"data": [{"embedding": [3.0, 4.0]}]})

        monkeypatch.setattr("requests.post", fake_post)
        v = self._backend(embed_model_id="embedder").embed("vec me")
        assert seen["url"] == "https://api.test/v1/embeddings"
        assert seen["payload"] == {"model": "embedder", "input": "vec me"}
        assert np.allclose(v, [0.6, 0.8])

    def test_embed_zero_vector_rejected(self, monkeypatch):
        monkeypatch.setenv("CONSILIUM_API_KEY", "k")
        monkeypatch.setattr(
            "requests.post",
            lambda url, **kw: _FakeResponse(200, {"data": [{"embedding": [0.0, 0.0]}]}),
        )
        with pytest.raises(GatewayError):
            self._backend().embed("q")

    def test_embed_empty_text_rejected(self):
        with pytest.raises(ValueError):
            self._backend().embed("")


class TestModuleHelpers:
    def test_complete_routes_through_backend(self):
        out = complete(req("q"), ScriptedBackend([ScriptEntry("here")]))
        assert out.text == "here"

    def test_embed_renormalizes_drifted_vectors(self):
        class Drifty:
            def embed(self, text):
                return np.array([0.0, 2.0])

        v = embed("t", Drifty())
        assert np.allclose(v, [0.0, 1.0])

    def test_embed_rejects_empty(self):
        with pytest.raises(ValueError):
            embed("", ScriptedBackend([]))


class TestMeteredBackend:
    def test_tallies_calls_and_tokens(self):
        inner = ScriptedBackend([ScriptEntry("abcdefgh"), ScriptEntry("ij")])
        m = MeteredBackend(inner)
        m.complete(req("x" * 8))
        m.complete(req("x" * 8))
        assert m.calls == 2
        assert m.prompt_tokens == 4
        assert m.completion_tokens == 2
        assert m.total_tokens == 6
        assert m.kind == "scripted"

    def test_embed_passthrough_not_counted(self):
        m = MeteredBackend(ScriptedBackend([]))
        m.embed("t")
        assert m.calls == 0
