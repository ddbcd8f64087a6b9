"""Run directories: locking, recording, cache reuse, and strict replay."""

from __future__ import annotations

import hashlib
import json

import pytest

from consilium.config import BackendConfig, EngineConfig
from consilium.deliberation import default_run_id
from consilium.errors import ConfigError, ConsultationError, RunLockError
from consilium.gateway.backends import (
    CachedReplayBackend,
    LiveHTTPBackend,
    ScriptedBackend,
)
from consilium.gateway.types import ChatMessage, ChatRequest, StepTag
from consilium.runs import (
    CALLS_FILE,
    CONFIG_FILE,
    LOCK_FILE,
    MANIFEST_FILE,
    TRANSCRIPT_FILE,
    RunLock,
    build_backend,
    find_run_dir,
    list_runs,
    record_consultation,
    replay_run,
)
from consilium.transcript import Transcript

from conftest import (
    TOP10_CHEST_PAIN,
    script_chest_pain,
    script_thyrotoxicosis,
    scripted,
    task_chest_pain,
    task_thyrotoxicosis,
    tiny_pool,
)


def engine_config(**overrides) -> EngineConfig:
    base = dict(
        domain="medicine",
        backend=BackendConfig(kind="scripted", script_path="unused.json"),
    )
    base.update(overrides)
    return EngineConfig(**base)


def record_chest_pain(runs_root, **config_overrides):
    config = engine_config(**config_overrides)
    backend = scripted(script_chest_pain())
    rec = record_consultation(
        task_chest_pain(), config, backend=backend, runs_root=runs_root
    )
    return rec, backend


class TestRunLock:
    def test_lock_file_lifecycle(self, tmp_path):
        run_dir = tmp_path / "run"
        lock_path = run_dir / LOCK_FILE
        with RunLock(run_dir):
            assert lock_path.exists()
            assert "pid=" in lock_path.read_text(encoding="utf-8")
        assert not lock_path.exists()

    def test_contention_raises(self, tmp_path):
        run_dir = tmp_path / "run"
        with RunLock(run_dir):
            with pytest.raises(RunLockError, match="locked by another writer"):
                with RunLock(run_dir):
                    pass

    def test_error_names_lock_path(self, tmp_path):
        run_dir = tmp_path / "run"
        with RunLock(run_dir):
            with pytest.raises(RunLockError, match=LOCK_FILE.replace(".", r"\.")):
                with RunLock(run_dir):
                    pass

    def test_reacquire_after_release(self, tmp_path):
        run_dir = tmp_path / "run"
        with RunLock(run_dir):
            pass
        with RunLock(run_dir):
            pass

    def test_creates_parent_dirs(self, tmp_path):
        run_dir = tmp_path / "a" / "b" / "run"
        with RunLock(run_dir):
            assert run_dir.exists()


class TestBuildBackend:
    def test_scripted_from_file(self, tmp_path):
        script = tmp_path / "script.json"
        script.write_text(
            json.dumps(
                [{"tag": "opinion", "contains": "", "response": "fine"}]
            ),
            encoding="utf-8",
        )
        backend = build_backend(
            BackendConfig(kind="scripted", script_path=str(script))
        )
        assert isinstance(backend, ScriptedBackend)
        assert backend.remaining == 1

    def test_cached_pure_replay(self, tmp_path):
        backend = build_backend(
            BackendConfig(kind="cached", cache_path=str(tmp_path / "c.jsonl"))
        )
        assert isinstance(backend, CachedReplayBackend)

    def test_live(self, monkeypatch):
        monkeypatch.delenv("CONSILIUM_API_KEY", raising=False)
        backend = build_backend(
            BackendConfig(kind="live", endpoint_url="https://api.example/v1")
        )
        assert isinstance(backend, LiveHTTPBackend)

    def test_cached_wraps_live_when_endpoint_given(self, tmp_path, monkeypatch):
        monkeypatch.delenv("CONSILIUM_API_KEY", raising=False)
        backend = build_backend(
            BackendConfig(
                kind="cached",
                cache_path=str(tmp_path / "c.jsonl"),
                endpoint_url="https://api.example/v1",
            )
        )
        assert isinstance(backend, CachedReplayBackend)
        request = ChatRequest("engine", (ChatMessage("user", "hi"),), StepTag.OPINION)
        with pytest.raises(ConfigError, match="CONSILIUM_API_KEY"):
            backend.complete(request)


class TestRecordConsultation:
    def test_run_directory_layout(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        for name in (TRANSCRIPT_FILE, CALLS_FILE, CONFIG_FILE, MANIFEST_FILE):
            assert (rec.run_dir / name).exists()
        assert not (rec.run_dir / LOCK_FILE).exists()
        assert rec.run_dir == tmp_path / rec.run_id

    def test_run_id_formula(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        expected = default_run_id(task_chest_pain(), "medicine", "3", "3", "8")
        assert rec.run_id == expected
        assert rec.transcript.run_id == expected

    def test_backend_fully_consumed(self, tmp_path):
        _, backend = record_chest_pain(tmp_path)
        assert backend.remaining == 0

    def test_manifest_contents(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        manifest = rec.manifest
        assert manifest.run_id == rec.run_id
        assert manifest.pipeline == "consult"
        assert manifest.created_at and manifest.finished_at
        assert manifest.outcome["rounds"] == 3
        assert manifest.outcome["transcript_digest"] == rec.transcript.digest()
        assert manifest.outcome["decision"] == rec.transcript.decision.headline()

    def test_config_digest_covers_written_file(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        file_digest = hashlib.sha256(
            (rec.run_dir / CONFIG_FILE).read_bytes()
        ).hexdigest()
        assert rec.manifest.config_digest == file_digest

    def test_transcript_file_roundtrip(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        loaded = Transcript.load(rec.run_dir / TRANSCRIPT_FILE)
        assert loaded.digest() == rec.transcript.digest()

    def test_existing_lock_blocks_run(self, tmp_path):
        run_id = default_run_id(task_chest_pain(), "medicine", "3", "3", "8")
        run_dir = tmp_path / run_id
        run_dir.mkdir(parents=True)
        (run_dir / LOCK_FILE).write_text("pid=999\n", encoding="utf-8")
        with pytest.raises(RunLockError):
            record_consultation(
                task_chest_pain(),
                engine_config(),
                backend=scripted(script_chest_pain()),
                runs_root=tmp_path,
            )
        assert not (run_dir / TRANSCRIPT_FILE).exists()

    def test_second_run_served_from_cache(self, tmp_path):
        first, _ = record_chest_pain(tmp_path)
        fresh = scripted(script_chest_pain())
        second = record_consultation(
            task_chest_pain(), engine_config(), backend=fresh, runs_root=tmp_path
        )
        assert fresh.remaining == len(script_chest_pain())
        assert second.transcript.digest() == first.transcript.digest()

    def test_pool_retriever_wired(self, tmp_path):
        pool_path = tmp_path / "pool.jsonl"
        tiny_pool().save(pool_path)
        rec, backend = record_chest_pain(tmp_path, pool_path=str(pool_path))
        assert backend.remaining == 0
        calls_text = (rec.run_dir / CALLS_FILE).read_text(encoding="utf-8")
        kinds = {json.loads(line)["kind"] for line in calls_text.splitlines()}
        assert "embed" in kinds
        assert "===== EXPERIENCE HINTS =====" in calls_text

    def test_pipeline_label(self, tmp_path):
        rec = record_consultation(
            task_chest_pain(),
            engine_config(),
            backend=scripted(script_chest_pain()),
            runs_root=tmp_path,
            pipeline="eval",
        )
        assert rec.manifest.pipeline == "eval"


class TestReplayRun:
    def test_replay_matches(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        result = replay_run(rec.run_dir)
        assert result.ok
        assert result.run_id == rec.run_id
        assert result.original_digest == rec.transcript.digest()
        assert result.replayed_digest == rec.transcript.digest()

    def test_replay_with_pool(self, tmp_path):
        pool_path = tmp_path / "pool.jsonl"
        tiny_pool().save(pool_path)
        rec, _ = record_chest_pain(tmp_path, pool_path=str(pool_path))
        assert replay_run(rec.run_dir).ok

    def test_replay_requires_artifacts(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        (rec.run_dir / CALLS_FILE).unlink()
        with pytest.raises(ConfigError, match=CALLS_FILE.replace(".", r"\.")):
            replay_run(rec.run_dir)

    def test_replay_detects_tampered_response(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        calls_path = rec.run_dir / CALLS_FILE
        lines = calls_path.read_text(encoding="utf-8").splitlines()
        edited = []
        for line in lines:
            obj = json.loads(line)
            if obj["kind"] == "chat" and "<top10>" in obj["response"]["text"]:
                obj["response"]["text"] = obj["response"]["text"].replace(
                    TOP10_CHEST_PAIN[9], "Herpes zoster"
                )
            edited.append(json.dumps(obj))
        calls_path.write_text("\n".join(edited) + "\n", encoding="utf-8")
        result = replay_run(rec.run_dir)
        assert not result.ok

    def test_replay_strict_on_missing_entry(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        calls_path = rec.run_dir / CALLS_FILE
        lines = calls_path.read_text(encoding="utf-8").splitlines()
        calls_path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(ConsultationError, match="no cached response"):
            replay_run(rec.run_dir)


class TestListAndFind:
    def test_list_runs_missing_root(self, tmp_path):
        assert list_runs(tmp_path / "nowhere") == []

    def test_list_runs_finds_manifests(self, tmp_path):
        rec1, _ = record_chest_pain(tmp_path)
        rec2 = record_consultation(
            task_thyrotoxicosis(),
            engine_config(),
            backend=scripted(script_thyrotoxicosis()),
            runs_root=tmp_path,
        )
        (tmp_path / "stray").mkdir()
        manifests = list_runs(tmp_path)
        assert {m.run_id for m in manifests} == {rec1.run_id, rec2.run_id}

    def test_find_run_dir(self, tmp_path):
        rec, _ = record_chest_pain(tmp_path)
        assert find_run_dir(tmp_path, rec.run_id) == rec.run_dir
        with pytest.raises(ConfigError, match="not found"):
            find_run_dir(tmp_path, "deadbeef")
