"""Run directories: recording, locking, and strict replay.

Every consultation lands in ``<runs_dir>/<run_id>/`` holding the transcript,
the full gateway call cache, the exact config used, and a manifest. Replay
rebuilds the run from the cache alone with strict mode on, so a digest match
proves prompt-level determinism end to end.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .config import BackendConfig, EngineConfig, RunManifest, write_config
from .deliberation import run_consultation
from .errors import ConfigError, RunLockError
from .experience import load_pool
from .gateway import CachedReplayBackend, LiveHTTPBackend, ScriptedBackend
from .retrieval import PoolRetriever
from .transcript import TaskRecord, Transcript

TRANSCRIPT_FILE = "transcript.jsonl"
CALLS_FILE = "calls.jsonl"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
LOCK_FILE = ".lock"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunLock:
    """Exclusive-create lockfile guarding a run directory against concurrent
    writers; stale locks must be removed by hand (the file names its owner)."""

    def __init__(self, run_dir: str | Path):
        self._path = Path(run_dir) / LOCK_FILE
        self._fd: Optional[int] = None

    def __enter__(self) -> "RunLock":
        self._path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(
                f"run directory {self._path.parent} is locked by another writer "
                f"(remove {self._path} if stale)"
            ) from None
        os.write(self._fd, f"pid={os.getpid()} at={utc_now()}\n".encode("utf-8"))
        return self

    def __exit__(self, *exc_info) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self._path.unlink(missing_ok=True)


def build_backend(config: BackendConfig):
    """Backend instance from config; cached kind wraps live when an
    endpoint is configured, else replays pure cache."""
    if config.kind == "scripted":
        try:
            return ScriptedBackend.from_file(config.script_path)
        except OSError as exc:
            raise ConfigError(
                f"cannot read script {config.script_path}: {exc}"
            ) from exc
    if config.kind == "live":
        return LiveHTTPBackend(
            endpoint_url=config.endpoint_url,
            model_id=config.model_id,
            embed_model_id=config.embed_model_id or None,
            credential_env=config.credential_env,
            timeout=config.timeout,
        )
    inner = None
    if config.endpoint_url:
        inner = LiveHTTPBackend(
            endpoint_url=config.endpoint_url,
            model_id=config.model_id,
            embed_model_id=config.embed_model_id or None,
            credential_env=config.credential_env,
            timeout=config.timeout,
        )
    return CachedReplayBackend(config.cache_path, inner=inner, strict=config.strict)


@dataclass
class RecordedRun:
    run_id: str
    run_dir: Path
    transcript: Transcript
    manifest: RunManifest


def record_consultation(
    task: TaskRecord,
    config: EngineConfig,
    *,
    backend=None,
    runs_root: Optional[str | Path] = None,
    pipeline: str = "consult",
) -> RecordedRun:
    """One consultation into a locked run directory with a full call cache."""
    if backend is None:
        backend = build_backend(config.backend)

    from .deliberation import default_run_id

    run_id = default_run_id(
        task, config.domain, str(config.team_size), str(config.max_rounds), str(config.k)
    )
    root = Path(runs_root if runs_root is not None else config.runs_dir)
    run_dir = root / run_id
    with RunLock(run_dir):
        recorder = CachedReplayBackend(run_dir / CALLS_FILE, inner=backend)
        # retriever embeds through the recorder so replay can serve them
        retriever = None
        if config.pool_path:
            retriever = PoolRetriever(load_pool(config.pool_path), recorder)
        created = utc_now()
        transcript = run_consultation(
            task,
            recorder,
            team_size=config.team_size,
            max_rounds=config.max_rounds,
            retriever=retriever,
            k=config.k,
            model_id=config.model_id,
            run_id=run_id,
        )
        transcript.save(run_dir / TRANSCRIPT_FILE)
        config_digest = write_config(config, run_dir / CONFIG_FILE)
        manifest = RunManifest(
            run_id=run_id,
            config_digest=config_digest,
            pipeline=pipeline,
            created_at=created,
            finished_at=utc_now(),
            outcome={
                "decision": transcript.decision.headline() if transcript.decision else "",
                "rounds": transcript.r_actual,
                "transcript_digest": transcript.digest(),
            },
        )
        manifest.save(run_dir / MANIFEST_FILE)
    return RecordedRun(run_id, run_dir, transcript, manifest)


@dataclass
class ReplayResult:
    run_id: str
    original_digest: str
    replayed_digest: str

    @property
    def ok(self) -> bool:
        return self.original_digest == self.replayed_digest


def replay_run(run_dir: str | Path) -> ReplayResult:
    """Re-execute a recorded run purely from its call cache (strict mode).

    A digest match proves every prompt and response reproduced exactly.
    """
    run_dir = Path(run_dir)
    transcript_path = run_dir / TRANSCRIPT_FILE
    calls_path = run_dir / CALLS_FILE
    config_path = run_dir / CONFIG_FILE
    for path in (transcript_path, calls_path, config_path):
        if not path.exists():
            raise ConfigError(f"replay requires {path.name} in {run_dir}")
    original = Transcript.load(transcript_path)
    config = EngineConfig.from_json(
        json.loads(config_path.read_text(encoding="utf-8"))
    )
    backend = CachedReplayBackend(calls_path, inner=None, strict=True)
    retriever = None
    if config.pool_path:
        retriever = PoolRetriever(load_pool(config.pool_path), backend)
    replayed = run_consultation(
        original.task,
        backend,
        team_size=config.team_size,
        max_rounds=config.max_rounds,
        retriever=retriever,
        k=config.k,
        model_id=config.model_id,
        run_id=original.run_id,
    )
    return ReplayResult(
        run_id=original.run_id,
        original_digest=original.digest(),
        replayed_digest=replayed.digest(),
    )


def list_runs(runs_root: str | Path) -> list[RunManifest]:
    root = Path(runs_root)
    manifests = []
    if not root.exists():
        return manifests
    for child in sorted(root.iterdir()):
        manifest_path = child / MANIFEST_FILE
        if manifest_path.exists():
            manifests.append(RunManifest.load(manifest_path))
    return manifests


def find_run_dir(runs_root: str | Path, run_id: str) -> Path:
    run_dir = Path(runs_root) / run_id
    if not run_dir.exists():
        raise ConfigError(f"run {run_id} not found under {runs_root}")
    return run_dir
