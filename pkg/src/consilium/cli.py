"""Command-line surface.

Subcommands: consult, build-pool, eval, route, replay. Flags override the
config file (flags win). Exit codes: 0 success, 1 usage/config, 2 runtime.
Failures print a single-line JSON object on stderr; partial artifacts
already written stay on disk.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import BackendConfig, EngineConfig, RunManifest, load_config
from .errors import ConfigError, EngineError
from .evaluation import PIPELINES, run_benchmark
from .experience import build_pool_from_runs
from .gateway import MeteredBackend
from .router import RoutePolicy, route_case, write_routing_log
from .runs import (
    build_backend,
    find_run_dir,
    record_consultation,
    replay_run,
    utc_now,
)
from .transcript import TaskRecord


class UsageError(ConfigError):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse errors through our own channel
        raise UsageError(message)


def _emit_error(kind: str, exc: BaseException) -> None:
    line = json.dumps({"error": kind, "message": str(exc)}, ensure_ascii=False)
    print(line, file=sys.stderr)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, ensure_ascii=False, sort_keys=True))


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--backend", choices=("scripted", "cached", "live"))
    sub.add_argument("--script", help="script file for the scripted backend")
    sub.add_argument("--cache", help="cache file for the cached backend")
    sub.add_argument("--strict", action="store_true", help="strict replay mode")
    sub.add_argument("--endpoint", help="API base URL for the live backend")
    sub.add_argument("--model", help="model id for requests")
    sub.add_argument("--domain", choices=("medicine", "math", "education", "other"))
    sub.add_argument("--team-size", type=int)
    sub.add_argument("--max-rounds", type=int)
    sub.add_argument("--k", type=int, help="experience hints per retrieval")
    sub.add_argument("--scheme", choices=("naive", "difference", "shapley"))
    sub.add_argument("--gamma", type=float)
    sub.add_argument("--lam", type=float, help="score/outcome fusion weight")
    sub.add_argument("--beta", type=float)
    sub.add_argument("--pool", help="experience pool JSONL path")
    sub.add_argument("--runs-dir", help="root directory for run artifacts")


def build_parser() -> _Parser:
    parser = _Parser(prog="consilium", description="Multi-agent consultation engine")
    subs = parser.add_subparsers(dest="command", required=True)

    consult = subs.add_parser("consult", parents=[], help="run one consultation")
    consult.add_argument("--task", required=True, help="task JSON file")
    _add_common_flags(consult)

    build_pool = subs.add_parser(
        "build-pool", help="score runs and distill an experience pool"
    )
    build_pool.add_argument(
        "--runs", nargs="+", required=True, help="run directories to distill"
    )
    build_pool.add_argument("--out", required=True, help="output pool JSONL")
    _add_common_flags(build_pool)

    ev = subs.add_parser("eval", help="run a benchmark pipeline over a dataset")
    ev.add_argument("--dataset", required=True, help="dataset JSONL file")
    ev.add_argument("--pipeline", required=True, choices=PIPELINES)
    ev.add_argument("--out-dir", help="directory for metrics/cases/transcripts")
    ev.add_argument("--exemplars", help="exemplar JSONL for the fewshot arm")
    ev.add_argument("--seed", type=int, default=0)
    _add_common_flags(ev)

    route_p = subs.add_parser("route", help="batch-route cases single vs multi")
    route_p.add_argument("--dataset", required=True, help="dataset JSONL file")
    route_p.add_argument("--out", default="routing.csv", help="routing log CSV")
    _add_common_flags(route_p)

    replay = subs.add_parser("replay", help="re-execute a run from its call cache")
    replay.add_argument("--run", help="run id under --runs-dir")
    replay.add_argument("--run-dir", help="explicit run directory path")
    _add_common_flags(replay)
    return parser


def _effective_config(args) -> EngineConfig:
    if args.config:
        config = load_config(args.config)
    elif args.backend:
        config = EngineConfig(
            backend=BackendConfig(
                kind=args.backend,
                script_path=args.script,
                cache_path=args.cache,
                strict=args.strict,
                endpoint_url=args.endpoint or "",
                model_id=args.model or "engine",
            )
        )
    else:
        raise UsageError("either --config or --backend is required")

    backend = config.backend
    changes = {}
    if args.backend:
        changes["kind"] = args.backend
    if args.script:
        changes["script_path"] = args.script
    if args.cache:
        changes["cache_path"] = args.cache
    if args.strict:
        changes["strict"] = True
    if args.endpoint:
        changes["endpoint_url"] = args.endpoint
    if args.model:
        changes["model_id"] = args.model
    if changes:
        # one replace so validation sees the final state, not intermediates
        backend = replace(backend, **changes)

    config = config.with_overrides(
        domain=args.domain,
        team_size=args.team_size,
        max_rounds=args.max_rounds,
        k=args.k,
        scheme=args.scheme,
        gamma=args.gamma,
        lam=args.lam,
        beta=args.beta,
        pool_path=args.pool,
        runs_dir=args.runs_dir,
        model_id=args.model,
    )
    return replace(config, backend=backend)


def _load_task(path: str, domain: str) -> TaskRecord:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    obj.setdefault("domain", domain)
    return TaskRecord.from_json(obj)


def cmd_consult(args) -> int:
    config = _effective_config(args)
    task = _load_task(args.task, config.domain)
    recorded = record_consultation(task, config)
    _emit(
        {
            "run_id": recorded.run_id,
            "run_dir": str(recorded.run_dir),
            "decision": recorded.transcript.decision.headline()
            if recorded.transcript.decision
            else "",
            "transcript_digest": recorded.transcript.digest(),
        }
    )
    return 0


def cmd_build_pool(args) -> int:
    config = _effective_config(args)
    backend = build_backend(config.backend)
    started = utc_now()
    pool, manifest = build_pool_from_runs(
        [Path(d) for d in args.runs],
        config.credit,
        backend,
        out_path=args.out,
        model_id=config.model_id,
    )
    manifest_path = Path(args.out).with_suffix(".manifest.json")
    RunManifest(
        run_id=manifest["pool_digest"][:16],
        config_digest=config.digest(),
        pipeline="build-pool",
        created_at=started,
        finished_at=utc_now(),
        outcome=manifest,
    ).save(manifest_path)
    _emit(
        {
            "pool": str(args.out),
            "entries": len(pool),
            "pool_digest": manifest["pool_digest"],
            "manifest": str(manifest_path),
        }
    )
    return 0


def cmd_eval(args) -> int:
    config = _effective_config(args)
    if args.pipeline == "mattrl" and not config.pool_path:
        raise ConfigError("pipeline 'mattrl' requires pool_path (set --pool)")
    if args.pipeline == "multi+fewshot" and not args.exemplars:
        raise ConfigError("pipeline 'multi+fewshot' requires --exemplars")
    backend = MeteredBackend(build_backend(config.backend))
    started = utc_now()
    report, cases = run_benchmark(
        args.dataset,
        args.pipeline,
        backend,
        out_dir=args.out_dir,
        domain=config.domain,
        team_size=config.team_size,
        max_rounds=config.max_rounds,
        k=config.k,
        pool_path=config.pool_path,
        exemplar_path=args.exemplars,
        seed=args.seed,
        model_id=config.model_id,
    )
    if args.out_dir:
        RunManifest(
            run_id=f"eval-{Path(args.dataset).stem}-{args.pipeline}",
            config_digest=config.digest(),
            pipeline=args.pipeline,
            created_at=started,
            finished_at=utc_now(),
            outcome=report.to_json(),
        ).save(Path(args.out_dir) / "manifest.json")
    _emit({"pipeline": args.pipeline, "cases": len(cases), **report.to_json()})
    return 0


def cmd_route(args) -> int:
    config = _effective_config(args)
    backend = build_backend(config.backend)
    policy = RoutePolicy(
        specialties_threshold=config.router_specialties_threshold,
        divergence_threshold=config.router_divergence_threshold,
    )
    from .evaluation import load_dataset

    rows = []
    counts = {"single": 0, "multi": 0}
    started = utc_now()
    for task in load_dataset(args.dataset, config.domain):
        decision = route_case(task, backend, policy=policy, model_id=config.model_id)
        rows.append((task.id, decision))
        counts[decision.route] += 1
    write_routing_log(rows, args.out)
    RunManifest(
        run_id=f"route-{Path(args.dataset).stem}",
        config_digest=config.digest(),
        pipeline="route",
        created_at=started,
        finished_at=utc_now(),
        outcome={"cases": len(rows), **counts},
    ).save(Path(args.out).with_suffix(".manifest.json"))
    _emit({"out": str(args.out), "cases": len(rows), **counts})
    return 0


def cmd_replay(args) -> int:
    if args.run_dir:
        run_dir = Path(args.run_dir)
    elif args.run:
        runs_root = args.runs_dir or "runs"
        run_dir = find_run_dir(runs_root, args.run)
    else:
        raise UsageError("replay requires --run or --run-dir")
    result = replay_run(run_dir)
    _emit(
        {
            "run_id": result.run_id,
            "ok": result.ok,
            "original_digest": result.original_digest,
            "replayed_digest": result.replayed_digest,
        }
    )
    return 0 if result.ok else 2


_COMMANDS = {
    "consult": cmd_consult,
    "build-pool": cmd_build_pool,
    "eval": cmd_eval,
    "route": cmd_route,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", exc)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        _emit_error("usage", exc)
        return 1
    except ConfigError as exc:
        _emit_error("config", exc)
        return 1
    except EngineError as exc:
        _emit_error("runtime", exc)
        return 2
    except OSError as exc:
        _emit_error("runtime", exc)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
