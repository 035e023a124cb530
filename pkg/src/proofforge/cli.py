"""Command-line pipeline driver.

One subcommand per stage (ingest, synth-func, synth-project, validate,
mutate, dedup, mix, eval, report) plus `resume`, which replays a run's
manifest chain: stages whose inputs and outputs still byte-match are
skipped, anything downstream of a changed input reruns, and a store whose
artifacts no longer match their manifest is refused rather than silently
recomputed.

Exit codes: 0 on success, 1 for user errors (missing inputs, bad config,
bad data, a locked or corrupted store), 2 for environment failures (a
completion backend or checker that cannot be reached).
"""

from __future__ import annotations

import argparse
import shlex
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__, stages
from .config import ConfigError, PipelineConfig, load_config
from .jsonl import JsonlError
from .llm_client import BackendError
from .manifest import LockError, ResumeError, RunLock, RunStore, plan_resume
from .stages import StageOutcome, UnavailableError

# Stages that invoke the checker; probed for availability before locking.
_CHECKED_COMMANDS = {"validate", "mutate", "eval", "resume"}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (YAML)")
    common.add_argument("--store", default=".", help="run store root (default: .)")
    common.add_argument("--run-id", default="default", help="run identifier")
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--backend", help="backend profile name from the config")
    common.add_argument(
        "--parallelism", type=int, help="override the configured worker count"
    )
    common.add_argument(
        "--stage-input",
        help="artifact ref or path to read instead of the stage default",
    )
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="print what would run without writing anything",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proofforge",
        description="verification-guided synthetic data pipeline",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", parents=[common], help="extract snippets from a source tree")
    p.add_argument("--source", required=True, help="root of the source tree")
    p.set_defaults(runner=_run_ingest)

    p = sub.add_parser("synth-func", parents=[common], help="sample function-level candidates from snippets")
    p.set_defaults(runner=_run_synth_func)

    p = sub.add_parser("synth-project", parents=[common], help="sample definition candidates for seed contexts")
    p.add_argument("--contexts", required=True, help="seed contexts JSONL file")
    p.set_defaults(runner=_run_synth_project)

    p = sub.add_parser("validate", parents=[common], help="check every row with the checker")
    p.set_defaults(runner=_run_validate)

    p = sub.add_parser("mutate", parents=[common], help="turn verified solutions into repair problems")
    p.set_defaults(runner=_run_mutate)

    p = sub.add_parser("dedup", parents=[common], help="apply the curation policy to a dataset")
    p.add_argument("--test-set", help="JSONL of held-out solutions to filter against")
    p.set_defaults(runner=_run_dedup)

    p = sub.add_parser("mix", parents=[common], help="assemble the configured training mixture")
    p.add_argument(
        "--dataset",
        action="append",
        metavar="NAME=PATH",
        help="override a mixture component ref with a file (repeatable)",
    )
    p.set_defaults(runner=_run_mix)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol")
    p.add_argument("--contexts", required=True, help="evaluation problems JSONL file")
    p.add_argument("--protocol", required=True, help="protocol name, e.g. Gen5Rep5")
    p.add_argument("--repair-backend", help="backend profile for the repair turns")
    p.set_defaults(runner=_run_eval)

    p = sub.add_parser("report", parents=[common], help="render an evaluation report as text")
    p.set_defaults(runner=_run_report)

    p = sub.add_parser("resume", parents=[common], help="replay a run, skipping byte-identical stages")
    p.set_defaults(runner=None)

    return parser


def _load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.parallelism is not None:
        config = replace(config, parallelism=args.parallelism)
    return config


def _probe_checker(config: PipelineConfig) -> None:
    """Fail fast, before any artifact is written, if the checker is absent."""
    if config.checker.get("kind") != "command":
        return
    template = config.checker.get("command_template")
    if not template:
        return  # left for config validation to reject with the field name
    executable = shlex.split(template)[0]
    if "/" in executable:
        found = Path(executable).exists()
    else:
        found = shutil.which(executable) is not None
    if not found:
        raise UnavailableError(f"checker command {executable!r} is not available")


def _parse_datasets(pairs: Sequence[str] | None) -> dict[str, str]:
    datasets = {}
    for pair in pairs or ():
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"--dataset expects NAME=PATH, got {pair!r}")
        datasets[name] = path
    return datasets


def _run_ingest(args, store, config, argv) -> StageOutcome:
    return stages.run_ingest(
        store, config, args.run_id, args.seed, source=args.source, argv=argv
    )


def _run_synth_func(args, store, config, argv) -> StageOutcome:
    return stages.run_synth_func(
        store,
        config,
        args.run_id,
        args.seed,
        backend_name=args.backend,
        stage_input=args.stage_input,
        argv=argv,
    )


def _run_synth_project(args, store, config, argv) -> StageOutcome:
    return stages.run_synth_project(
        store,
        config,
        args.run_id,
        args.seed,
        contexts=args.contexts,
        backend_name=args.backend,
        argv=argv,
    )


def _run_validate(args, store, config, argv) -> StageOutcome:
    return stages.run_validate(
        store, config, args.run_id, args.seed, stage_input=args.stage_input, argv=argv
    )


def _run_mutate(args, store, config, argv) -> StageOutcome:
    return stages.run_mutate(
        store, config, args.run_id, args.seed, stage_input=args.stage_input, argv=argv
    )


def _run_dedup(args, store, config, argv) -> StageOutcome:
    return stages.run_dedup(
        store,
        config,
        args.run_id,
        args.seed,
        stage_input=args.stage_input,
        test_set=args.test_set,
        argv=argv,
    )


def _run_mix(args, store, config, argv) -> StageOutcome:
    return stages.run_mix(
        store,
        config,
        args.run_id,
        args.seed,
        datasets=_parse_datasets(args.dataset),
        argv=argv,
    )


def _run_eval(args, store, config, argv) -> StageOutcome:
    return stages.run_eval(
        store,
        config,
        args.run_id,
        args.seed,
        contexts=args.contexts,
        protocol_name=args.protocol,
        backend_name=args.backend,
        repair_backend_name=args.repair_backend,
        argv=argv,
    )


def _run_report(args, store, config, argv) -> StageOutcome:
    outcome = stages.run_report(
        store, config, args.run_id, args.seed, stage_input=args.stage_input, argv=argv
    )
    path = store.artifact_path(args.run_id, "report/report.txt")
    print(path.read_text(encoding="utf-8"), end="")
    return outcome


def _run_resume(
    args: argparse.Namespace,
    store: RunStore,
    parser: argparse.ArgumentParser,
    *,
    execute: bool,
) -> None:
    plans = plan_resume(store, args.run_id)
    for plan in plans:
        print(f"[{plan.stage}] {plan.action}: {plan.reason}")
        if plan.action != "rerun" or not execute:
            continue
        if not plan.argv:
            raise ResumeError(
                f"stage {plan.stage!r} has no recorded command to replay"
            )
        stage_args = parser.parse_args(list(plan.argv))
        stage_config = _load_pipeline_config(stage_args)
        outcome = stage_args.runner(stage_args, store, stage_config, list(plan.argv))
        print(outcome.summary())


def main(argv: Sequence[str] | None = None) -> int:
    raw = list(argv) if argv is not None else sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(raw)
    try:
        config = _load_pipeline_config(args)
        store = RunStore(args.store)
        if args.command == "resume":
            if args.dry_run:
                _run_resume(args, store, parser, execute=False)
                return 0
            _probe_checker(config)
            with RunLock(store):
                _run_resume(args, store, parser, execute=True)
            return 0
        if args.dry_run:
            print(
                f"dry-run: would run {args.command} for run {args.run_id!r} "
                f"under {store.run_dir(args.run_id)}"
            )
            return 0
        if args.command in _CHECKED_COMMANDS:
            _probe_checker(config)
        with RunLock(store):
            outcome = args.runner(args, store, config, raw)
        print(outcome.summary())
        return 0
    except (LockError, ResumeError) as exc:
        print(f"proofforge: error: {exc}", file=sys.stderr)
        return 1
    except (BackendError, UnavailableError) as exc:
        print(f"proofforge: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"proofforge: error: {exc}", file=sys.stderr)
        return 1
    except (JsonlError, ValueError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"proofforge: error: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"proofforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
