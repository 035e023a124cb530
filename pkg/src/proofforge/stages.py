"""Pipeline stages: each turns input artifacts into output artifacts.

Every stage reads rows, computes, writes canonical JSONL under
runs/<run_id>/<stage>/, and records a manifest mapping artifact refs to
byte digests. Identical inputs, config, and seed give identical output
digests; that property is what makes resume-by-digest and after-the-fact
provenance audits possible.

Two artifacts are deliberately kept out of that guarantee: usage ledgers
carry wall-clock timestamps and are never listed among digested outputs,
and checker verdict durations are zeroed before writing.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .checker import Status, Verdict, check, classify_error
from .config import (
    ConfigError,
    PipelineConfig,
    config_digest,
    make_checker_backend,
    make_completion_backend,
)
from .corpus import Snippet, extract_snippets, load_seed_contexts, snippet_stats
from .curation import DropReason, SimilarityConfig, cap_per_key, dedup, filter_leakage
from .evaluation import (
    NO_CODE_LOG,
    EvalProtocol,
    EvalReport,
    ProtocolKind,
    harvest_repair_problems,
    render_table,
    run_protocol,
)
from .jsonl import dumps_row, read_jsonl, sha256_file
from .llm_client import CompletionRequest, UsageLedger, complete
from .manifest import RunStore, StageManifest, tree_digest
from .mixture import MixtureSpec, build_mixture, dataset_report, format_example
from .mutator import SolutionSpec, mutate_many
from .records import RepairProblem, TrainingExample
from .seeds import derive_seed
from .taskgen import (
    TaskKind,
    TaskSkipped,
    extract_code,
    make_nl2code_task,
    make_project_definition_task,
)

_VAL_START = re.compile(r"\s*val\b")

# Row keys probed, in order, when a dataset row needs a single code text.
_BODY_KEYS = ("code", "definition", "response", "text")


class UnavailableError(RuntimeError):
    """A required external service or binary cannot be reached."""


@dataclass(frozen=True)
class StageOutcome:
    manifest: StageManifest
    counts: Mapping[str, int]

    def summary(self) -> str:
        parts = ", ".join(f"{key}={value}" for key, value in self.counts.items())
        return f"[{self.manifest.stage}] {parts}"


def _finish(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    stage: str,
    seed: int,
    inputs: Mapping[str, str],
    outputs: Mapping[str, str],
    argv: Sequence[str],
    counts: Mapping[str, int],
) -> StageOutcome:
    manifest = StageManifest(
        run_id=run_id,
        stage=stage,
        config_digest=config_digest(config),
        inputs=dict(inputs),
        outputs=dict(outputs),
        seed=seed,
        created_at=time.time(),
        argv=tuple(argv),
    )
    store.write_manifest(manifest)
    return StageOutcome(manifest=manifest, counts=dict(counts))


def _input_digest(store: RunStore, run_id: str, ref: str) -> str:
    path = store.artifact_path(run_id, ref)
    if not path.is_file():
        raise FileNotFoundError(f"expected artifact at {path}")
    return sha256_file(path)


def _row_id(row: Mapping[str, Any], index: int) -> str:
    if row.get("id"):
        return str(row["id"])
    if row.get("task_id") is not None and row.get("sample_index") is not None:
        return f"{row['task_id']}/{row['sample_index']}"
    return f"row-{index:05d}"


def _assemble(declaration: str, body: str) -> str:
    """Prefix the type declaration unless the body restates its own val."""
    if not declaration or _VAL_START.match(body):
        return body
    return declaration + "\n" + body


def _zero_durations(obj: Any) -> Any:
    """Wall time varies run to run; zero it so artifact bytes do not."""
    if isinstance(obj, dict):
        return {
            key: (0.0 if key == "duration_ms" else _zero_durations(value))
            for key, value in obj.items()
        }
    if isinstance(obj, list):
        return [_zero_durations(item) for item in obj]
    return obj


# --- ingest -------------------------------------------------------------


def run_ingest(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    source: str | Path,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Walk a source tree into snippets.jsonl plus a corpus profile."""
    source_dir = Path(source)
    if not source_dir.is_dir():
        raise FileNotFoundError(f"expected source tree at {source_dir}")

    snippets = extract_snippets(source_dir)
    stats = snippet_stats(snippets)

    _, snippets_digest = store.write_rows(
        run_id, "ingest", "snippets.jsonl", (s.to_row() for s in snippets)
    )
    _, stats_digest = store.write_rows(
        run_id, "ingest", "corpus_stats.jsonl", [stats.to_row()]
    )
    return _finish(
        store,
        config,
        run_id,
        "ingest",
        seed,
        inputs={f"tree:{source_dir.resolve()}": tree_digest(source_dir)},
        outputs={
            "ingest/snippets.jsonl": snippets_digest,
            "ingest/corpus_stats.jsonl": stats_digest,
        },
        argv=argv,
        counts={
            "snippets": len(snippets),
            "self_contained": sum(1 for s in snippets if s.self_contained),
        },
    )


# --- synthesis ----------------------------------------------------------


def _candidate_row(
    task_id: str,
    kind: TaskKind,
    prompt: str,
    sample_index: int,
    raw_text: str,
    *,
    type_declaration: str = "",
    context_id: str | None = None,
) -> dict[str, Any]:
    return {
        "task_id": task_id,
        "kind": kind.value,
        "prompt": prompt,
        "sample_index": sample_index,
        "raw_text": raw_text,
        "code": extract_code(raw_text, kind),
        "type_declaration": type_declaration,
        "context_id": context_id,
    }


def _sample_task(
    backend,
    profile_model: str,
    prompt: str,
    *,
    temperature: float,
    n_samples: int,
    max_tokens: int,
    seed_hint: int,
    ledger: UsageLedger,
    stage: str,
    task_id: str,
) -> list[str]:
    request = CompletionRequest(
        model_name=profile_model,
        messages=(("user", prompt),),
        temperature=temperature,
        n_samples=n_samples,
        max_tokens=max_tokens,
        seed_hint=seed_hint,
    )
    completions = complete(
        backend, request, ledger=ledger, stage=stage, problem_id=task_id
    )
    return [completion.text for completion in completions]


def run_synth_func(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    backend_name: str | None = None,
    stage_input: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Turn self-contained snippets into instruction tasks and sample them."""
    ref = stage_input or "ingest/snippets.jsonl"
    input_digest = _input_digest(store, run_id, ref)
    snippets = [Snippet.from_row(row) for row in store.read_rows(run_id, ref)]

    profile = config.profile(backend_name)
    backend = make_completion_backend(profile)
    template = config.template_text(TaskKind.NL2CODE.value)

    tasks = []
    skipped = 0
    for snippet in snippets:
        try:
            tasks.append(
                make_nl2code_task(snippet, template, budget=config.caps.budget)
            )
        except TaskSkipped:
            skipped += 1

    stage_dir = store.stage_dir(run_id, "synth-func")
    stage_dir.mkdir(parents=True, exist_ok=True)
    usage_path = stage_dir / "usage.jsonl"
    usage_path.unlink(missing_ok=True)
    ledger = UsageLedger(usage_path)

    candidates = []
    for task in tasks:
        texts = _sample_task(
            backend,
            profile.model or profile.name,
            task.prompt,
            temperature=config.temperatures.synth,
            n_samples=config.synth_samples,
            max_tokens=1024,
            seed_hint=derive_seed(seed, task.id, "synth-func"),
            ledger=ledger,
            stage="synth-func",
            task_id=task.id,
        )
        for index, text in enumerate(texts):
            candidates.append(
                _candidate_row(task.id, task.kind, task.prompt, index, text)
            )

    _, tasks_digest = store.write_rows(
        run_id, "synth-func", "tasks.jsonl", (t.to_row() for t in tasks)
    )
    _, candidates_digest = store.write_rows(
        run_id, "synth-func", "candidates.jsonl", candidates
    )
    return _finish(
        store,
        config,
        run_id,
        "synth-func",
        seed,
        inputs={ref: input_digest},
        outputs={
            "synth-func/tasks.jsonl": tasks_digest,
            "synth-func/candidates.jsonl": candidates_digest,
        },
        argv=argv,
        counts={
            "snippets": len(snippets),
            "tasks": len(tasks),
            "skipped": skipped,
            "candidates": len(candidates),
        },
    )


def run_synth_project(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    contexts: str | Path,
    backend_name: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Sample definition attempts for project-level seed contexts."""
    contexts_path = Path(contexts)
    if not contexts_path.is_file():
        raise FileNotFoundError(f"expected artifact at {contexts_path}")
    ctxs = load_seed_contexts(contexts_path, max_selected=config.caps.premises)

    profile = config.profile(backend_name)
    backend = make_completion_backend(profile)
    template = config.template_text(TaskKind.PROJECT_DEFINITION.value)

    stage_dir = store.stage_dir(run_id, "synth-project")
    stage_dir.mkdir(parents=True, exist_ok=True)
    usage_path = stage_dir / "usage.jsonl"
    usage_path.unlink(missing_ok=True)
    ledger = UsageLedger(usage_path)

    tasks = []
    candidates = []
    for ctx in ctxs:
        task = make_project_definition_task(ctx, template, caps=config.caps)
        tasks.append(task)
        texts = _sample_task(
            backend,
            profile.model or profile.name,
            task.prompt,
            temperature=config.temperatures.synth,
            n_samples=config.synth_samples,
            max_tokens=2048,
            seed_hint=derive_seed(seed, task.id, "synth-project"),
            ledger=ledger,
            stage="synth-project",
            task_id=task.id,
        )
        for index, text in enumerate(texts):
            candidates.append(
                _candidate_row(
                    task.id,
                    task.kind,
                    task.prompt,
                    index,
                    text,
                    type_declaration=ctx.type_declaration,
                    context_id=ctx.id,
                )
            )

    _, tasks_digest = store.write_rows(
        run_id, "synth-project", "tasks.jsonl", (t.to_row() for t in tasks)
    )
    _, candidates_digest = store.write_rows(
        run_id, "synth-project", "candidates.jsonl", candidates
    )
    return _finish(
        store,
        config,
        run_id,
        "synth-project",
        seed,
        inputs={str(contexts_path.resolve()): sha256_file(contexts_path)},
        outputs={
            "synth-project/tasks.jsonl": tasks_digest,
            "synth-project/candidates.jsonl": candidates_digest,
        },
        argv=argv,
        counts={
            "contexts": len(ctxs),
            "tasks": len(tasks),
            "candidates": len(candidates),
        },
    )


# --- validation ---------------------------------------------------------


def _candidate_program(row: Mapping[str, Any]) -> str | None:
    """The checkable program for a dataset row, or None for missing code."""
    if "program" in row:
        return str(row["program"])
    declaration = str(row.get("type_declaration") or "")
    for key in _BODY_KEYS:
        if key in row:
            body = row[key]
            if body is None:
                return None
            return _assemble(declaration, str(body))
    raise ValueError(
        "no checkable field (expected one of program, code, definition, "
        "response, or text)"
    )


def run_validate(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    stage_input: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Check every row; passing rows are copied through byte-identically.

    Repair rows pass only when the correct solution checks and the
    incorrect one fails, so a repair dataset validates both halves.
    """
    ref = stage_input or "synth-func/candidates.jsonl"
    input_digest = _input_digest(store, run_id, ref)
    rows = store.read_rows(run_id, ref)
    checker = make_checker_backend(config.checker)
    timeout_ms = config.checker.get("timeout_ms")

    units: list[tuple[int, str, str | None, str]] = []
    for index, row in enumerate(rows):
        rid = _row_id(row, index)
        if "incorrect_solution" in row:
            declaration = str(row.get("type_declaration") or "")
            units.append(
                (
                    index,
                    "correct",
                    _assemble(declaration, str(row.get("correct_solution") or "")),
                    f"{rid}/correct",
                )
            )
            units.append(
                (
                    index,
                    "incorrect",
                    _assemble(declaration, str(row["incorrect_solution"])),
                    f"{rid}/incorrect",
                )
            )
        else:
            try:
                program = _candidate_program(row)
            except ValueError as exc:
                raise ValueError(f"{ref} row {index}: {exc}") from exc
            units.append((index, "candidate", program, rid))

    def check_unit(unit: tuple[int, str, str | None, str]) -> Verdict:
        _, _, program, cid = unit
        if program is None or not program.strip():
            return Verdict(cid, Status.FAIL, NO_CODE_LOG, classify_error(NO_CODE_LOG))
        return check(program, backend=checker, timeout_ms=timeout_ms, candidate_id=cid)

    if config.parallelism > 1 and len(units) > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            verdicts = list(pool.map(check_unit, units))
    else:
        verdicts = [check_unit(unit) for unit in units]

    passed_rows: dict[int, bool] = {}
    for (index, role, _, _), verdict in zip(units, verdicts):
        if role == "candidate":
            passed_rows[index] = verdict.passed
        elif role == "correct":
            passed_rows[index] = verdict.passed
        else:  # incorrect half must fail for the row to count as valid
            passed_rows[index] = passed_rows.get(index, False) and not verdict.passed

    passing = [row for index, row in enumerate(rows) if passed_rows.get(index)]

    _, verdicts_digest = store.write_rows(
        run_id,
        "validate",
        "verdicts.jsonl",
        (_zero_durations(v.to_row()) for v in verdicts),
    )
    _, passing_digest = store.write_rows(run_id, "validate", "passing.jsonl", passing)
    return _finish(
        store,
        config,
        run_id,
        "validate",
        seed,
        inputs={ref: input_digest},
        outputs={
            "validate/verdicts.jsonl": verdicts_digest,
            "validate/passing.jsonl": passing_digest,
        },
        argv=argv,
        counts={
            "rows": len(rows),
            "passed": len(passing),
            "failed": len(rows) - len(passing),
        },
    )


# --- mutation -----------------------------------------------------------


def _split_solution(text: str) -> tuple[str, str, str]:
    """Split a self-contained program into (prelude, declaration, body).

    Leading open lines become the prelude and the val signature (with any
    continuation lines) becomes the declaration, so repair problems carry
    the declaration in its own field instead of buried in the solution.
    """
    lines = text.splitlines()
    prelude: list[str] = []
    declaration: list[str] = []
    body_start = len(lines)
    in_prelude = True
    for index, line in enumerate(lines):
        stripped = line.strip()
        if in_prelude:
            if not stripped or stripped.startswith("open "):
                prelude.append(line)
                continue
            in_prelude = False
        if stripped.startswith("val ") or (
            declaration and not stripped.startswith("let ")
        ):
            declaration.append(line)
            continue
        body_start = index
        break
    return (
        "\n".join(prelude).strip(),
        "\n".join(declaration).strip(),
        "\n".join(lines[body_start:]).strip(),
    )


def run_mutate(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    stage_input: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Break verified solutions into repair problems via seeded mutation."""
    ref = stage_input or "validate/passing.jsonl"
    input_digest = _input_digest(store, run_id, ref)
    rows = store.read_rows(run_id, ref)

    solutions = []
    for index, row in enumerate(rows):
        text = None
        for key in _BODY_KEYS:
            if row.get(key):
                text = str(row[key])
                break
        if text is None and row.get("program"):
            text = str(row["program"])
        if text is None:
            raise ValueError(f"{ref} row {index}: no solution text to mutate")
        prelude, declaration, body = _split_solution(text)
        if not body:
            raise ValueError(f"{ref} row {index}: no definition to mutate")
        solutions.append(
            SolutionSpec(
                declaration=declaration or str(row.get("type_declaration") or ""),
                body=body,
                context_id=row.get("context_id") or _row_id(row, index),
                prelude=prelude,
            )
        )

    checker = make_checker_backend(config.checker)
    problems = mutate_many(
        solutions,
        checker,
        max_mutants=config.mutation.max_mutants,
        max_kept=config.mutation.max_kept,
        seed=seed,
        parallelism=config.parallelism,
        token_fallback=config.mutation.token_fallback,
    )

    _, problems_digest = store.write_rows(
        run_id, "mutate", "repair_problems.jsonl", (p.to_row() for p in problems)
    )
    return _finish(
        store,
        config,
        run_id,
        "mutate",
        seed,
        inputs={ref: input_digest},
        outputs={"mutate/repair_problems.jsonl": problems_digest},
        argv=argv,
        counts={"solutions": len(solutions), "repair_problems": len(problems)},
    )


# --- curation -----------------------------------------------------------


def _load_test_texts(path: Path) -> list[str]:
    if not path.is_file():
        raise FileNotFoundError(f"expected artifact at {path}")
    texts = []
    for lineno, row in read_jsonl(path):
        for key in ("correct_solution",) + _BODY_KEYS:
            if row.get(key):
                texts.append(str(row[key]))
                break
        else:
            raise ValueError(f"{path} line {lineno}: no solution text")
    return texts


def _capped(
    rows: list[tuple[str, dict]],
    key: Callable[[tuple[str, dict]], Any],
    max_count: int,
    reason: str,
    drops: list[DropReason],
) -> list[tuple[str, dict]]:
    kept = cap_per_key(rows, key, max_count)
    kept_ids = {rid for rid, _ in kept}
    drops.extend(
        DropReason(id=rid, reason=reason) for rid, _ in rows if rid not in kept_ids
    )
    return kept


def _dedup_repair_rows(
    rows: list[dict],
    config: PipelineConfig,
    test_texts: Sequence[str],
) -> tuple[list[dict], list[DropReason]]:
    """Repair-set policy: drop test leaks and identical broken proofs, then
    cap model-harvested rows per source problem and all rows per declaration.
    Similarity dedup stays out: near-identical mutants of one solution are
    the point of the dataset, not noise.
    """
    drops: list[DropReason] = []
    tagged = [(_row_id(row, index), row) for index, row in enumerate(rows)]

    if test_texts:
        kept = filter_leakage(
            tagged, test_texts, key_extractor=lambda item: item[1]["correct_solution"]
        )
        kept_ids = {rid for rid, _ in kept}
        drops.extend(
            DropReason(id=rid, reason="matches-test-set")
            for rid, _ in tagged
            if rid not in kept_ids
        )
        tagged = kept

    tagged = _capped(
        tagged,
        lambda item: item[1]["incorrect_solution"],
        1,
        "duplicate-incorrect-solution",
        drops,
    )
    # The per-problem cap is for model-harvested rows; mutation volume is
    # already governed by the mutation budget.
    tagged = _capped(
        tagged,
        lambda item: (
            ("model", item[1].get("context_id"))
            if item[1].get("source") == "model"
            else ("other", item[0])
        ),
        config.per_key.per_problem,
        "per-problem-cap",
        drops,
    )
    tagged = _capped(
        tagged,
        lambda item: item[1]["type_declaration"],
        config.per_key.per_declaration,
        "per-declaration-cap",
        drops,
    )
    return [row for _, row in tagged], drops


def _dedup_definition_rows(
    rows: list[dict],
    config: PipelineConfig,
    test_texts: Sequence[str],
) -> tuple[list[dict], list[DropReason]]:
    """Generated-definition policy: similarity dedup plus leakage removal."""

    def key_of(row: Mapping[str, Any]) -> str:
        for key in _BODY_KEYS:
            if row.get(key):
                return str(row[key])
        return str(row.get("raw_text") or "")

    drops: list[DropReason] = []
    survivors = rows
    if test_texts:
        kept = filter_leakage(rows, test_texts, key_extractor=key_of)
        kept_ids = {id(row) for row in kept}
        drops.extend(
            DropReason(id=_row_id(row, index), reason="matches-test-set")
            for index, row in enumerate(rows)
            if id(row) not in kept_ids
        )
        survivors = kept

    cfg = SimilarityConfig(threshold=config.similarity_threshold)
    kept, sim_drops = dedup(survivors, key_of, cfg, id_extractor=_row_id)
    return kept, drops + list(sim_drops)


def run_dedup(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    stage_input: str | None = None,
    test_set: str | Path | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Apply the curation policy for the dataset shape found in the input."""
    ref = stage_input or "mutate/repair_problems.jsonl"
    input_digest = _input_digest(store, run_id, ref)
    rows = store.read_rows(run_id, ref)

    inputs = {ref: input_digest}
    test_texts: list[str] = []
    if test_set is not None:
        test_path = Path(test_set)
        test_texts = _load_test_texts(test_path)
        inputs[str(test_path.resolve())] = sha256_file(test_path)

    if rows and "incorrect_solution" in rows[0]:
        kept, drops = _dedup_repair_rows(rows, config, test_texts)
    else:
        kept, drops = _dedup_definition_rows(rows, config, test_texts)

    _, kept_digest = store.write_rows(run_id, "dedup", "kept.jsonl", kept)
    _, drops_digest = store.write_rows(
        run_id, "dedup", "drops.jsonl", (d.to_row() for d in drops)
    )
    return _finish(
        store,
        config,
        run_id,
        "dedup",
        seed,
        inputs=inputs,
        outputs={
            "dedup/kept.jsonl": kept_digest,
            "dedup/drops.jsonl": drops_digest,
        },
        argv=argv,
        counts={"items": len(rows), "kept": len(kept), "dropped": len(drops)},
    )


# --- mixing -------------------------------------------------------------


def _to_training_examples(
    rows: Sequence[Mapping[str, Any]],
) -> tuple[list[TrainingExample], int]:
    """Convert dataset rows to training examples.

    Rows that cannot become one by design, a harvested repair problem with
    no known correct solution or a candidate with no extracted code, are
    excluded and counted rather than treated as errors.
    """
    examples: list[TrainingExample] = []
    excluded = 0
    for index, row in enumerate(rows):
        if "instruction" in row and "response" in row:
            examples.append(TrainingExample.from_row(dict(row)))
        elif "incorrect_solution" in row:
            problem = RepairProblem.from_row(dict(row))
            if not problem.correct_solution.strip():
                excluded += 1
                continue
            examples.append(format_example(problem))
        elif "prompt" in row:
            code = row.get("code")
            if not code or not str(code).strip():
                excluded += 1
                continue
            examples.append(
                TrainingExample(
                    instruction=str(row["prompt"]),
                    response=str(code),
                    kind=str(row.get("kind") or "candidate"),
                    provenance={
                        "origin": _row_id(row, index),
                        "context_id": row.get("context_id"),
                    },
                )
            )
        else:
            raise ValueError(f"row {index}: cannot convert into a training example")
    return examples, excluded


def run_mix(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    datasets: Mapping[str, str] | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Assemble the configured training mixture from component datasets."""
    if config.mixture is None:
        raise ConfigError("mixture", "no mixture configured")
    spec = MixtureSpec.from_mapping(config.mixture)

    overrides = dict(datasets or {})
    known = {component.ref for component in spec.components}
    for name in overrides:
        if name not in known:
            raise ValueError(
                f"--dataset {name!r} does not match a mixture component "
                f"(have {sorted(known)})"
            )

    inputs: dict[str, str] = {}
    component_rows: dict[str, list[TrainingExample]] = {}
    excluded_total = 0
    for component in spec.components:
        ref = component.ref
        if ref in overrides:
            path = Path(overrides[ref]).resolve()
            input_ref = str(path)
        else:
            path = store.artifact_path(run_id, ref)
            input_ref = ref
        if not path.is_file():
            raise FileNotFoundError(f"expected artifact at {path}")
        inputs[input_ref] = sha256_file(path)
        rows = [row for _, row in read_jsonl(path)]
        examples, excluded = _to_training_examples(rows)
        component_rows[ref] = examples
        excluded_total += excluded

    mixed, mixture_manifest = build_mixture(spec, component_rows)
    meta = {
        "mixture": mixture_manifest,
        "composition": dataset_report(mixed),
        "excluded_rows": excluded_total,
    }

    _, train_digest = store.write_rows(
        run_id, "mix", "train.jsonl", (example.to_row() for example in mixed)
    )
    _, meta_digest = store.write_text(
        run_id, "mix", "mixture.json", dumps_row(meta) + "\n"
    )
    return _finish(
        store,
        config,
        run_id,
        "mix",
        seed,
        inputs=inputs,
        outputs={
            "mix/train.jsonl": train_digest,
            "mix/mixture.json": meta_digest,
        },
        argv=argv,
        counts={
            "components": len(spec.components),
            "examples": len(mixed),
            "excluded": excluded_total,
        },
    )


# --- evaluation ---------------------------------------------------------


def run_eval(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    contexts: str | Path,
    protocol_name: str,
    backend_name: str | None = None,
    repair_backend_name: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Run an evaluation protocol and harvest its failures as repair data."""
    contexts_path = Path(contexts)
    if not contexts_path.is_file():
        raise FileNotFoundError(f"expected artifact at {contexts_path}")
    ctxs = load_seed_contexts(contexts_path, max_selected=config.caps.premises)

    try:
        kind = ProtocolKind(protocol_name)
    except ValueError:
        raise ValueError(
            f"unknown protocol {protocol_name!r} "
            f"(have {[k.value for k in ProtocolKind]})"
        ) from None
    if kind is ProtocolKind.CROSS_MODEL_REPAIR:
        raise ValueError(
            "the eval stage runs generation protocols; cross-model repair "
            "starts from harvested failures, not seed contexts"
        )
    temperature = (
        config.temperatures.function_eval
        if kind is ProtocolKind.FUNC_GEN_REPAIR1
        else config.temperatures.project_eval
    )
    protocol = EvalProtocol(kind, temperature=temperature)

    profile = config.profile(backend_name)
    backend = make_completion_backend(profile)
    repair_backend = (
        make_completion_backend(config.profile(repair_backend_name))
        if repair_backend_name is not None
        else None
    )
    checker = make_checker_backend(config.checker)

    stage_dir = store.stage_dir(run_id, "eval")
    stage_dir.mkdir(parents=True, exist_ok=True)
    usage_path = stage_dir / "usage.jsonl"
    usage_path.unlink(missing_ok=True)
    ledger = UsageLedger(usage_path)

    report = run_protocol(
        ctxs,
        protocol,
        backend=backend,
        checker=checker,
        seed=seed,
        repair_backend=repair_backend,
        caps=config.caps,
        ledger=ledger,
        parallelism=config.parallelism,
        timeout_ms=config.checker.get("timeout_ms"),
    )

    if report.results and all(
        result.generation_verdicts
        and all(v.status is Status.CHECKER_ERROR for v in result.generation_verdicts)
        for result in report.results
    ):
        first = report.results[0].generation_verdicts[0].error_log
        raise UnavailableError(
            "evaluation produced no real verdicts; every sample ended in a "
            f"backend or checker error ({first.splitlines()[0] if first else 'unknown'})"
        )

    harvested = harvest_repair_problems(report.results)
    harvested = cap_per_key(harvested, lambda p: p.incorrect_solution, 1)
    harvested = cap_per_key(
        harvested, lambda p: p.context_id, config.per_key.per_problem
    )
    harvested = cap_per_key(
        harvested, lambda p: p.type_declaration, config.per_key.per_declaration
    )

    _, report_digest = store.write_text(
        run_id, "eval", "report.json", dumps_row(_zero_durations(report.to_row())) + "\n"
    )
    _, harvested_digest = store.write_rows(
        run_id, "eval", "harvested.jsonl", (p.to_row() for p in harvested)
    )
    # usage.jsonl stays out of the digested outputs: its timestamps differ
    # on every run while the artifacts above must not.
    return _finish(
        store,
        config,
        run_id,
        "eval",
        seed,
        inputs={str(contexts_path.resolve()): sha256_file(contexts_path)},
        outputs={
            "eval/report.json": report_digest,
            "eval/harvested.jsonl": harvested_digest,
        },
        argv=argv,
        counts={
            "problems": report.n_problems,
            "requests": ledger.total_requests(),
            "harvested": len(harvested),
        },
    )


# --- reporting ----------------------------------------------------------


def render_report_text(label: str, report: EvalReport) -> str:
    lines = [render_table([(label, report.column_values())]), ""]
    lines.append(f"protocol: {report.protocol.kind.value}")
    lines.append(f"problems: {report.n_problems}")
    lines.append(f"generate@{report.protocol.k_generate}: {report.generate_at_k:.1f}")
    budget = report.protocol.repair_budget
    if budget:
        lines.append(f"repair@{budget}: {report.repair_at_k:.1f}")
        lines.append(f"generate+repair: {report.gen_plus_rep:.1f}")
    if report.generate_at_10 is not None and report.protocol.k_generate != 10:
        lines.append(f"generate@10: {report.generate_at_10:.1f}")
    if report.error_histogram:
        lines.append("")
        lines.append("error classes:")
        for entry, count in report.error_histogram:
            lines.append(f"  {entry}: {count}")
    return "\n".join(lines) + "\n"


def run_report(
    store: RunStore,
    config: PipelineConfig,
    run_id: str,
    seed: int,
    *,
    stage_input: str | None = None,
    argv: Sequence[str] = (),
) -> StageOutcome:
    """Render the evaluation report as an aligned text table."""
    ref = stage_input or "eval/report.json"
    input_digest = _input_digest(store, run_id, ref)
    path = store.artifact_path(run_id, ref)
    report = EvalReport.from_row(json.loads(path.read_text(encoding="utf-8")))

    text = render_report_text(run_id, report)
    _, text_digest = store.write_text(run_id, "report", "report.txt", text)
    return _finish(
        store,
        config,
        run_id,
        "report",
        seed,
        inputs={ref: input_digest},
        outputs={"report/report.txt": text_digest},
        argv=argv,
        counts={"problems": report.n_problems},
    )
