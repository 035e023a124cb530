"""Execution-based evaluation: sample, check, repair, score.

A protocol fixes the sampling budget. Generation samples k_generate
completions for each problem's declaration; a problem counts as solved at
the generation stage when any sample verifies. The repair stage runs only
on problems the generation stage left unsolved, and how it spends its
budget is protocol-specific: Gen5Rep5 picks one failed sample (uniform,
seeded) and asks for five fixes of it, Sample1On5 asks for one fix of each
distinct failed sample, FuncGenRepair1 asks for one fix of its single
failed sample, Gen10 never repairs.

Backend or checker trouble never aborts a run: the problem is recorded
with a CheckerError verdict and the fold moves on. Scores are percentages
of the problem set; gen_plus_rep is the exact sum of the generation and
repair scores, rounded only for display.
"""

from __future__ import annotations

import enum
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .checker import (
    CheckerBackend,
    Status,
    Taxonomy,
    Verdict,
    check,
    classify_error,
)
from .corpus import SeedContext
from .llm_client import (
    CompletionBackend,
    CompletionRequest,
    UsageLedger,
    complete,
)
from .records import RepairProblem
from .seeds import derive_seed
from .taskgen import (
    Candidate,
    PromptCaps,
    TaskKind,
    extract_code,
    make_func_repair_task,
    make_project_definition_task,
    make_project_repair_task,
)

FUNCTION_TEMPERATURE = 0.1
PROJECT_TEMPERATURE = 0.7
FUNCTION_MAX_TOKENS = 1024
PROJECT_MAX_TOKENS = 2048
NO_CODE_LOG = "no code block found in the model response"

GENERATE_STAGE = "eval-generate"
REPAIR_STAGE = "eval-repair"
CROSS_REPAIR_STAGE = "eval-cross-repair"

TABLE_COLUMNS = ("Generate@5", "Repair@5", "Gen+Rep (Total 10)", "Generate@10")

_VAL_START = re.compile(r"\s*val\b")


class ProtocolKind(str, enum.Enum):
    FUNC_GEN_REPAIR1 = "FuncGenRepair1"
    GEN5_REP5 = "Gen5Rep5"
    GEN10 = "Gen10"
    SAMPLE1_ON5 = "Sample1On5"
    CROSS_MODEL_REPAIR = "CrossModelRepair"


# (k_generate, k_repair); None leaves the field to the caller
_PROTOCOL_SHAPES: dict[ProtocolKind, tuple[int, int]] = {
    ProtocolKind.FUNC_GEN_REPAIR1: (1, 1),
    ProtocolKind.GEN5_REP5: (5, 5),
    ProtocolKind.GEN10: (10, 0),
    ProtocolKind.SAMPLE1_ON5: (5, 1),
    ProtocolKind.CROSS_MODEL_REPAIR: (0, 5),
}


@dataclass(frozen=True)
class EvalProtocol:
    """Sampling budget for one evaluation run.

    k_repair is the number of repair samples for the chosen candidate
    (Gen5Rep5), per distinct failed sample (Sample1On5, fixed at 1), or per
    repair problem (CrossModelRepair, where it may be overridden).
    Temperature and max_tokens default to the function-level settings for
    FuncGenRepair1 and the project-level settings otherwise.
    """

    kind: ProtocolKind
    k_generate: int | None = None
    k_repair: int | None = None
    temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        shape_gen, shape_rep = _PROTOCOL_SHAPES[self.kind]
        if self.k_generate is None:
            object.__setattr__(self, "k_generate", shape_gen)
        if self.k_repair is None:
            object.__setattr__(self, "k_repair", shape_rep)
        functional = self.kind is ProtocolKind.FUNC_GEN_REPAIR1
        if self.temperature is None:
            object.__setattr__(
                self,
                "temperature",
                FUNCTION_TEMPERATURE if functional else PROJECT_TEMPERATURE,
            )
        if self.max_tokens is None:
            object.__setattr__(
                self,
                "max_tokens",
                FUNCTION_MAX_TOKENS if functional else PROJECT_MAX_TOKENS,
            )
        if self.kind is ProtocolKind.CROSS_MODEL_REPAIR:
            if self.k_generate != 0:
                raise ValueError("CrossModelRepair never generates; k_generate must be 0")
            if self.k_repair < 1:
                raise ValueError(f"k_repair must be >= 1, got {self.k_repair}")
        elif (self.k_generate, self.k_repair) != (shape_gen, shape_rep):
            raise ValueError(
                f"{self.kind.value} fixes the budget at "
                f"k_generate={shape_gen}, k_repair={shape_rep}; "
                f"got ({self.k_generate}, {self.k_repair})"
            )

    def to_row(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "k_generate": self.k_generate,
            "k_repair": self.k_repair,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> EvalProtocol:
        return cls(
            kind=ProtocolKind(row["kind"]),
            k_generate=row.get("k_generate"),
            k_repair=row.get("k_repair"),
            temperature=row.get("temperature"),
            max_tokens=row.get("max_tokens"),
        )

    @property
    def repair_budget(self) -> int:
        """Most repair samples one problem can consume under this protocol."""
        if self.kind is ProtocolKind.SAMPLE1_ON5:
            return self.k_generate * self.k_repair
        return self.k_repair


class SolvedStage(str, enum.Enum):
    GEN = "Gen"
    REPAIR = "Repair"
    UNSOLVED = "Unsolved"


def _solved_stage(
    generation: Sequence[Verdict], repair: Sequence[Verdict]
) -> SolvedStage:
    if any(v.passed for v in generation):
        return SolvedStage.GEN
    if any(v.passed for v in repair):
        return SolvedStage.REPAIR
    return SolvedStage.UNSOLVED


@dataclass(frozen=True)
class ProblemResult:
    """Everything one problem produced, enough to rescore or harvest from.

    generation_texts/_codes run parallel to generation_verdicts (codes hold
    None where nothing extractable came back); likewise the repair triples.
    """

    problem_id: str
    generation_verdicts: tuple[Verdict, ...]
    repair_verdicts: tuple[Verdict, ...] = ()
    chosen_failed_index: int | None = None
    solved_stage: SolvedStage = SolvedStage.UNSOLVED
    generation_texts: tuple[str, ...] = ()
    generation_codes: tuple[str | None, ...] = ()
    repair_texts: tuple[str, ...] = ()
    repair_codes: tuple[str | None, ...] = ()
    declaration: str = ""
    ground_truth: str = ""

    def __post_init__(self) -> None:
        if not self.problem_id:
            raise ValueError("problem_id is empty")
        expected = _solved_stage(self.generation_verdicts, self.repair_verdicts)
        if self.solved_stage is not expected:
            raise ValueError(
                f"{self.problem_id}: solved_stage says {self.solved_stage.value} "
                f"but the verdicts say {expected.value}"
            )
        if self.chosen_failed_index is not None and not (
            0 <= self.chosen_failed_index < len(self.generation_verdicts)
        ):
            raise ValueError(
                f"{self.problem_id}: chosen_failed_index "
                f"{self.chosen_failed_index} out of range"
            )

    @property
    def generation_calls(self) -> int:
        return len(self.generation_verdicts)

    @property
    def repair_calls(self) -> int:
        return len(self.repair_verdicts)

    def to_row(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "solved_stage": self.solved_stage.value,
            "chosen_failed_index": self.chosen_failed_index,
            "generation_verdicts": [v.to_row() for v in self.generation_verdicts],
            "repair_verdicts": [v.to_row() for v in self.repair_verdicts],
            "generation_texts": list(self.generation_texts),
            "generation_codes": list(self.generation_codes),
            "repair_texts": list(self.repair_texts),
            "repair_codes": list(self.repair_codes),
            "declaration": self.declaration,
            "ground_truth": self.ground_truth,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> ProblemResult:
        return cls(
            problem_id=row["problem_id"],
            generation_verdicts=tuple(
                Verdict.from_row(v) for v in row["generation_verdicts"]
            ),
            repair_verdicts=tuple(
                Verdict.from_row(v) for v in row.get("repair_verdicts", ())
            ),
            chosen_failed_index=row.get("chosen_failed_index"),
            solved_stage=SolvedStage(row["solved_stage"]),
            generation_texts=tuple(row.get("generation_texts", ())),
            generation_codes=tuple(row.get("generation_codes", ())),
            repair_texts=tuple(row.get("repair_texts", ())),
            repair_codes=tuple(row.get("repair_codes", ())),
            declaration=row.get("declaration", ""),
            ground_truth=row.get("ground_truth", ""),
        )


# --- scoring ------------------------------------------------------------------


def generate_at_k(results: Sequence[ProblemResult], k: int) -> float:
    """Percentage of problems with a passing sample among the first k.

    Asking for more samples than a problem drew is a caller error, except
    for problems cut short by a CheckerError, which score as unsolved.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not results:
        return 0.0
    solved = 0
    for result in results:
        verdicts = result.generation_verdicts
        if len(verdicts) < k and not any(
            v.status is Status.CHECKER_ERROR for v in verdicts
        ):
            raise ValueError(
                f"{result.problem_id} has {len(verdicts)} generation samples; "
                f"cannot score at k={k}"
            )
        if any(v.passed for v in verdicts[:k]):
            solved += 1
    return 100.0 * solved / len(results)


def repair_at_k(results: Sequence[ProblemResult], k: int) -> float:
    """Additional percentage points solved by the first k repair samples.

    Repair budgets vary by protocol (Sample1On5 issues one repair per
    distinct failed sample), so a problem with fewer than k repair samples
    is scored on the samples it has rather than rejected.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not results:
        return 0.0
    solved = 0
    for result in results:
        if any(v.passed for v in result.generation_verdicts):
            continue
        if any(v.passed for v in result.repair_verdicts[:k]):
            solved += 1
    return 100.0 * solved / len(results)


def error_histogram(
    results: Sequence[ProblemResult], top_n: int | None = None
) -> tuple[tuple[str, int], ...]:
    """Error-class counts over every failing verdict, generation and repair.

    Ordered by descending count, ties by label. With top_n, the remainder
    collapses into a trailing ("other", total) row.
    """
    if top_n is not None and top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    counts: dict[str, int] = {}
    for result in results:
        for verdict in (*result.generation_verdicts, *result.repair_verdicts):
            if verdict.error_class is not None:
                label = verdict.error_class.label
                counts[label] = counts.get(label, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_n is None or len(ordered) <= top_n:
        return tuple(ordered)
    head, tail = ordered[:top_n], ordered[top_n:]
    return (*head, ("other", sum(count for _, count in tail)))


@dataclass(frozen=True)
class EvalReport:
    """Scored outcome of one protocol run over a problem set.

    gen_plus_rep is exactly generate_at_k + repair_at_k; rounding to one
    decimal happens only in the rendered table. generate_at_10 is present
    only when the run itself drew ten generation samples.
    """

    protocol: EvalProtocol
    seed: int
    results: tuple[ProblemResult, ...]
    generate_at_k: float
    repair_at_k: float
    gen_plus_rep: float
    generate_at_10: float | None
    error_histogram: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        if self.gen_plus_rep != self.generate_at_k + self.repair_at_k:
            raise ValueError(
                "gen_plus_rep must equal generate_at_k + repair_at_k exactly"
            )

    @property
    def n_problems(self) -> int:
        return len(self.results)

    def column_values(self) -> dict[str, float | None]:
        """This run's contribution to the four headline table columns."""
        values: dict[str, float | None] = dict.fromkeys(TABLE_COLUMNS)
        if self.protocol.k_generate == 5:
            values["Generate@5"] = self.generate_at_k
            if self.protocol.repair_budget > 0:
                values["Repair@5"] = self.repair_at_k
                values["Gen+Rep (Total 10)"] = self.gen_plus_rep
        values["Generate@10"] = self.generate_at_10
        return values

    def to_row(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol.to_row(),
            "seed": self.seed,
            "n_problems": self.n_problems,
            "generate_at_k": self.generate_at_k,
            "repair_at_k": self.repair_at_k,
            "gen_plus_rep": self.gen_plus_rep,
            "generate_at_10": self.generate_at_10,
            "error_histogram": [list(pair) for pair in self.error_histogram],
            "results": [r.to_row() for r in self.results],
        }

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> EvalReport:
        return cls(
            protocol=EvalProtocol.from_row(row["protocol"]),
            seed=row["seed"],
            results=tuple(ProblemResult.from_row(r) for r in row["results"]),
            generate_at_k=row["generate_at_k"],
            repair_at_k=row["repair_at_k"],
            gen_plus_rep=row["gen_plus_rep"],
            generate_at_10=row.get("generate_at_10"),
            error_histogram=tuple(
                (label, count) for label, count in row.get("error_histogram", ())
            ),
        )


def build_report(
    protocol: EvalProtocol,
    seed: int,
    results: Sequence[ProblemResult],
    *,
    histogram_top_n: int | None = None,
) -> EvalReport:
    ordered = tuple(sorted(results, key=lambda r: r.problem_id))
    gen = generate_at_k(ordered, protocol.k_generate) if ordered else 0.0
    rep = (
        repair_at_k(ordered, protocol.repair_budget)
        if ordered and protocol.repair_budget > 0
        else 0.0
    )
    gen10 = generate_at_k(ordered, 10) if protocol.k_generate >= 10 else None
    return EvalReport(
        protocol=protocol,
        seed=seed,
        results=ordered,
        generate_at_k=gen,
        repair_at_k=rep,
        gen_plus_rep=gen + rep,
        generate_at_10=gen10,
        error_histogram=error_histogram(ordered, histogram_top_n),
    )


def merge_column_values(*reports: EvalReport) -> dict[str, float | None]:
    """Fold several runs (say Gen5Rep5 plus Gen10) into one table row."""
    merged: dict[str, float | None] = dict.fromkeys(TABLE_COLUMNS)
    for report in reports:
        for column, value in report.column_values().items():
            if value is not None:
                merged[column] = value
    return merged


def render_table(rows: Sequence[tuple[str, Mapping[str, float | None]]]) -> str:
    """Aligned text table of headline scores, one decimal place, - for absent."""
    header = ["", *TABLE_COLUMNS]
    body = []
    for label, values in rows:
        cells = [label]
        for column in TABLE_COLUMNS:
            value = values.get(column)
            cells.append("-" if value is None else f"{value:.1f}")
        body.append(cells)
    widths = [
        max(len(line[i]) for line in (header, *body)) for i in range(len(header))
    ]
    lines = []
    for cells in (header, ["-" * w for w in widths], *body):
        padded = [cells[0].ljust(widths[0])] + [
            cell.rjust(width) for cell, width in zip(cells[1:], widths[1:])
        ]
        lines.append("  ".join(padded).rstrip())
    return "\n".join(lines)


# --- running a protocol -------------------------------------------------------


def _assemble_candidate(declaration: str, code: str) -> str:
    """Join the fixed declaration with the model's definition.

    A completion that already restates its val declaration is taken as-is,
    otherwise the problem's declaration is prepended.
    """
    if _VAL_START.match(code):
        return code
    return f"{declaration}\n{code}"


def _synthesized_fail(candidate_id: str, log: str, taxonomy: Taxonomy | None) -> Verdict:
    return Verdict(candidate_id, Status.FAIL, log, classify_error(log, taxonomy))


def _checker_error(candidate_id: str, exc: BaseException, taxonomy: Taxonomy | None) -> Verdict:
    log = f"CheckerError: {type(exc).__name__}: {exc}" if str(exc) else (
        f"CheckerError: {type(exc).__name__}"
    )
    return Verdict(candidate_id, Status.CHECKER_ERROR, log, classify_error(log, taxonomy))


@dataclass(frozen=True)
class _RunSettings:
    protocol: EvalProtocol
    backend: CompletionBackend
    repair_backend: CompletionBackend
    checker: CheckerBackend
    seed: int
    caps: PromptCaps | Mapping | None
    ledger: UsageLedger | None
    timeout_ms: int | None
    taxonomy: Taxonomy | None

    def model_name(self, backend: CompletionBackend) -> str:
        return getattr(backend, "model_name", None) or backend.name


def _sample(
    settings: _RunSettings,
    backend: CompletionBackend,
    prompt: str,
    *,
    n: int,
    stage: str,
    problem_id: str,
    salt: str,
) -> list[str]:
    request = CompletionRequest(
        model_name=settings.model_name(backend),
        messages=(("user", prompt),),
        temperature=settings.protocol.temperature,
        n_samples=n,
        max_tokens=settings.protocol.max_tokens,
        seed_hint=derive_seed(settings.seed, problem_id, salt),
    )
    completions = complete(
        backend, request, ledger=settings.ledger, stage=stage, problem_id=problem_id
    )
    return [c.text for c in completions]


def _check_samples(
    settings: _RunSettings,
    declaration: str,
    context: SeedContext | None,
    codes: Sequence[str | None],
    id_prefix: str,
) -> tuple[Verdict, ...]:
    verdicts = []
    for index, code in enumerate(codes):
        candidate_id = f"{id_prefix}/{index}"
        if code is None:
            verdicts.append(
                _synthesized_fail(candidate_id, NO_CODE_LOG, settings.taxonomy)
            )
            continue
        verdicts.append(
            check(
                _assemble_candidate(declaration, code),
                context,
                settings.checker,
                settings.timeout_ms,
                candidate_id=candidate_id,
                taxonomy=settings.taxonomy,
            )
        )
    return tuple(verdicts)


def _repair_target(text: str, code: str | None) -> str:
    """What the repair prompt shows as the student solution."""
    return code if code is not None else text


def _gen5rep5_repair(
    settings: _RunSettings,
    ctx: SeedContext,
    texts: Sequence[str],
    codes: Sequence[str | None],
    verdicts: Sequence[Verdict],
) -> tuple[int, tuple[str, ...], tuple[str | None, ...], tuple[Verdict, ...]]:
    failed = [i for i, v in enumerate(verdicts) if not v.passed]
    rng = random.Random(derive_seed(settings.seed, ctx.id, "choose-failed"))
    chosen = failed[rng.randrange(len(failed))]
    problem = RepairProblem(
        type_declaration=ctx.type_declaration,
        incorrect_solution=_repair_target(texts[chosen], codes[chosen]),
        error_message=verdicts[chosen].error_log,
        correct_solution=ctx.ground_truth_definition,
        source="model",
        context_id=ctx.id,
    )
    task = make_project_repair_task(problem, caps=settings.caps, context=ctx)
    repair_texts = _sample(
        settings,
        settings.repair_backend,
        task.prompt,
        n=settings.protocol.k_repair,
        stage=REPAIR_STAGE,
        problem_id=ctx.id,
        salt="repair",
    )
    repair_codes = tuple(
        extract_code(t, TaskKind.PROJECT_REPAIR) for t in repair_texts
    )
    repair_verdicts = _check_samples(
        settings,
        ctx.type_declaration,
        ctx,
        repair_codes,
        f"{ctx.id}/rep/{chosen}",
    )
    return chosen, tuple(repair_texts), repair_codes, repair_verdicts


def _sample1on5_repair(
    settings: _RunSettings,
    ctx: SeedContext,
    texts: Sequence[str],
    codes: Sequence[str | None],
    verdicts: Sequence[Verdict],
) -> tuple[tuple[str, ...], tuple[str | None, ...], tuple[Verdict, ...]]:
    seen: set[str] = set()
    repair_texts: list[str] = []
    repair_codes: list[str | None] = []
    repair_verdicts: list[Verdict] = []
    for index, verdict in enumerate(verdicts):
        if verdict.passed:
            continue
        target = _repair_target(texts[index], codes[index])
        if target in seen:
            continue
        seen.add(target)
        problem = RepairProblem(
            type_declaration=ctx.type_declaration,
            incorrect_solution=target,
            error_message=verdict.error_log,
            correct_solution=ctx.ground_truth_definition,
            source="model",
            context_id=ctx.id,
        )
        task = make_project_repair_task(problem, caps=settings.caps, context=ctx)
        text = _sample(
            settings,
            settings.repair_backend,
            task.prompt,
            n=1,
            stage=REPAIR_STAGE,
            problem_id=ctx.id,
            salt=f"repair/{index}",
        )[0]
        code = extract_code(text, TaskKind.PROJECT_REPAIR)
        repair_texts.append(text)
        repair_codes.append(code)
        repair_verdicts.extend(
            _check_samples(
                settings,
                ctx.type_declaration,
                ctx,
                [code],
                f"{ctx.id}/rep/{index}",
            )
        )
    return tuple(repair_texts), tuple(repair_codes), tuple(repair_verdicts)


def _func_repair(
    settings: _RunSettings,
    ctx: SeedContext,
    task_id: str,
    texts: Sequence[str],
    codes: Sequence[str | None],
    verdicts: Sequence[Verdict],
) -> tuple[int | None, tuple[str, ...], tuple[str | None, ...], tuple[Verdict, ...]]:
    verdict = verdicts[0]
    if verdict.status is not Status.FAIL:
        # timeouts and checker errors leave nothing a repair prompt can quote
        return None, (), (), ()
    candidate = Candidate(
        task_id=task_id,
        sample_index=0,
        raw_text=texts[0],
        extracted_code=_repair_target(texts[0], codes[0]),
    )
    task = make_func_repair_task(candidate, verdict)
    repair_texts = _sample(
        settings,
        settings.repair_backend,
        task.prompt,
        n=settings.protocol.k_repair,
        stage=REPAIR_STAGE,
        problem_id=ctx.id,
        salt="repair",
    )
    repair_codes = tuple(extract_code(t, TaskKind.FUNC_REPAIR) for t in repair_texts)
    repair_verdicts = _check_samples(
        settings, ctx.type_declaration, ctx, repair_codes, f"{ctx.id}/rep/0"
    )
    return 0, tuple(repair_texts), repair_codes, repair_verdicts


def _evaluate_problem(settings: _RunSettings, ctx: SeedContext) -> ProblemResult:
    try:
        task = make_project_definition_task(ctx, caps=settings.caps)
        texts = tuple(
            _sample(
                settings,
                settings.backend,
                task.prompt,
                n=settings.protocol.k_generate,
                stage=GENERATE_STAGE,
                problem_id=ctx.id,
                salt="generate",
            )
        )
        codes = tuple(extract_code(t, TaskKind.PROJECT_DEFINITION) for t in texts)
        gen_verdicts = _check_samples(
            settings, ctx.type_declaration, ctx, codes, f"{ctx.id}/gen"
        )
    except Exception as exc:
        verdict = _checker_error(f"{ctx.id}/gen/error", exc, settings.taxonomy)
        return ProblemResult(
            problem_id=ctx.id,
            generation_verdicts=(verdict,),
            solved_stage=SolvedStage.UNSOLVED,
            declaration=ctx.type_declaration,
            ground_truth=ctx.ground_truth_definition,
        )

    chosen: int | None = None
    repair_texts: tuple[str, ...] = ()
    repair_codes: tuple[str | None, ...] = ()
    repair_verdicts: tuple[Verdict, ...] = ()
    solved_gen = any(v.passed for v in gen_verdicts)
    kind = settings.protocol.kind
    if not solved_gen and kind is not ProtocolKind.GEN10:
        try:
            if kind is ProtocolKind.GEN5_REP5:
                chosen, repair_texts, repair_codes, repair_verdicts = _gen5rep5_repair(
                    settings, ctx, texts, codes, gen_verdicts
                )
            elif kind is ProtocolKind.SAMPLE1_ON5:
                repair_texts, repair_codes, repair_verdicts = _sample1on5_repair(
                    settings, ctx, texts, codes, gen_verdicts
                )
            elif kind is ProtocolKind.FUNC_GEN_REPAIR1:
                chosen, repair_texts, repair_codes, repair_verdicts = _func_repair(
                    settings, ctx, task.id, texts, codes, gen_verdicts
                )
        except Exception as exc:
            repair_verdicts = (
                *repair_verdicts,
                _checker_error(f"{ctx.id}/rep/error", exc, settings.taxonomy),
            )
            repair_texts = ()
            repair_codes = ()

    return ProblemResult(
        problem_id=ctx.id,
        generation_verdicts=gen_verdicts,
        repair_verdicts=repair_verdicts,
        chosen_failed_index=chosen,
        solved_stage=_solved_stage(gen_verdicts, repair_verdicts),
        generation_texts=texts,
        generation_codes=codes,
        repair_texts=repair_texts,
        repair_codes=repair_codes,
        declaration=ctx.type_declaration,
        ground_truth=ctx.ground_truth_definition,
    )


def run_protocol(
    problems: Sequence[SeedContext],
    protocol: EvalProtocol,
    *,
    backend: CompletionBackend,
    checker: CheckerBackend,
    seed: int = 0,
    repair_backend: CompletionBackend | None = None,
    caps: PromptCaps | Mapping | None = None,
    ledger: UsageLedger | None = None,
    parallelism: int = 4,
    timeout_ms: int | None = None,
    taxonomy: Taxonomy | None = None,
    histogram_top_n: int | None = None,
) -> EvalReport:
    """Evaluate every problem under the protocol and score the outcome.

    Problems run in parallel but the report is a deterministic fold over
    problem ids in sorted order, and every random choice is keyed by (seed,
    problem id), so reruns reproduce the report bit for bit. A failing
    backend or checker marks its problem with a CheckerError verdict and
    the run continues.
    """
    if protocol.kind is ProtocolKind.CROSS_MODEL_REPAIR:
        raise ValueError("use cross_model_repair() for CrossModelRepair protocols")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    ids = [ctx.id for ctx in problems]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate problem ids: {dupes}")
    ordered = sorted(problems, key=lambda ctx: ctx.id)
    settings = _RunSettings(
        protocol=protocol,
        backend=backend,
        repair_backend=repair_backend if repair_backend is not None else backend,
        checker=checker,
        seed=seed,
        caps=caps,
        ledger=ledger,
        timeout_ms=timeout_ms,
        taxonomy=taxonomy,
    )
    if not ordered:
        results: list[ProblemResult] = []
    elif parallelism == 1 or len(ordered) == 1:
        results = [_evaluate_problem(settings, ctx) for ctx in ordered]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(
                pool.map(lambda ctx: _evaluate_problem(settings, ctx), ordered)
            )
    return build_report(protocol, seed, results, histogram_top_n=histogram_top_n)


# --- harvesting and cross-model repair ----------------------------------------


def harvest_repair_problems(results: Sequence[ProblemResult]) -> list[RepairProblem]:
    """Turn every failed generation sample into a repair problem.

    The correct solution is a passing sibling sample when one exists, the
    problem's ground truth otherwise. When neither exists the problem is
    still emitted with an empty correct_solution; training formatters
    refuse those, which is the exclusion mechanism.
    """
    out: list[RepairProblem] = []
    for result in results:
        passing = next(
            (
                code
                for verdict, code in zip(
                    result.generation_verdicts, result.generation_codes
                )
                if verdict.passed and code
            ),
            None,
        )
        correct = passing if passing is not None else result.ground_truth.strip()
        rows = zip(
            result.generation_verdicts,
            result.generation_texts,
            result.generation_codes,
        )
        for verdict, text, code in rows:
            if verdict.passed:
                continue
            incorrect = _repair_target(text, code)
            if not incorrect.strip():
                continue
            out.append(
                RepairProblem(
                    type_declaration=result.declaration,
                    incorrect_solution=incorrect,
                    error_message=verdict.error_log,
                    correct_solution=correct,
                    source="model",
                    context_id=result.problem_id,
                )
            )
    return out


def cross_model_repair(
    failures: Mapping[str, Sequence[RepairProblem]],
    repair_backend: CompletionBackend,
    checker: CheckerBackend,
    *,
    protocol: EvalProtocol | None = None,
    seed: int = 0,
    contexts: Mapping[str, SeedContext] | None = None,
    caps: PromptCaps | Mapping | None = None,
    ledger: UsageLedger | None = None,
    parallelism: int = 4,
    timeout_ms: int | None = None,
    taxonomy: Taxonomy | None = None,
) -> dict[str, dict[str, Any]]:
    """Repair failures harvested from other models, scored per source model.

    failures maps a source-model name to its harvested repair problems.
    Each problem gets k_repair samples from repair_backend; it counts as
    repaired when any sample verifies. Returns, per source model, the
    problem count, repaired count, and repaired percentage.
    """
    if protocol is None:
        protocol = EvalProtocol(ProtocolKind.CROSS_MODEL_REPAIR)
    if protocol.kind is not ProtocolKind.CROSS_MODEL_REPAIR:
        raise ValueError(f"expected a CrossModelRepair protocol, got {protocol.kind.value}")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    settings = _RunSettings(
        protocol=protocol,
        backend=repair_backend,
        repair_backend=repair_backend,
        checker=checker,
        seed=seed,
        caps=caps,
        ledger=ledger,
        timeout_ms=timeout_ms,
        taxonomy=taxonomy,
    )

    def attempt(source: str, index: int, problem: RepairProblem) -> bool:
        problem_id = f"{source}/{index}"
        try:
            context = None
            if contexts is not None and problem.context_id is not None:
                context = contexts.get(problem.context_id)
            task = make_project_repair_task(problem, caps=caps, context=context)
            texts = _sample(
                settings,
                repair_backend,
                task.prompt,
                n=protocol.k_repair,
                stage=CROSS_REPAIR_STAGE,
                problem_id=problem_id,
                salt="repair",
            )
            codes = [extract_code(t, TaskKind.PROJECT_REPAIR) for t in texts]
            verdicts = _check_samples(
                settings,
                problem.type_declaration,
                context,
                codes,
                f"{problem_id}/rep",
            )
        except Exception:
            return False
        return any(v.passed for v in verdicts)

    report: dict[str, dict[str, Any]] = {}
    for source in sorted(failures):
        problems = list(failures[source])
        if not problems:
            report[source] = {"problems": 0, "repaired": 0, "repaired_pct": 0.0}
            continue
        jobs = [(source, i, p) for i, p in enumerate(problems)]
        if parallelism == 1 or len(jobs) == 1:
            outcomes = [attempt(*job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                outcomes = list(pool.map(lambda job: attempt(*job), jobs))
        repaired = sum(outcomes)
        report[source] = {
            "problems": len(problems),
            "repaired": repaired,
            "repaired_pct": 100.0 * repaired / len(problems),
        }
    return report
