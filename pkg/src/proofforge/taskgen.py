"""Prompt curation for the five task kinds, plus completion post-processing.

Every emitted Task fits its token budget under the tokenizer it names.
When a prompt runs over budget the variable material gives way first and
the fixed material never does: snippets and error logs are trimmed, then
related examples are dropped from the end, then premises; the declaration
and the instruction block are never cut. Over-budget situations that no
amount of trimming can fix raise (or skip, for bulk sources like
snippets) instead of emitting a broken prompt.
"""

from __future__ import annotations

import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .checker import Status, Verdict
from .corpus import SeedContext, Snippet
from .jsonl import sha256_text
from .records import RepairProblem, TrainingExample
from .tokens import DEFAULT_TOKENIZER, Tokenizer, get_tokenizer

DEFAULT_BUDGET = 4096
MAX_PREMISES = 15
MAX_EXAMPLES = 10
MAX_REPAIR_EXAMPLES = 3
END_TOKEN = "END"
ELISION_MARKER = "[... log elided ...]"
PREMISES_HEADER = "## Possibly useful premises:"


class TaskKind(str, Enum):
    NL2CODE = "NL2Code"
    PROOF_COMPLETION = "ProofCompletion"
    FUNC_REPAIR = "FuncRepair"
    PROJECT_DEFINITION = "ProjectDefinition"
    PROJECT_REPAIR = "ProjectRepair"


class TaskSkipped(Exception):
    """A source item that cannot become a task; carries the reason."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# --- templates --------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{\{([a-z_]+)\}\}")

_TEMPLATE_FILES = {
    TaskKind.NL2CODE: "nl2code.txt",
    TaskKind.PROOF_COMPLETION: "completion.txt",
    TaskKind.FUNC_REPAIR: "func_repair.txt",
    TaskKind.PROJECT_DEFINITION: "project_definition.txt",
    TaskKind.PROJECT_REPAIR: "project_repair.txt",
}
NEW_DEFINITION_TEMPLATE = "new_definition.txt"


def load_template(name: str) -> str:
    return (resources.files("proofforge") / "templates" / name).read_text(
        encoding="utf-8"
    )


def render_template(template: str, values: Mapping[str, str]) -> str:
    def substitute(match: re.Match) -> str:
        key = match.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {{{{{key}}}}} has no value")
        return values[key]

    return _PLACEHOLDER.sub(substitute, template)


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class Task:
    id: str
    kind: TaskKind
    prompt: str
    origin: str
    budget: int
    tokenizer: str = DEFAULT_TOKENIZER.name
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError(f"budget must be positive, got {self.budget}")
        used = get_tokenizer(self.tokenizer).count(self.prompt)
        if used > self.budget:
            raise ValueError(
                f"prompt uses {used} tokens, over the {self.budget} budget"
            )

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "prompt": self.prompt,
            "origin": self.origin,
            "budget": self.budget,
            "tokenizer": self.tokenizer,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_row(cls, row: Mapping) -> "Task":
        return cls(
            id=row["id"],
            kind=TaskKind(row["kind"]),
            prompt=row["prompt"],
            origin=row["origin"],
            budget=int(row["budget"]),
            tokenizer=row.get("tokenizer", DEFAULT_TOKENIZER.name),
            metadata=dict(row.get("metadata", {})),
        )


@dataclass(frozen=True)
class Candidate:
    task_id: str
    sample_index: int
    raw_text: str
    extracted_code: str | None = None
    backend_profile: str = ""
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.sample_index < 0:
            raise ValueError(f"sample index must be >= 0, got {self.sample_index}")

    @property
    def id(self) -> str:
        return f"{self.task_id}/{self.sample_index}"

    def to_row(self) -> dict:
        return {
            "task_id": self.task_id,
            "sample_index": self.sample_index,
            "raw_text": self.raw_text,
            "extracted_code": self.extracted_code,
            "backend_profile": self.backend_profile,
            "temperature": self.temperature,
        }

    @classmethod
    def from_row(cls, row: Mapping) -> "Candidate":
        return cls(
            task_id=row["task_id"],
            sample_index=int(row["sample_index"]),
            raw_text=row["raw_text"],
            extracted_code=row.get("extracted_code"),
            backend_profile=row.get("backend_profile", ""),
            temperature=float(row.get("temperature", 0.7)),
        )


def make_candidate(
    task: Task,
    sample_index: int,
    raw_text: str,
    *,
    backend_profile: str = "",
    temperature: float = 0.7,
) -> Candidate:
    return Candidate(
        task_id=task.id,
        sample_index=sample_index,
        raw_text=raw_text,
        extracted_code=extract_code(raw_text, task.kind),
        backend_profile=backend_profile,
        temperature=temperature,
    )


@dataclass(frozen=True)
class PromptCaps:
    premises: int = MAX_PREMISES
    examples: int = MAX_EXAMPLES
    repair_examples: int = MAX_REPAIR_EXAMPLES
    budget: int = DEFAULT_BUDGET

    def __post_init__(self) -> None:
        if min(self.premises, self.examples, self.repair_examples) < 0:
            raise ValueError("caps must be >= 0")
        if self.budget < 1:
            raise ValueError(f"budget must be positive, got {self.budget}")


def _resolve_caps(caps: PromptCaps | Mapping | None) -> PromptCaps:
    if caps is None:
        return PromptCaps()
    if isinstance(caps, PromptCaps):
        return caps
    return PromptCaps(**caps)


# --- token-budget helpers ---------------------------------------------------


def _prefix_tokens(text: str, tok: Tokenizer, allowance: int) -> str:
    """Longest prefix of text that stays within the token allowance."""
    if allowance <= 0:
        return ""
    if tok.count(text) <= allowance:
        return text
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if tok.count(text[:mid]) <= allowance:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


def _suffix_tokens(text: str, tok: Tokenizer, allowance: int) -> str:
    if allowance <= 0:
        return ""
    if tok.count(text) <= allowance:
        return text
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if tok.count(text[len(text) - mid :]) <= allowance:
            lo = mid
        else:
            hi = mid - 1
    return text[len(text) - lo :]


def elide_log_middle(log: str, tok: Tokenizer, allowance: int) -> str:
    """Fit a log into the allowance by cutting its middle, head and tail kept."""
    if tok.count(log) <= allowance:
        return log
    marker_cost = tok.count(ELISION_MARKER)
    lines = log.splitlines()
    if len(lines) >= 4:
        n = len(lines)

        def with_kept(keep: int) -> str:
            head = (keep + 1) // 2
            tail = keep - head
            parts = lines[:head] + [ELISION_MARKER]
            if tail:
                parts += lines[n - tail :]
            return "\n".join(parts)

        # token count grows with kept lines, so binary search the largest fit
        lo, hi, best = 2, n - 1, None
        while lo <= hi:
            mid = (lo + hi) // 2
            if tok.count(with_kept(mid)) <= allowance:
                best = mid
                lo = mid + 1
            else:
                hi = mid - 1
        if best is not None:
            return with_kept(best)
    half = (allowance - marker_cost) // 2
    if half > 0:
        head = _prefix_tokens(log, tok, half)
        tail = _suffix_tokens(log, tok, allowance - marker_cost - tok.count(head))
        text = f"{head}\n{ELISION_MARKER}\n{tail}"
        if tok.count(text) <= allowance:
            return text
    return _prefix_tokens(log, tok, allowance)


# --- task constructors ------------------------------------------------------


def _task_id(kind: TaskKind, origin: str, prompt: str) -> str:
    return sha256_text("\x1f".join((kind.value, origin, prompt)))[:16]


def _build_task(
    kind: TaskKind,
    prompt: str,
    *,
    origin: str,
    budget: int,
    tok: Tokenizer,
    metadata: Mapping[str, object],
) -> Task:
    return Task(
        id=_task_id(kind, origin, prompt),
        kind=kind,
        prompt=prompt,
        origin=origin,
        budget=budget,
        tokenizer=tok.name,
        metadata=metadata,
    )


def _snippet_task(
    kind: TaskKind,
    text: str,
    origin: str,
    template: str,
    *,
    budget: int,
    tok: Tokenizer,
    metadata: dict,
) -> Task:
    fixed = tok.count(render_template(template, {"snippet": ""}))
    allowance = budget - fixed
    if allowance <= 0:
        raise TaskSkipped(
            f"{origin}: instructions alone use {fixed} of {budget} tokens, "
            "no room for the snippet"
        )
    body = text
    truncated = False
    while True:
        if tok.count(body) > allowance:
            body = _prefix_tokens(body, tok, allowance)
            truncated = True
        if not body.strip():
            raise TaskSkipped(f"{origin}: snippet cannot fit the {budget}-token budget")
        prompt = render_template(template, {"snippet": body})
        over = tok.count(prompt) - budget
        if over <= 0:
            break
        # substitution can merge tokens at the seams; tighten and retry
        allowance -= over
        body = text
    metadata["truncated"] = truncated
    return _build_task(
        kind, prompt, origin=origin, budget=budget, tok=tok, metadata=metadata
    )


def make_nl2code_task(
    snippet: Snippet,
    template: str | None = None,
    *,
    budget: int = DEFAULT_BUDGET,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Ask a model to invent an instruction/response pair from a snippet."""
    if not snippet.self_contained:
        raise TaskSkipped(f"snippet {snippet.id} is not self-contained")
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(
        _TEMPLATE_FILES[TaskKind.NL2CODE]
    )
    return _snippet_task(
        TaskKind.NL2CODE,
        snippet.text,
        snippet.id,
        tpl,
        budget=budget,
        tok=tok,
        metadata={"snippet_id": snippet.id, "source_path": snippet.source_path},
    )


def make_completion_task(
    verified: TrainingExample,
    template: str | None = None,
    *,
    verdict: Verdict | None = None,
    budget: int = DEFAULT_BUDGET,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Ask for a related property or helper, grown from a verified response.

    The caller vouches that the example passed checking; pass the verdict
    to have that enforced.
    """
    if verdict is not None and not verdict.passed:
        raise ValueError(
            f"completion tasks require a passing verdict, got {verdict.status.value}"
        )
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(
        _TEMPLATE_FILES[TaskKind.PROOF_COMPLETION]
    )
    origin = str(verified.provenance.get("origin", "")) or sha256_text(
        verified.response
    )[:16]
    return _snippet_task(
        TaskKind.PROOF_COMPLETION,
        verified.response,
        origin,
        tpl,
        budget=budget,
        tok=tok,
        metadata={"provenance": origin},
    )


def make_func_repair_task(
    candidate: Candidate,
    verdict: Verdict,
    template: str | None = None,
    *,
    budget: int = DEFAULT_BUDGET,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Pair failing code with its checker log and ask for a fix."""
    if verdict.status is not Status.FAIL:
        raise ValueError(
            f"repair tasks need a failing verdict, got {verdict.status.value}"
        )
    if candidate.extracted_code is None:
        raise ValueError(f"candidate {candidate.id} has no extracted code")
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(
        _TEMPLATE_FILES[TaskKind.FUNC_REPAIR]
    )
    code = candidate.extracted_code
    fixed = tok.count(render_template(tpl, {"code": code, "error_log": ""}))
    if fixed >= budget:
        raise ValueError(
            f"code and instructions alone use {fixed} of {budget} tokens; "
            "the code is never truncated"
        )
    log = verdict.error_log
    elided = False
    allowance = budget - fixed
    while True:
        if tok.count(log) > allowance:
            log = elide_log_middle(verdict.error_log, tok, allowance)
            elided = True
        prompt = render_template(tpl, {"code": code, "error_log": log})
        over = tok.count(prompt) - budget
        if over <= 0:
            break
        # substitution can merge tokens at the seams; tighten and retry
        allowance -= over
        if allowance <= 0:
            raise ValueError(f"no room for the error log in the {budget}-token budget")
    metadata: dict = {"candidate_id": candidate.id, "log_elided": elided}
    if verdict.error_class is not None:
        metadata["error_class"] = verdict.error_class.label
    return _build_task(
        TaskKind.FUNC_REPAIR,
        prompt,
        origin=candidate.id,
        budget=budget,
        tok=tok,
        metadata=metadata,
    )


def _definition_name(type_declaration: str) -> str:
    match = re.search(r"\bval\s+([A-Za-z_][A-Za-z0-9_.']*)", type_declaration)
    return match.group(1) if match else "definition"


def _premise_block(premises: Sequence[str]) -> str:
    return "\n".join("\t" + p for p in premises)


def _opens_block(modules: Sequence[str]) -> str:
    return "\n".join("\topen " + m for m in modules)


def _examples_block(examples: Sequence[tuple[str, str]], *, fenced: bool) -> str:
    blocks = []
    for declaration, definition in examples:
        block = f"{declaration}\n{definition}"
        blocks.append(f"```\n{block}\n```" if fenced else block)
    return "\n\n".join(blocks)


def _fit_project_prompt(
    template: str,
    static_values: Mapping[str, str],
    premises: Sequence[str],
    examples: Sequence[tuple[str, str]],
    *,
    fenced_examples: bool,
    budget: int,
    tok: Tokenizer,
) -> tuple[str, int, int, int, int]:
    """Render, dropping examples then premises from the end until it fits."""
    kept_premises = list(premises)
    kept_examples = list(examples)
    dropped_examples = dropped_premises = 0
    while True:
        prompt = render_template(
            template,
            {
                **static_values,
                "premises": _premise_block(kept_premises),
                "examples": _examples_block(kept_examples, fenced=fenced_examples),
            },
        )
        if tok.count(prompt) <= budget:
            return (
                prompt,
                len(kept_premises),
                len(kept_examples),
                dropped_premises,
                dropped_examples,
            )
        if kept_examples:
            kept_examples.pop()
            dropped_examples += 1
        elif kept_premises:
            kept_premises.pop()
            dropped_premises += 1
        else:
            raise ValueError(
                f"declaration and instructions alone exceed the {budget}-token budget"
            )


def make_project_definition_task(
    ctx: SeedContext,
    template: str | None = None,
    caps: PromptCaps | Mapping | None = None,
    *,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Definition-generation prompt for one seed context."""
    caps = _resolve_caps(caps)
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(
        _TEMPLATE_FILES[TaskKind.PROJECT_DEFINITION]
    )
    name = _definition_name(ctx.type_declaration)
    prompt, n_premises, n_examples, dropped_p, dropped_e = _fit_project_prompt(
        tpl,
        {
            "type_declaration": ctx.type_declaration,
            "definition_name": name,
            "opened_modules": _opens_block(ctx.opened_modules),
        },
        ctx.selected_premises[: caps.premises],
        ctx.examples[: caps.examples],
        fenced_examples=False,
        budget=caps.budget,
        tok=tok,
    )
    return _build_task(
        TaskKind.PROJECT_DEFINITION,
        prompt,
        origin=ctx.id,
        budget=caps.budget,
        tok=tok,
        metadata={
            "context_id": ctx.id,
            "definition_name": name,
            "premises_used": n_premises,
            "examples_used": n_examples,
            "dropped_premises": dropped_p,
            "dropped_examples": dropped_e,
        },
    )


def make_new_problem_task(
    ctx: SeedContext,
    template: str | None = None,
    caps: PromptCaps | Mapping | None = None,
    *,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Prompt asking for a brand-new declaration/definition pair."""
    caps = _resolve_caps(caps)
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(NEW_DEFINITION_TEMPLATE)
    prompt, n_premises, n_examples, dropped_p, dropped_e = _fit_project_prompt(
        tpl,
        {"opened_modules": _opens_block(ctx.opened_modules)},
        ctx.selected_premises[: caps.premises],
        ctx.examples[: caps.examples],
        fenced_examples=True,
        budget=caps.budget,
        tok=tok,
    )
    return _build_task(
        TaskKind.PROJECT_DEFINITION,
        prompt,
        origin=ctx.id,
        budget=caps.budget,
        tok=tok,
        metadata={
            "context_id": ctx.id,
            "flavor": "new_problem",
            "premises_used": n_premises,
            "examples_used": n_examples,
            "dropped_premises": dropped_p,
            "dropped_examples": dropped_e,
        },
    )


def make_project_repair_task(
    problem: RepairProblem,
    template: str | None = None,
    caps: PromptCaps | Mapping | None = None,
    *,
    context: SeedContext | None = None,
    tokenizer: Tokenizer | None = None,
) -> Task:
    """Repair prompt: declaration, student code, checker output. No premises."""
    if not problem.incorrect_solution.strip():
        raise ValueError("repair problem has no incorrect solution")
    if not problem.error_message.strip():
        raise ValueError("repair problem has no error message")
    caps = _resolve_caps(caps)
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    tpl = template if template is not None else load_template(
        _TEMPLATE_FILES[TaskKind.PROJECT_REPAIR]
    )
    name = _definition_name(problem.type_declaration)
    opened = _opens_block(context.opened_modules if context is not None else ())
    examples = list(
        (context.examples if context is not None else ())[: caps.repair_examples]
    )

    base = {
        "type_declaration": problem.type_declaration,
        "definition_name": name,
        "opened_modules": opened,
        "incorrect_solution": problem.incorrect_solution,
    }
    log = problem.error_message
    dropped_examples = 0
    elided = False
    allowance: int | None = None
    while True:
        prompt = render_template(
            tpl,
            {
                **base,
                "examples": _examples_block(examples, fenced=False),
                "error_message": log,
            },
        )
        over = tok.count(prompt) - caps.budget
        if over <= 0:
            break
        if examples:
            examples.pop()
            dropped_examples += 1
            continue
        if allowance is None:
            fixed = tok.count(
                render_template(tpl, {**base, "examples": "", "error_message": ""})
            )
            allowance = caps.budget - fixed
        else:
            # substitution can merge tokens at the seams; tighten and retry
            allowance -= over
        if allowance <= 0:
            raise ValueError(
                "declaration, instructions, and student code alone exceed "
                f"the {caps.budget}-token budget"
            )
        log = elide_log_middle(problem.error_message, tok, allowance)
        elided = True
    origin = sha256_text(
        "\x1f".join(
            (problem.type_declaration, problem.incorrect_solution, problem.error_message)
        )
    )[:16]
    return _build_task(
        TaskKind.PROJECT_REPAIR,
        prompt,
        origin=origin,
        budget=caps.budget,
        tok=tok,
        metadata={
            "context_id": problem.context_id,
            "source": problem.source,
            "definition_name": name,
            "examples_used": len(examples),
            "dropped_examples": dropped_examples,
            "log_elided": elided,
        },
    )


# --- completion post-processing ----------------------------------------------

_FENCE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\n(.*?)(?:\n)?```", re.DOTALL)
_OPENER = re.compile(r"\b(val|let)\b")
_END_WORD = re.compile(r"\bEND\b")
_TRAILING_END = re.compile(r"\s*\bEND\b[.\s]*$")
_CODE_STARTERS = ("val", "let", "type", "open", "module", "and", "#push-options")


def _strip_trailing_end(code: str) -> str:
    return _TRAILING_END.sub("", code)


def _looks_like_code(text: str) -> bool:
    for line in text.splitlines():
        if line.strip():
            first = line.split(None, 1)[0]
            return first in _CODE_STARTERS
    return False


def extract_code(raw_text: str, kind: TaskKind | None = None) -> str | None:
    """Pull code out of a model answer; None when nothing plausible.

    Tried in order: first fenced block, then the first val/let opener up
    to an END marker, then the whole text when it already reads as code.
    A trailing END is always stripped.
    """
    match = _FENCE.search(raw_text)
    if match:
        code = _strip_trailing_end(match.group(1))
        return code if code.strip() else None
    match = _OPENER.search(raw_text)
    if match:
        rest = raw_text[match.start() :]
        end = _END_WORD.search(rest)
        if end:
            code = rest[: end.start()].strip()
            return code if code else None
    if _looks_like_code(raw_text):
        code = _strip_trailing_end(raw_text).strip()
        return code if code else None
    return None


@dataclass(frozen=True)
class NewPair:
    """A harvested (type declaration, definition) pair awaiting validation."""

    type_declaration: str
    definition: str
    context_id: str | None
    candidate_id: str

    def to_row(self) -> dict:
        return {
            "type_declaration": self.type_declaration,
            "definition": self.definition,
            "context_id": self.context_id,
            "candidate_id": self.candidate_id,
        }


def harvest_new_pairs(
    candidates: Iterable[Candidate],
    *,
    context_ids: Mapping[str, str] | None = None,
) -> tuple[list[NewPair], Counter]:
    """Split new-problem completions at the val/let boundary.

    Returns the pairs plus a tally of discard reasons. context_ids maps
    task id to seed-context id so each pair can be validated in its
    original context later.
    """
    pairs: list[NewPair] = []
    reasons: Counter = Counter()
    for candidate in candidates:
        text = candidate.raw_text
        fence = _FENCE.search(text)
        if fence:
            text = fence.group(1)
        text = _END_WORD.sub(" ", text)
        val = re.search(r"\bval\b", text)
        if not val:
            reasons["missing val"] += 1
            continue
        let = re.search(r"\blet\b", text[val.end() :])
        if not let:
            reasons["missing let"] += 1
            continue
        boundary = val.end() + let.start()
        declaration = text[val.start() : boundary].strip()
        definition = text[boundary:].strip()
        if not declaration or not definition:
            reasons["empty part"] += 1
            continue
        pairs.append(
            NewPair(
                type_declaration=declaration,
                definition=definition,
                context_id=(context_ids or {}).get(candidate.task_id),
                candidate_id=candidate.id,
            )
        )
    return pairs, reasons
