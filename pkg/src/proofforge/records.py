"""Shared record types carried between pipeline stages as JSONL rows."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

REPAIR_SOURCES = ("mutation", "model")


@dataclass(frozen=True)
class RepairProblem:
    """A (declaration, broken solution, error, fix) tuple for repair training.

    `source` records how the broken solution was produced: "mutation" for
    rule-based edits of a verified solution, "model" for harvested failing
    samples. `via_token_fallback` marks mutants made by the token-level
    fallback path on sources the structural parser could not handle.
    """

    type_declaration: str
    incorrect_solution: str
    error_message: str
    correct_solution: str
    source: str
    context_id: str | None = None
    seed: int | None = None
    via_token_fallback: bool = False

    def __post_init__(self) -> None:
        if self.source not in REPAIR_SOURCES:
            raise ValueError(
                f"source must be one of {REPAIR_SOURCES}, got {self.source!r}"
            )
        if not self.error_message:
            raise ValueError("error_message must be non-empty")

    def to_row(self) -> dict[str, Any]:
        row: dict[str, Any] = {
            "context_id": self.context_id,
            "type_declaration": self.type_declaration,
            "incorrect_solution": self.incorrect_solution,
            "error_message": self.error_message,
            "correct_solution": self.correct_solution,
            "source": self.source,
            "seed": self.seed,
        }
        if self.via_token_fallback:
            row["fallback"] = True
        return row

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> RepairProblem:
        return cls(
            type_declaration=row["type_declaration"],
            incorrect_solution=row["incorrect_solution"],
            error_message=row["error_message"],
            correct_solution=row.get("correct_solution", ""),
            source=row["source"],
            context_id=row.get("context_id"),
            seed=row.get("seed"),
            via_token_fallback=bool(row.get("fallback", False)),
        )


# Kinds produced by this pipeline. External datasets arrive with their own
# source tag as the kind, so the field is open-ended.
TASK_KINDS = (
    "nl2code",
    "proof_completion",
    "func_repair",
    "project_definition",
    "project_repair",
)


@dataclass(frozen=True)
class TrainingExample:
    """One instruction-response row of the final dataset.

    provenance is a small JSON object pointing back at the upstream
    records (origin ids, backend profile, verdict id) so every row stays
    traceable after mixing.
    """

    instruction: str
    response: str
    kind: str
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("instruction must be non-empty")
        if not self.response:
            raise ValueError("response must be non-empty")
        if not self.kind:
            raise ValueError("kind must be non-empty")

    def to_row(self) -> dict[str, Any]:
        return {
            "instruction": self.instruction,
            "response": self.response,
            "kind": self.kind,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> TrainingExample:
        provenance = row.get("provenance") or {}
        if isinstance(provenance, str):
            provenance = {"origin": provenance}
        return cls(
            instruction=row["instruction"],
            response=row["response"],
            kind=row["kind"],
            provenance=dict(provenance),
        )
