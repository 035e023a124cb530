"""Checker outcome values: Verdict and ErrorClass."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any


class Status(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    TIMEOUT = "Timeout"
    CHECKER_ERROR = "CheckerError"


@dataclass(frozen=True)
class ErrorClass:
    """A classified error label plus the taxonomy rule that produced it."""

    label: str
    pattern_id: str


@dataclass(frozen=True)
class Verdict:
    """Immutable outcome of checking one candidate program.

    Construction enforces the log/class invariants: a Pass carries no log and
    no class; every other status carries both.
    """

    candidate_id: str
    status: Status
    error_log: str = ""
    error_class: ErrorClass | None = None
    duration_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.duration_ms < 0:
            raise ValueError(f"duration_ms must be >= 0, got {self.duration_ms}")
        if self.status is Status.PASS:
            if self.error_log:
                raise ValueError("a Pass verdict must have an empty error_log")
            if self.error_class is not None:
                raise ValueError("a Pass verdict must not carry an error_class")
        else:
            if not self.error_log:
                raise ValueError(
                    f"a {self.status.value} verdict must have a non-empty error_log"
                )
            if self.error_class is None:
                raise ValueError(
                    f"a {self.status.value} verdict must carry an error_class"
                )

    @property
    def passed(self) -> bool:
        return self.status is Status.PASS

    def to_row(self) -> dict[str, Any]:
        return {
            "candidate_id": self.candidate_id,
            "status": self.status.value,
            "error_log": self.error_log,
            "error_class": self.error_class.label if self.error_class else None,
            "pattern_id": self.error_class.pattern_id if self.error_class else None,
            "duration_ms": round(self.duration_ms, 3),
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> Verdict:
        label = row.get("error_class")
        error_class = None
        if label is not None:
            error_class = ErrorClass(label, row.get("pattern_id") or "fallback")
        return cls(
            candidate_id=row["candidate_id"],
            status=Status(row["status"]),
            error_log=row.get("error_log", ""),
            error_class=error_class,
            duration_ms=float(row.get("duration_ms", 0.0)),
        )
