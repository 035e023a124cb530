"""Ordered-regex error taxonomy and log classification."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from .verdicts import ErrorClass

FALLBACK_PATTERN_ID = "fallback"


@dataclass(frozen=True)
class TaxonomyRule:
    rule_id: str
    label: str
    pattern: re.Pattern[str]


@dataclass(frozen=True)
class Taxonomy:
    """A closed, ordered set of error labels; first matching rule wins."""

    rules: tuple[TaxonomyRule, ...]
    fallback: str = "unclassified"

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rule in self.rules:
            if rule.rule_id in seen:
                raise ValueError(f"duplicate taxonomy rule id: {rule.rule_id!r}")
            seen.add(rule.rule_id)

    @property
    def labels(self) -> tuple[str, ...]:
        """All labels in rule order, with the fallback last."""
        out = [rule.label for rule in self.rules]
        out.append(self.fallback)
        return tuple(out)


def _taxonomy_from_mapping(raw: dict[str, Any], source: str) -> Taxonomy:
    rules: list[TaxonomyRule] = []
    for idx, entry in enumerate(raw.get("rules", [])):
        for key in ("id", "label", "pattern"):
            if key not in entry:
                raise ValueError(
                    f"{source}: taxonomy rule {idx} is missing {key!r}"
                )
        try:
            pattern = re.compile(entry["pattern"], re.IGNORECASE)
        except re.error as exc:
            raise ValueError(
                f"{source}: bad regex in rule {entry['id']!r}: {exc}"
            ) from exc
        rules.append(TaxonomyRule(entry["id"], entry["label"], pattern))
    if not rules:
        raise ValueError(f"{source}: taxonomy has no rules")
    return Taxonomy(tuple(rules), raw.get("fallback", "unclassified"))


def load_taxonomy(path: str | Path) -> Taxonomy:
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    return _taxonomy_from_mapping(raw, str(path))


@lru_cache(maxsize=1)
def default_taxonomy() -> Taxonomy:
    raw = json.loads(
        resources.files("proofforge.data")
        .joinpath("error_taxonomy.json")
        .read_text(encoding="utf-8")
    )
    return _taxonomy_from_mapping(raw, "error_taxonomy.json")


def classify_error(error_log: str, taxonomy: Taxonomy | None = None) -> ErrorClass:
    """Map a raw checker log onto the first matching taxonomy label.

    Total and deterministic: anything unmatched (including an empty log)
    classifies as the taxonomy's fallback label.
    """
    taxonomy = taxonomy or default_taxonomy()
    for rule in taxonomy.rules:
        if rule.pattern.search(error_log):
            return ErrorClass(rule.label, rule.rule_id)
    return ErrorClass(taxonomy.fallback, FALLBACK_PATTERN_ID)
