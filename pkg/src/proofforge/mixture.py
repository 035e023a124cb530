"""Named training mixtures: seeded sampling, manifests, row formatting.

Sampling policy inside a component is shuffle-then-prefix with a seed
derived from (mixture seed, component ref), so a mixture is a pure
function of its spec and the component contents. The manifest records
what went in: per-component counts, input digests, and the digest of the
assembled output.
"""

from __future__ import annotations

import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from .corpus import SeedContext
from .jsonl import rows_digest, sha256_text
from .records import RepairProblem, TrainingExample
from .seeds import derive_seed
from .taskgen import (
    NewPair,
    PromptCaps,
    make_project_definition_task,
    make_project_repair_task,
)

ALL = "all"


@dataclass(frozen=True)
class MixtureComponent:
    ref: str
    count: int | str = ALL

    def __post_init__(self) -> None:
        if not self.ref:
            raise ValueError("component ref is empty")
        if isinstance(self.count, str):
            if self.count != ALL:
                raise ValueError(f"count must be an integer or '{ALL}', got {self.count!r}")
        elif self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")


@dataclass(frozen=True)
class MixtureSpec:
    name: str
    components: tuple[MixtureComponent, ...]
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("mixture name is empty")
        refs = [c.ref for c in self.components]
        if len(refs) != len(set(refs)):
            raise ValueError(f"duplicate component refs in mixture {self.name!r}")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "MixtureSpec":
        components = tuple(
            MixtureComponent(ref=c["ref"], count=c.get("count", ALL))
            for c in raw.get("components", ())
        )
        return cls(
            name=raw["name"],
            components=components,
            shuffle_seed=int(raw.get("shuffle_seed", 0)),
        )


def build_mixture(
    spec: MixtureSpec,
    store: Mapping[str, Sequence[TrainingExample]],
    *,
    allow_short: bool = False,
) -> tuple[list[TrainingExample], dict]:
    """Assemble a mixture and its manifest. Deterministic for a given store."""
    taken: list[TrainingExample] = []
    component_entries = []
    for component in spec.components:
        if component.ref not in store:
            raise ValueError(f"unknown dataset {component.ref!r} in mixture {spec.name!r}")
        items = list(store[component.ref])
        digest = rows_digest(item.to_row() for item in items)
        wanted = len(items) if component.count == ALL else int(component.count)
        if wanted > len(items) and not allow_short:
            raise ValueError(
                f"component {component.ref!r} has {len(items)} items, "
                f"{wanted} requested (pass allow_short to take what exists)"
            )
        rng = random.Random(derive_seed(spec.shuffle_seed, spec.name, component.ref))
        rng.shuffle(items)
        chosen = items[: min(wanted, len(items))]
        taken.extend(chosen)
        component_entries.append(
            {"ref": component.ref, "count": len(chosen), "digest": digest}
        )
    rng = random.Random(derive_seed(spec.shuffle_seed, spec.name, "final"))
    rng.shuffle(taken)
    manifest = {
        "name": spec.name,
        "seed": spec.shuffle_seed,
        "components": component_entries,
        "total": len(taken),
        "output_digest": rows_digest(item.to_row() for item in taken),
    }
    return taken, manifest


# --- row formatting -----------------------------------------------------------


def _definition_example(
    pair: NewPair, context: SeedContext | None, templates: Mapping[str, str] | None
) -> TrainingExample:
    ctx = SeedContext(
        id=pair.context_id or pair.candidate_id or sha256_text(pair.type_declaration)[:16],
        type_declaration=pair.type_declaration,
        ground_truth_definition=pair.definition,
        opened_modules=context.opened_modules if context else (),
        premises=context.premises if context else (),
        selected_premises=context.selected_premises if context else (),
        examples=(),
    )
    template = (templates or {}).get("project_definition")
    task = make_project_definition_task(ctx, template)
    return TrainingExample(
        instruction=task.prompt,
        response=pair.definition,
        kind="project_definition",
        provenance={
            "origin": pair.candidate_id,
            "context_id": pair.context_id,
        },
    )


def _repair_example(
    problem: RepairProblem,
    context: SeedContext | None,
    templates: Mapping[str, str] | None,
) -> TrainingExample:
    if not problem.correct_solution:
        raise ValueError("repair problem has no correct solution to train on")
    template = (templates or {}).get("project_repair")
    task = make_project_repair_task(problem, template, context=context)
    provenance: dict[str, Any] = {
        "origin": task.origin,
        "context_id": problem.context_id,
        "source": problem.source,
    }
    if problem.seed is not None:
        provenance["seed"] = problem.seed
    if problem.via_token_fallback:
        provenance["fallback"] = True
    return TrainingExample(
        instruction=task.prompt,
        response=problem.correct_solution,
        kind="project_repair",
        provenance=provenance,
    )


def format_example(
    item: NewPair | RepairProblem | TrainingExample,
    templates: Mapping[str, str] | None = None,
    *,
    context: SeedContext | None = None,
) -> TrainingExample:
    """Turn a pipeline record into an instruction-response training row."""
    if isinstance(item, TrainingExample):
        return item
    if isinstance(item, NewPair):
        return _definition_example(item, context, templates)
    if isinstance(item, RepairProblem):
        return _repair_example(item, context, templates)
    raise ValueError(f"no training-row format for {type(item).__name__}")


def dataset_report(dataset: Iterable[TrainingExample]) -> dict:
    """Composition counts by kind and by provenance source."""
    by_kind: dict[str, int] = {}
    by_source: dict[str, int] = {}
    total = 0
    for example in dataset:
        total += 1
        by_kind[example.kind] = by_kind.get(example.kind, 0) + 1
        source = str(example.provenance.get("source", "") or "unspecified")
        by_source[source] = by_source.get(source, 0) + 1
    return {
        "total": total,
        "by_kind": dict(sorted(by_kind.items())),
        "by_source": dict(sorted(by_source.items())),
    }
