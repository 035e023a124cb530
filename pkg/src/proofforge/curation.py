"""Quality filters: similarity dedup, test-set leakage removal, per-key caps."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

from .simkernel import TokenEncoder, similarity_ratio
from .tokens import DEFAULT_TOKENIZER, Tokenizer, get_tokenizer


class Scope(str, enum.Enum):
    WITHIN_CONTEXT = "within_context"
    GLOBAL = "global"


@dataclass(frozen=True)
class SimilarityConfig:
    tokenizer: str = DEFAULT_TOKENIZER.name
    threshold: float = 0.85
    scope: Scope = Scope.GLOBAL

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        get_tokenizer(self.tokenizer)  # fail fast on unknown tokenizer ids

    def tokenizer_obj(self) -> Tokenizer:
        return get_tokenizer(self.tokenizer)


def similarity(a: str, b: str, tokenizer: Tokenizer | None = None) -> float:
    """Token-level LCS ratio: 2·LCS / (|tokens(a)| + |tokens(b)|)."""
    tokenizer = tokenizer or DEFAULT_TOKENIZER
    encoder = TokenEncoder()
    return similarity_ratio(
        encoder.encode(tokenizer.tokenize(a)), encoder.encode(tokenizer.tokenize(b))
    )


@dataclass(frozen=True)
class DropReason:
    """Why an item was dropped; serializes to the drop-reason report row."""

    id: str
    reason: str
    matched_id: str | None = None
    similarity: float | None = None

    def to_row(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "reason": self.reason,
            "matched_id": self.matched_id,
            "similarity": (
                round(self.similarity, 6) if self.similarity is not None else None
            ),
        }


def _default_id(item: Any, index: int) -> str:
    if isinstance(item, dict) and "id" in item:
        return str(item["id"])
    return f"item-{index}"


def _default_context(item: Any) -> str:
    if isinstance(item, dict):
        return str(item.get("context_id", ""))
    return str(getattr(item, "context_id", ""))


def dedup(
    items: Sequence[Any],
    key_extractor: Callable[[Any], str],
    cfg: SimilarityConfig,
    reference_set: Sequence[str] = (),
    *,
    id_extractor: Callable[[Any, int], str] = _default_id,
    context_extractor: Callable[[Any], str] = _default_context,
) -> tuple[list[Any], list[DropReason]]:
    """Greedy first-wins near-duplicate filter.

    Scans in input order; an item is dropped when its similarity to any
    already-kept item (same context only, under within_context scope) or to
    any reference text reaches cfg.threshold. Every surviving pair is
    strictly below the threshold, and input order is preserved.
    """
    tokenizer = cfg.tokenizer_obj()
    encoder = TokenEncoder()
    references = [encoder.encode(tokenizer.tokenize(text)) for text in reference_set]

    kept: list[Any] = []
    kept_codes: list[Any] = []
    kept_ids: list[str] = []
    kept_contexts: list[str] = []
    dropped: list[DropReason] = []

    for index, item in enumerate(items):
        item_id = id_extractor(item, index)
        codes = encoder.encode(tokenizer.tokenize(key_extractor(item)))
        context = context_extractor(item)

        drop: DropReason | None = None
        for ref_codes in references:
            score = similarity_ratio(codes, ref_codes)
            if score >= cfg.threshold:
                drop = DropReason(item_id, "matches-reference", None, score)
                break
        if drop is None:
            for pos in range(len(kept)):
                if (
                    cfg.scope is Scope.WITHIN_CONTEXT
                    and kept_contexts[pos] != context
                ):
                    continue
                score = similarity_ratio(codes, kept_codes[pos])
                if score >= cfg.threshold:
                    drop = DropReason(
                        item_id,
                        f"duplicate-of:{kept_ids[pos]}",
                        kept_ids[pos],
                        score,
                    )
                    break

        if drop is not None:
            dropped.append(drop)
        else:
            kept.append(item)
            kept_codes.append(codes)
            kept_ids.append(item_id)
            kept_contexts.append(context)
    return kept, dropped


class LeakageMode(str, enum.Enum):
    EXACT = "exact"
    THRESHOLD = "threshold"


def filter_leakage(
    items: Sequence[Any],
    test_set: Iterable[str],
    mode: LeakageMode | str = LeakageMode.EXACT,
    *,
    key_extractor: Callable[[Any], str] = lambda item: str(item),
    cfg: SimilarityConfig | None = None,
) -> list[Any]:
    """Drop items that overlap the test set.

    Exact mode compares token sequences (so whitespace variants still
    match); threshold mode additionally drops anything whose similarity to a
    test solution reaches cfg.threshold.
    """
    mode = LeakageMode(mode)
    cfg = cfg or SimilarityConfig()
    tokenizer = cfg.tokenizer_obj()
    encoder = TokenEncoder()

    test_codes = [encoder.encode(tokenizer.tokenize(text)) for text in test_set]
    exact = {codes.tobytes() for codes in test_codes}

    kept: list[Any] = []
    for item in items:
        codes = encoder.encode(tokenizer.tokenize(key_extractor(item)))
        if codes.tobytes() in exact:
            continue
        if mode is LeakageMode.THRESHOLD and any(
            similarity_ratio(codes, t) >= cfg.threshold for t in test_codes
        ):
            continue
        kept.append(item)
    return kept


def cap_per_key(
    items: Sequence[Any],
    key: Callable[[Any], Any],
    max_count: int,
) -> list[Any]:
    """Keep at most max_count items per key value, earliest first."""
    if max_count < 0:
        raise ValueError(f"max_count must be >= 0, got {max_count}")
    counts: dict[Any, int] = {}
    kept: list[Any] = []
    for item in items:
        k = key(item)
        seen = counts.get(k, 0)
        if seen < max_count:
            kept.append(item)
            counts[k] = seen + 1
    return kept
