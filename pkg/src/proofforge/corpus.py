"""Seed corpus ingestion: snippet extraction, seed contexts, length stats.

A top-level block starts at a line beginning with val/let/type/module/open
at column 0 and ends before the next such line. Only blocks starting with
val/let/type become snippets. Self-containedness is a static check: every
free identifier must be bound inside the snippet, listed in the prelude
allowlist, or qualified by a module opened in the same file. It is a
heuristic over tokens, not a typechecker, and is documented as such.
"""

from __future__ import annotations

import re
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .jsonl import JsonlError, read_jsonl, require_fields, sha256_text
from .tokens import DEFAULT_TOKENIZER, Tokenizer

LANGUAGE_TAGS = ("fstar", "ocaml", "other")
BLOCK_STARTERS = ("val", "let", "type", "module", "open")
DEFINITION_STARTERS = ("val", "let", "type")
MAX_SELECTED_PREMISES = 15

DEFAULT_EXTENSIONS: Mapping[str, str] = {
    ".fst": "fstar",
    ".fsti": "fstar",
    ".ml": "ocaml",
    ".mli": "ocaml",
}

# Primitive types and stock constructors that never count as free.
DEFAULT_ALLOWLIST = frozenset(
    {
        "int", "bool", "unit", "nat", "pos", "string", "char",
        "list", "option", "array", "Some", "None", "Cons", "Nil",
        "Type", "Prims", "not", "fst", "snd",
    }
)

_KEYWORDS = frozenset(
    {
        "val", "let", "type", "module", "open", "rec", "and", "in",
        "if", "then", "else", "match", "with", "of", "fun", "function",
        "begin", "end", "true", "false", "when", "mutable",
        "assert", "assume", "forall", "exists",
    }
)


@dataclass(frozen=True)
class ExtractionConfig:
    extensions: Mapping[str, str] = field(
        default_factory=lambda: dict(DEFAULT_EXTENSIONS)
    )
    allowlist: frozenset[str] = DEFAULT_ALLOWLIST

    def __post_init__(self) -> None:
        for suffix, tag in self.extensions.items():
            if not suffix.startswith("."):
                raise ValueError(f"extension {suffix!r} must start with '.'")
            if tag not in LANGUAGE_TAGS:
                raise ValueError(
                    f"unknown language tag {tag!r} for {suffix!r}; "
                    f"expected one of {LANGUAGE_TAGS}"
                )


_DEFINITION_LINE = re.compile(r"^(val|let|type)\b", re.MULTILINE)


@dataclass(frozen=True)
class Snippet:
    id: str
    source_path: str
    language_tag: str
    text: str
    line_span: tuple[int, int]
    self_contained: bool

    def __post_init__(self) -> None:
        if self.language_tag not in LANGUAGE_TAGS:
            raise ValueError(f"unknown language tag {self.language_tag!r}")
        if not self.text.strip():
            raise ValueError("snippet text is empty")
        if not _DEFINITION_LINE.search(self.text):
            raise ValueError("snippet text has no top-level definition token")
        start, end = self.line_span
        if start < 1 or end < start:
            raise ValueError(f"bad line span {self.line_span!r}")
        if self.id != sha256_text(self.text)[:16]:
            raise ValueError("snippet id does not match its text")

    @classmethod
    def from_text(
        cls,
        *,
        source_path: str,
        language_tag: str,
        text: str,
        line_span: tuple[int, int],
        self_contained: bool,
    ) -> "Snippet":
        return cls(
            id=sha256_text(text)[:16],
            source_path=source_path,
            language_tag=language_tag,
            text=text,
            line_span=line_span,
            self_contained=self_contained,
        )

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "source_path": self.source_path,
            "language_tag": self.language_tag,
            "text": self.text,
            "line_span": list(self.line_span),
            "self_contained": self.self_contained,
        }

    @classmethod
    def from_row(cls, row: Mapping) -> "Snippet":
        span = row["line_span"]
        return cls(
            id=row["id"],
            source_path=row["source_path"],
            language_tag=row["language_tag"],
            text=row["text"],
            line_span=(int(span[0]), int(span[1])),
            self_contained=bool(row["self_contained"]),
        )


def extract_snippets(
    source_tree: Path | str, config: ExtractionConfig | None = None
) -> list[Snippet]:
    """Scan a source tree into Snippets, ordered by path then line.

    Unreadable files are skipped with a warning; an empty tree yields [].
    """
    cfg = config if config is not None else ExtractionConfig()
    root = Path(source_tree)
    if not root.is_dir():
        raise FileNotFoundError(f"source tree {root} is not a directory")
    files = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix in cfg.extensions),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    snippets: list[Snippet] = []
    for path in files:
        rel = path.relative_to(root).as_posix()
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            warnings.warn(
                f"skipping unreadable file {rel}: {exc}", RuntimeWarning, stacklevel=2
            )
            continue
        snippets.extend(
            _file_snippets(rel, cfg.extensions[path.suffix], text, cfg.allowlist)
        )
    return snippets


def _starts_block(line: str) -> bool:
    return any(
        line.startswith(word + " ") or line.rstrip() == word
        for word in BLOCK_STARTERS
    )


def _file_snippets(
    rel: str, language_tag: str, text: str, allowlist: frozenset[str]
) -> list[Snippet]:
    lines = text.splitlines()
    opened = tuple(
        line.split(None, 1)[1].strip()
        for line in lines
        if line.startswith("open ") and len(line.split(None, 1)) == 2
    )
    boundaries = [i for i, line in enumerate(lines) if _starts_block(line)]
    out: list[Snippet] = []
    for start, stop in zip(boundaries, boundaries[1:] + [len(lines)]):
        first_word = lines[start].split(None, 1)[0]
        if first_word not in DEFINITION_STARTERS:
            continue
        while stop > start and not lines[stop - 1].strip():
            stop -= 1
        block = "\n".join(lines[start:stop])
        out.append(
            Snippet.from_text(
                source_path=rel,
                language_tag=language_tag,
                text=block,
                line_span=(start + 1, stop),
                self_contained=is_self_contained(block, opened, allowlist),
            )
        )
    return out


# --- free-identifier analysis -------------------------------------------

_BLOCK_COMMENT = re.compile(r"\(\*.*?\*\)", re.DOTALL)
_LINE_COMMENT = re.compile(r"//[^\n]*")
_STRING_LIT = re.compile(r'"(?:[^"\\]|\\.)*"')
_CHAR_LIT = re.compile(r"'(?:[^'\\]|\\.)'")
_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_.']*|[^\sA-Za-z0-9_]")


def _strip_noise(text: str) -> str:
    # Strings before chars so apostrophes inside strings cannot pair up.
    text = _BLOCK_COMMENT.sub(" ", text)
    text = _STRING_LIT.sub(" ", text)
    text = _CHAR_LIT.sub(" ", text)
    return _LINE_COMMENT.sub(" ", text)


def _is_word(token: str) -> bool:
    return bool(token) and (token[0].isalpha() or token[0] == "_")


_PATTERN_FILLER = frozenset({"(", ")", "[", "]", ",", ";", ":"})


def _bound_names(tokens: Sequence[str]) -> set[str]:
    """Names the snippet binds: decl heads, params, let-in and pattern binders.

    Token-level heuristic. Words between a binder head and the first '='
    or 'in' count as bound, which also sweeps up annotation type names;
    that overcount is deliberate (annotations are never free references).
    """
    bound: set[str] = set()
    i = 0
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        if tok in ("let", "and"):
            i += 1
            if i < n and tokens[i] == "rec":
                i += 1
            while i < n and tokens[i] not in ("=", "in"):
                if _is_word(tokens[i]) and tokens[i] not in _KEYWORDS:
                    bound.add(tokens[i])
                i += 1
        elif tok in ("val", "type", "module"):
            i += 1
            if i < n and _is_word(tokens[i]):
                bound.add(tokens[i])
        elif tok in ("fun", "function"):
            i += 1
            while i < n and not (tokens[i] == "-" and i + 1 < n and tokens[i + 1] == ">"):
                if _is_word(tokens[i]) and tokens[i] not in _KEYWORDS:
                    bound.add(tokens[i])
                i += 1
        elif tok == "|":
            i += 1
            while i < n and (
                (_is_word(tokens[i]) and tokens[i] not in _KEYWORDS)
                or tokens[i] in _PATTERN_FILLER
            ):
                if _is_word(tokens[i]):
                    bound.add(tokens[i])
                i += 1
        else:
            # Record fields and named arguments: a word directly before ':'.
            if _is_word(tok) and i + 1 < n and tokens[i + 1] == ":":
                bound.add(tok)
            i += 1
            continue
        i += 1
    return bound


def free_identifiers(text: str) -> set[str]:
    """Unbound identifier tokens of a snippet, dotted names kept whole."""
    tokens = _TOKEN.findall(_strip_noise(text))
    bound = _bound_names(tokens)
    free: set[str] = set()
    for tok in tokens:
        if not _is_word(tok) or tok in _KEYWORDS or tok == "_":
            continue
        if tok.split(".", 1)[0] in bound or tok in bound:
            continue
        free.add(tok)
    return free


def is_self_contained(
    text: str,
    opened_modules: Sequence[str] = (),
    allowlist: frozenset[str] = DEFAULT_ALLOWLIST,
) -> bool:
    for name in free_identifiers(text):
        root = name.split(".", 1)[0]
        if root in allowlist or name in allowlist:
            continue
        # An open resolves the name only when it covers the whole module
        # path, i.e. what remains after it is a single member segment.
        if "." in name and any(
            name.startswith(mod + ".") and "." not in name[len(mod) + 1 :]
            for mod in opened_modules
        ):
            continue
        return False
    return True


# --- seed contexts --------------------------------------------------------

_SEED_FIELDS = (
    "id",
    "type_declaration",
    "ground_truth_definition",
    "opened_modules",
    "premises",
    "selected_premises",
    "examples",
)


@dataclass(frozen=True)
class SeedContext:
    id: str
    type_declaration: str
    ground_truth_definition: str
    opened_modules: tuple[str, ...] = ()
    premises: tuple[str, ...] = ()
    selected_premises: tuple[str, ...] = ()
    examples: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("seed context id is empty")
        if not self.type_declaration.strip():
            raise ValueError(f"{self.id}: type_declaration is empty")
        missing = [p for p in self.selected_premises if p not in self.premises]
        if missing:
            raise ValueError(
                f"{self.id}: selected premises not in premise set: {missing}"
            )
        truth = (self.type_declaration, self.ground_truth_definition)
        if truth in self.examples:
            raise ValueError(f"{self.id}: examples contain the ground-truth pair")

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "type_declaration": self.type_declaration,
            "ground_truth_definition": self.ground_truth_definition,
            "opened_modules": list(self.opened_modules),
            "premises": list(self.premises),
            "selected_premises": list(self.selected_premises),
            "examples": [{"val": v, "let": d} for v, d in self.examples],
        }


def _string_list(path, lineno: int, row: Mapping, key: str) -> tuple[str, ...]:
    value = row[key]
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise JsonlError(path, lineno, f"field {key!r} must be a list of strings")
    return tuple(value)


def load_seed_contexts(
    path: Path | str, *, max_selected: int = MAX_SELECTED_PREMISES
) -> list[SeedContext]:
    """Parse a seed-context JSONL file, enforcing the record invariants.

    Violations that can be repaired in place (stray selected premises, a
    ground-truth pair listed among the examples, too many selected
    premises) are fixed with a warning; structural problems raise
    JsonlError naming the line.
    """
    contexts: list[SeedContext] = []
    for lineno, row in read_jsonl(path):
        require_fields(path, lineno, row, _SEED_FIELDS)
        for key in ("id", "type_declaration", "ground_truth_definition"):
            if not isinstance(row[key], str):
                raise JsonlError(path, lineno, f"field {key!r} must be a string")
        opened = _string_list(path, lineno, row, "opened_modules")
        premises = _string_list(path, lineno, row, "premises")
        selected = list(_string_list(path, lineno, row, "selected_premises"))
        raw_examples = row["examples"]
        if not isinstance(raw_examples, list):
            raise JsonlError(path, lineno, "field 'examples' must be a list")
        examples: list[tuple[str, str]] = []
        for j, ex in enumerate(raw_examples):
            if not isinstance(ex, dict) or not isinstance(ex.get("val"), str) \
                    or not isinstance(ex.get("let"), str):
                raise JsonlError(
                    path, lineno,
                    f"examples[{j}] must be an object with string 'val' and 'let'",
                )
            examples.append((ex["val"], ex["let"]))

        context_id = row["id"]
        stray = [p for p in selected if p not in premises]
        if stray:
            warnings.warn(
                f"{context_id}: dropping selected premises missing from the "
                f"premise set: {stray}",
                RuntimeWarning,
                stacklevel=2,
            )
            selected = [p for p in selected if p not in stray]
        truth = (row["type_declaration"], row["ground_truth_definition"])
        if truth in examples:
            warnings.warn(
                f"{context_id}: removing the ground-truth pair from examples",
                RuntimeWarning,
                stacklevel=2,
            )
            examples = [ex for ex in examples if ex != truth]
        if len(selected) > max_selected:
            warnings.warn(
                f"{context_id}: truncating {len(selected)} selected premises "
                f"to {max_selected}",
                RuntimeWarning,
                stacklevel=2,
            )
            selected = selected[:max_selected]

        contexts.append(
            SeedContext(
                id=context_id,
                type_declaration=row["type_declaration"],
                ground_truth_definition=row["ground_truth_definition"],
                opened_modules=opened,
                premises=premises,
                selected_premises=tuple(selected),
                examples=tuple(examples),
            )
        )
    return contexts


# --- length statistics ----------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    count: int
    length_histogram: Mapping[int, int]
    per_language: Mapping[str, int]
    tokenizer: str = DEFAULT_TOKENIZER.name
    bucket_width: int = 10

    def __post_init__(self) -> None:
        if sum(self.length_histogram.values()) != self.count:
            raise ValueError("histogram buckets do not sum to the item count")
        if sum(self.per_language.values()) != self.count:
            raise ValueError("per-language counts do not sum to the item count")

    def to_row(self) -> dict:
        return {
            "count": self.count,
            "length_histogram": {str(k): v for k, v in self.length_histogram.items()},
            "per_language": dict(self.per_language),
            "tokenizer": self.tokenizer,
            "bucket_width": self.bucket_width,
        }


def snippet_stats(
    items: Iterable[Snippet | str],
    *,
    tokenizer: Tokenizer | None = None,
    bucket_width: int = 10,
) -> CorpusStats:
    """Token-length histogram over snippets or plain definition strings."""
    if bucket_width < 1:
        raise ValueError(f"bucket width must be positive, got {bucket_width}")
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    histogram: dict[int, int] = {}
    per_language: dict[str, int] = {}
    count = 0
    for item in items:
        if isinstance(item, Snippet):
            text, tag = item.text, item.language_tag
        else:
            text, tag = str(item), "other"
        bucket = (tok.count(text) // bucket_width) * bucket_width
        histogram[bucket] = histogram.get(bucket, 0) + 1
        per_language[tag] = per_language.get(tag, 0) + 1
        count += 1
    return CorpusStats(
        count=count,
        length_histogram=dict(sorted(histogram.items())),
        per_language=dict(sorted(per_language.items())),
        tokenizer=tok.name,
        bucket_width=bucket_width,
    )
