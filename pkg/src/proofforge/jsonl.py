"""JSONL reading/writing with line-accurate errors, plus content digests.

All pipeline artifacts are JSONL files serialized with sorted keys and
'\\n' line endings so their byte digests are stable across platforms.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator


class JsonlError(ValueError):
    """Malformed JSONL input; carries the 1-based line number."""

    def __init__(self, path: Path | str, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


def read_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Yield (lineno, object) for each non-blank line of a JSONL file."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(path, lineno, f"malformed JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise JsonlError(path, lineno, "expected a JSON object")
            yield lineno, obj


def dumps_row(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: Path | str, rows: Iterable[dict]) -> int:
    """Write rows as canonical JSONL; returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(dumps_row(row))
            f.write("\n")
            n += 1
    return n


def require_fields(path: Path | str, lineno: int, obj: dict, fields: Iterable[str]) -> None:
    for field in fields:
        if field not in obj:
            raise JsonlError(path, lineno, f"missing required field {field!r}")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path | str, chunk_size: int = 1 << 20) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def rows_digest(rows: Iterable[dict]) -> str:
    """Digest of the canonical JSONL serialization of rows."""
    hasher = hashlib.sha256()
    for row in rows:
        hasher.update(dumps_row(row).encode("utf-8"))
        hasher.update(b"\n")
    return hasher.hexdigest()
