"""Shared test fixtures and helpers."""

from __future__ import annotations

from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
MINISPEC_DIR = FIXTURES / "minispec"


def minispec_files() -> list[Path]:
    return sorted(MINISPEC_DIR.glob("*.fst"))


def minispec_solutions() -> list[tuple[str, str, str]]:
    """(val declaration, let definition, prelude) triples from the fixtures.

    The prelude is everything earlier in the same file, so each triple checks
    standalone as prelude + declaration + definition.
    """
    triples: list[tuple[str, str, str]] = []
    for path in minispec_files():
        decl: str | None = None
        seen: list[str] = []
        for block in split_decl_blocks(path.read_text(encoding="utf-8")):
            if block.startswith("val ") and decl is None:
                decl = block
            elif block.startswith("let ") and decl is not None:
                triples.append((decl, block, "\n".join(seen)))
                seen.extend([decl, block])
                decl = None
            else:
                seen.append(block)
                decl = None
    return triples


def split_decl_blocks(source: str) -> list[str]:
    """Split a fixture file into top-level declaration blocks."""
    blocks: list[str] = []
    current: list[str] = []
    for line in source.splitlines():
        stripped = line.strip()
        if stripped.startswith("//") or not stripped:
            continue
        if line.startswith(("val ", "let ", "open ")) and current:
            blocks.append("\n".join(current))
            current = []
        current.append(line)
    if current:
        blocks.append("\n".join(current))
    return blocks


@pytest.fixture
def minispec_corpus() -> list[Path]:
    return minispec_files()
