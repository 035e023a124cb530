"""Tokenizers used for length budgets, corpus stats, and sequence similarity.

The active tokenizer identity is recorded in run manifests so that numbers
produced under one tokenizer are never compared against another.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

# Words are runs of identifier characters (primes included, ML-style);
# every other non-space character is its own token.
_WS_PUNCT = re.compile(r"[A-Za-z0-9_']+|[^\sA-Za-z0-9_']")
_WS_ONLY = re.compile(r"\S+")


@dataclass(frozen=True)
class Tokenizer:
    name: str
    pattern: re.Pattern

    def tokenize(self, text: str) -> list[str]:
        return self.pattern.findall(text)

    def count(self, text: str) -> int:
        return len(self.pattern.findall(text))


WS_PUNCT = Tokenizer("ws_punct-v1", _WS_PUNCT)
WS_ONLY = Tokenizer("ws-v1", _WS_ONLY)

_REGISTRY = {t.name: t for t in (WS_PUNCT, WS_ONLY)}
# Short aliases accepted in config files.
_REGISTRY["ws_punct"] = WS_PUNCT
_REGISTRY["ws"] = WS_ONLY

DEFAULT_TOKENIZER = WS_PUNCT


def get_tokenizer(name: str) -> Tokenizer:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown tokenizer {name!r}; known: {sorted(set(_REGISTRY))}") from None
