"""Deterministic, platform-stable sub-seed derivation."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """A 64-bit seed from any hashable-as-text parts.

    Digest-based so results are stable across platforms and Python versions,
    and so unrelated (seed, key) pairs get independent streams.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
