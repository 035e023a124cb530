"""LCS length kernels behind token-sequence similarity.

The pairwise dedup pass is the only numeric hot spot in the pipeline, so the
longest-common-subsequence DP has two interchangeable implementations: a
numba-compiled scalar loop and a vectorized numpy row recurrence. Setting
PROOFFORGE_DISABLE_NUMBA=1 (or running without numba installed) selects the
numpy path; both produce identical results.

The numpy recurrence uses the relaxed DP
    dp[i][j] = max(dp[i-1][j], dp[i][j-1], dp[i-1][j-1] + eq(i,j))
whose rows are monotone, so the row update is a running maximum:
    row = accumulate-max(max(prev[1:], prev[:-1] + eq)).
The relaxation changes no values: allowing a "diagonal + 1" move after a
lateral move never beats the classic recurrence because dp is 1-Lipschitz
along rows and columns.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np

DISABLE_ENV = "PROOFFORGE_DISABLE_NUMBA"


def _numba_wanted() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip() not in ("1", "true", "yes")


_lcs_njit = None
if _numba_wanted():
    try:
        from numba import njit

        @njit(cache=True)
        def _lcs_njit_impl(a: np.ndarray, b: np.ndarray) -> int:  # pragma: no cover
            n = a.shape[0]
            m = b.shape[0]
            prev = np.zeros(m + 1, dtype=np.int64)
            curr = np.zeros(m + 1, dtype=np.int64)
            for i in range(n):
                ai = a[i]
                for j in range(m):
                    if ai == b[j]:
                        best = prev[j] + 1
                    else:
                        best = 0
                    up = prev[j + 1]
                    left = curr[j]
                    if up > best:
                        best = up
                    if left > best:
                        best = left
                    curr[j + 1] = best
                tmp = prev
                prev = curr
                curr = tmp
            return int(prev[m])

        _lcs_njit = _lcs_njit_impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _lcs_njit = None


def active_backend() -> str:
    """Which kernel the next lcs_length call will use: "numba" or "numpy"."""
    return "numba" if _lcs_njit is not None else "numpy"


def _lcs_numpy(a: np.ndarray, b: np.ndarray) -> int:
    m = b.shape[0]
    prev = np.zeros(m + 1, dtype=np.int64)
    for ai in a:
        cand = prev[:-1] + (b == ai)
        row = np.maximum(prev[1:], cand)
        np.maximum.accumulate(row, out=row)
        prev[1:] = row
    return int(prev[m])


def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
    """Length of the longest common subsequence of two int sequences."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return 0
    if _lcs_njit is not None:
        return _lcs_njit(
            np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(b, dtype=np.int64),
        )
    return _lcs_numpy(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))


class TokenEncoder:
    """Interns token strings as int64 codes shared across one comparison batch."""

    def __init__(self) -> None:
        self._codes: dict[str, int] = {}

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        codes = self._codes
        out = []
        for token in tokens:
            code = codes.get(token)
            if code is None:
                code = len(codes)
                codes[token] = code
            out.append(code)
        return np.asarray(out, dtype=np.int64)


def similarity_ratio(a: np.ndarray, b: np.ndarray) -> float:
    """2·LCS / (|a| + |b|); 1.0 for two empty sequences (they are equal)."""
    total = a.shape[0] + b.shape[0]
    if total == 0:
        return 1.0
    return 2.0 * lcs_length(a, b) / total


def encode_corpus(token_lists: Sequence[Sequence[str]]) -> list[np.ndarray]:
    """Encode many token lists against one shared vocabulary."""
    encoder = TokenEncoder()
    return [encoder.encode(tokens) for tokens in token_lists]
