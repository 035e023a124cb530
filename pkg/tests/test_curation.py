"""Curation tests with an independent quadratic-DP LCS oracle.

The oracle below is the committed reference implementation for similarity
values: plain lists, plain loops, its own tokenizer regex. Package code must
agree with it exactly.
"""

from __future__ import annotations

import os
import random
import re
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proofforge.curation import (
    DropReason,
    LeakageMode,
    Scope,
    SimilarityConfig,
    cap_per_key,
    dedup,
    filter_leakage,
    similarity,
)
from proofforge.simkernel import (
    TokenEncoder,
    _lcs_numpy,
    active_backend,
    lcs_length,
    similarity_ratio,
)

_ORACLE_TOKEN_RE = re.compile(r"[A-Za-z0-9_']+|[^\sA-Za-z0-9_']")


def oracle_tokens(text: str) -> list[str]:
    return _ORACLE_TOKEN_RE.findall(text)


def oracle_lcs(a: list, b: list) -> int:
    rows = len(a) + 1
    cols = len(b) + 1
    dp = [[0] * cols for _ in range(rows)]
    for i in range(1, rows):
        for j in range(1, cols):
            if a[i - 1] == b[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    return dp[-1][-1]


def oracle_similarity(a: str, b: str) -> float:
    ta, tb = oracle_tokens(a), oracle_tokens(b)
    if not ta and not tb:
        return 1.0
    return 2.0 * oracle_lcs(ta, tb) / (len(ta) + len(tb))


def oracle_greedy_dedup(texts: list[str], threshold: float) -> list[int]:
    """Indices kept by a brute-force first-wins filter."""
    kept: list[int] = []
    for i, text in enumerate(texts):
        if all(oracle_similarity(text, texts[j]) < threshold for j in kept):
            kept.append(i)
    return kept


# similarity


def test_similarity_identity():
    assert similarity("let f x = x", "let f x = x") == 1.0


def test_similarity_disjoint_tokens():
    assert similarity("alpha beta", "gamma delta") == 0.0


def test_similarity_matches_oracle_on_spec_example():
    a, b = "let f x = x + 1", "let f y = y + 1"
    want = oracle_similarity(a, b)
    assert similarity(a, b) == pytest.approx(want)
    # let, f, =, +, 1 survive out of 7 tokens each
    assert want == pytest.approx(10 / 14)


@settings(max_examples=150, deadline=None)
@given(st.text(max_size=40), st.text(max_size=40))
def test_similarity_matches_oracle_everywhere(a, b):
    assert similarity(a, b) == pytest.approx(oracle_similarity(a, b))


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=40), st.text(max_size=40))
def test_similarity_symmetric(a, b):
    assert similarity(a, b) == pytest.approx(similarity(b, a))


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1, max_size=40))
def test_similarity_self_is_one(a):
    assert similarity(a, a) == 1.0


# kernels


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(0, 5), max_size=40),
    st.lists(st.integers(0, 5), max_size=40),
)
def test_kernels_agree_with_oracle(a, b):
    arr_a = np.asarray(a, dtype=np.int64)
    arr_b = np.asarray(b, dtype=np.int64)
    want = oracle_lcs(a, b)
    assert lcs_length(arr_a, arr_b) == want
    assert _lcs_numpy(arr_a, arr_b) == want


def test_default_backend_is_numba():
    assert active_backend() == "numba"


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ)
    env["PROOFFORGE_DISABLE_NUMBA"] = "1"
    out = subprocess.run(
        [
            sys.executable,
            "-c",
            "from proofforge.simkernel import active_backend, lcs_length;"
            "import numpy as np;"
            "print(active_backend());"
            "print(lcs_length(np.array([1,2,3]), np.array([2,3,4])))",
        ],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.split() == ["numpy", "2"]


def test_similarity_ratio_empty_sequences():
    empty = np.asarray([], dtype=np.int64)
    one = TokenEncoder().encode(["x"])
    assert similarity_ratio(empty, empty) == 1.0
    assert similarity_ratio(empty, one) == 0.0


# dedup


def make_items(texts: list[str], contexts: list[str] | None = None) -> list[dict]:
    items = []
    for i, text in enumerate(texts):
        items.append(
            {
                "id": f"it{i}",
                "text": text,
                "context_id": contexts[i] if contexts else "c0",
            }
        )
    return items


CFG = SimilarityConfig(threshold=0.85)


def test_dedup_identical_pair():
    items = make_items(["let f x = x", "let f x = x"])
    kept, dropped = dedup(items, lambda it: it["text"], CFG)
    assert [it["id"] for it in kept] == ["it0"]
    assert dropped == [DropReason("it1", "duplicate-of:it0", "it0", 1.0)]


def test_dedup_reference_match():
    items = make_items(["let f x = x + 1"])
    kept, dropped = dedup(
        items, lambda it: it["text"], CFG, reference_set=["let f x = x + 1"]
    )
    assert kept == []
    assert dropped[0].reason == "matches-reference"
    assert dropped[0].matched_id is None
    assert dropped[0].similarity == 1.0


def test_dedup_distinct_items_survive():
    items = make_items(["let a = 1", "let completely different = thing"])
    kept, dropped = dedup(items, lambda it: it["text"], CFG)
    assert len(kept) == 2 and dropped == []


def synthetic_batch(n: int, seed: int) -> list[str]:
    """Deterministic mix of near-duplicates and distinct definitions."""
    rng = random.Random(seed)
    bases = [
        "let add a b = a + b",
        "let mul a b = a * b",
        "let max2 a b = if a < b then b else a",
        "let chain x = let t = x + 1 in t * 2",
        "let pick f = match f with | true -> 1 | false -> 0",
    ]
    out = []
    for i in range(n):
        base = rng.choice(bases)
        roll = rng.random()
        if roll < 0.4:
            out.append(base)
        elif roll < 0.7:
            out.append(base.replace("a", f"a{i % 7}"))
        else:
            out.append(f"let fresh{i} q = q - {i}")
    return out


def test_dedup_matches_brute_force_on_batch_of_50():
    texts = synthetic_batch(50, seed=1234)
    items = make_items(texts)
    kept, dropped = dedup(items, lambda it: it["text"], CFG)
    want = oracle_greedy_dedup(texts, CFG.threshold)
    assert [items.index(it) for it in kept] == want
    assert len(kept) + len(dropped) == 50
    # every surviving pair is strictly below the threshold
    for i, left in enumerate(kept):
        for right in kept[i + 1 :]:
            assert similarity(left["text"], right["text"]) < CFG.threshold


def test_dedup_idempotent():
    items = make_items(synthetic_batch(40, seed=9))
    kept, _ = dedup(items, lambda it: it["text"], CFG)
    again, dropped = dedup(kept, lambda it: it["text"], CFG)
    assert again == kept
    assert dropped == []


def test_dedup_within_context_scope_only_compares_same_context():
    texts = ["let f x = x", "let f x = x"]
    items = make_items(texts, contexts=["c0", "c1"])
    cfg = SimilarityConfig(threshold=0.85, scope=Scope.WITHIN_CONTEXT)
    kept, dropped = dedup(items, lambda it: it["text"], cfg)
    assert len(kept) == 2 and dropped == []
    # same texts in one context still collapse
    same = make_items(texts, contexts=["c0", "c0"])
    kept, dropped = dedup(same, lambda it: it["text"], cfg)
    assert len(kept) == 1 and len(dropped) == 1


def test_dedup_drop_rows_serialize():
    items = make_items(["let f x = x", "let f x = x"])
    _, dropped = dedup(items, lambda it: it["text"], CFG)
    row = dropped[0].to_row()
    assert row == {
        "id": "it1",
        "reason": "duplicate-of:it0",
        "matched_id": "it0",
        "similarity": 1.0,
    }


def test_similarity_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig(threshold=1.5)
    with pytest.raises(KeyError):
        SimilarityConfig(tokenizer="nope")


# filter_leakage


def test_leakage_exact_drops_byte_equal():
    items = ["let f x = x", "let g y = y"]
    kept = filter_leakage(items, ["let f x = x"])
    assert kept == ["let g y = y"]


def test_leakage_empty_test_set_is_identity():
    items = ["a", "b"]
    assert filter_leakage(items, []) == items


def test_leakage_exact_uses_token_equality():
    # whitespace variant of a test solution still leaks
    kept = filter_leakage(["let f   x =\n  x"], ["let f x = x"])
    assert kept == []


def test_leakage_threshold_mode_drops_near_matches():
    items = ["let f x = x + 1"]
    test_set = ["let f y = x + 1"]
    assert filter_leakage(items, test_set, LeakageMode.EXACT) == items
    assert (
        filter_leakage(
            items,
            test_set,
            LeakageMode.THRESHOLD,
            cfg=SimilarityConfig(threshold=0.8),
        )
        == []
    )


# cap_per_key


def test_cap_keeps_first_three_per_problem():
    items = [{"problem": "p1", "n": i} for i in range(5)]
    kept = cap_per_key(items, lambda it: it["problem"], 3)
    assert [it["n"] for it in kept] == [0, 1, 2]


def test_cap_two_per_declaration():
    items = [{"decl": "val f : int", "n": i} for i in range(3)]
    assert len(cap_per_key(items, lambda it: it["decl"], 2)) == 2


def test_cap_zero_empties():
    assert cap_per_key([1, 2, 3], lambda x: "k", 0) == []


def test_cap_one_on_identical_incorrect_proofs():
    items = [
        {"incorrect": "let f x = _", "n": 0},
        {"incorrect": "let f x = _", "n": 1},
        {"incorrect": "let f x = ", "n": 2},
    ]
    kept = cap_per_key(items, lambda it: it["incorrect"], 1)
    assert [it["n"] for it in kept] == [0, 2]


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 3), st.integers()), max_size=30),
    st.integers(0, 4),
)
def test_cap_property_bound_stability_idempotence(pairs, max_count):
    kept = cap_per_key(pairs, lambda p: p[0], max_count)
    for key in {p[0] for p in pairs}:
        assert sum(1 for p in kept if p[0] == key) <= max_count
    # kept is a subsequence of the input
    it = iter(pairs)
    assert all(any(p == q for q in it) for p in kept)
    assert cap_per_key(kept, lambda p: p[0], max_count) == kept
