"""Protocol runs, scoring, harvesting, and report rendering."""

from __future__ import annotations

import json
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proofforge import evaluation as ev
from proofforge.checker import (
    ErrorClass,
    MiniSpecBackend,
    RawOutcome,
    Status,
    Verdict,
)
from proofforge.corpus import SeedContext
from proofforge.llm_client import BackendError, Completion, UsageLedger, prompt_digest
from proofforge.records import RepairProblem

_VAL_NAME = re.compile(r"\b(?:val|let) ([A-Za-z_][A-Za-z0-9_']*)")


def ctx_of(i: int) -> SeedContext:
    return SeedContext(
        id=f"p{i:03d}",
        type_declaration=f"val f{i} : int -> int",
        ground_truth_definition=f"let f{i} x = x + x",
    )


class FnBackend:
    """Completions computed from the request; the test's model stand-in."""

    name = "fn"

    def __init__(self, fn):
        self.fn = fn

    def generate(self, request):
        return [
            Completion(prompt_digest(request), i, self.fn(request, i))
            for i in range(request.n_samples)
        ]


def name_in(request) -> str:
    match = _VAL_NAME.search(request.prompt_text)
    assert match, "prompt carries no declaration"
    return match.group(1)


def passing_backend() -> FnBackend:
    return FnBackend(lambda req, i: f"let {name_in(req)} x = x + x")


def failing_backend() -> FnBackend:
    return FnBackend(lambda req, i: f"let {name_in(req)} x = x + true")


class RaisingBackend:
    name = "raising"

    def generate(self, request):
        raise BackendError("backend offline")


class RaisingChecker:
    def run(self, program, timeout_ms):
        raise RuntimeError("checker crashed")


class TimeoutChecker:
    def run(self, program, timeout_ms):
        return RawOutcome(Status.TIMEOUT, "timeout after 60000 ms", 60000.0)


def fail_verdict(cid: str, label: str = "type mismatch") -> Verdict:
    return Verdict(cid, Status.FAIL, f"{label}: synthetic", ErrorClass(label, "x"))


def pass_verdict(cid: str) -> Verdict:
    return Verdict(cid, Status.PASS)


def result_of(pid: str, gen: list[bool], rep: list[bool] | None = None) -> ev.ProblemResult:
    gen_v = tuple(
        pass_verdict(f"{pid}/g{i}") if ok else fail_verdict(f"{pid}/g{i}")
        for i, ok in enumerate(gen)
    )
    rep_v = tuple(
        pass_verdict(f"{pid}/r{i}") if ok else fail_verdict(f"{pid}/r{i}")
        for i, ok in enumerate(rep or [])
    )
    return ev.ProblemResult(
        problem_id=pid,
        generation_verdicts=gen_v,
        repair_verdicts=rep_v,
        solved_stage=ev._solved_stage(gen_v, rep_v),
    )


# --- protocols ------------------------------------------------------------


def test_protocol_defaults():
    p = ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5)
    assert (p.k_generate, p.k_repair) == (5, 5)
    assert p.temperature == 0.7
    assert p.max_tokens == 2048
    assert p.repair_budget == 5

    f = ev.EvalProtocol(ev.ProtocolKind.FUNC_GEN_REPAIR1)
    assert (f.k_generate, f.k_repair) == (1, 1)
    assert f.temperature == 0.1
    assert f.max_tokens == 1024

    g10 = ev.EvalProtocol(ev.ProtocolKind.GEN10)
    assert (g10.k_generate, g10.k_repair) == (10, 0)

    s = ev.EvalProtocol(ev.ProtocolKind.SAMPLE1_ON5)
    assert (s.k_generate, s.k_repair) == (5, 1)
    assert s.repair_budget == 5


def test_protocol_rejects_wrong_budget():
    with pytest.raises(ValueError, match="fixes the budget"):
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5, k_generate=3)
    with pytest.raises(ValueError, match="k_generate must be 0"):
        ev.EvalProtocol(ev.ProtocolKind.CROSS_MODEL_REPAIR, k_generate=2)


def test_protocol_round_trip():
    p = ev.EvalProtocol(ev.ProtocolKind.CROSS_MODEL_REPAIR, k_repair=3)
    assert ev.EvalProtocol.from_row(p.to_row()) == p


# --- scoring --------------------------------------------------------------


def test_generate_at_k_counts_first_k():
    results = [
        result_of("a", [False, False, True, False, False]),
        result_of("b", [False] * 5),
        result_of("c", [True] + [False] * 4),
    ]
    assert ev.generate_at_k(results, 5) == pytest.approx(100 * 2 / 3)
    assert ev.generate_at_k(results, 2) == pytest.approx(100 * 1 / 3)
    assert ev.generate_at_k([], 5) == 0.0


def test_generate_at_k_rejects_oversized_k():
    results = [result_of("a", [False] * 5)]
    with pytest.raises(ValueError, match="cannot score at k=6"):
        ev.generate_at_k(results, 6)
    with pytest.raises(ValueError, match="k must be >= 1"):
        ev.generate_at_k(results, 0)


def test_generate_at_k_tolerates_checker_error_shortfall():
    short = ev.ProblemResult(
        problem_id="err",
        generation_verdicts=(
            Verdict("err/0", Status.CHECKER_ERROR, "CheckerError: offline", ErrorClass("unclassified", "fallback")),
        ),
        solved_stage=ev.SolvedStage.UNSOLVED,
    )
    assert ev.generate_at_k([short, result_of("ok", [True] * 5)], 5) == 50.0


@settings(max_examples=60)
@given(
    st.lists(
        st.lists(st.booleans(), min_size=6, max_size=6), min_size=1, max_size=12
    )
)
def test_generate_at_k_monotone_in_k(matrix):
    results = [result_of(f"p{i}", row) for i, row in enumerate(matrix)]
    scores = [ev.generate_at_k(results, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(scores, scores[1:]))


def test_repair_at_k_is_disjoint_from_gen():
    results = [
        result_of("gen-solved", [True] * 5, [True] * 5),
        result_of("rep-solved", [False] * 5, [False, True, False, False, False]),
        result_of("unsolved", [False] * 5, [False] * 5),
        result_of("no-repair", [False] * 5),
    ]
    assert ev.repair_at_k(results, 5) == 25.0
    assert ev.repair_at_k(results, 1) == 0.0


def test_gen_plus_rep_is_exact_before_rounding():
    results = [
        result_of("a", [True] * 5),
        result_of("b", [False] * 5, [True] * 5),
        result_of("c", [False] * 5, [False] * 5),
    ]
    report = ev.build_report(ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5), 0, results)
    assert report.generate_at_k == pytest.approx(100 / 3)
    assert report.repair_at_k == pytest.approx(100 / 3)
    assert report.gen_plus_rep == report.generate_at_k + report.repair_at_k
    row = ev.render_table([("m", report.column_values())]).splitlines()[-1]
    assert "33.3" in row and "66.7" in row


def test_generate_at_5_matches_bernoulli_closed_form():
    rng = random.Random(20260816)
    p = 0.3
    n = 10_000
    results = [
        result_of(f"p{i:05d}", [rng.random() < p for _ in range(5)])
        for i in range(n)
    ]
    observed = ev.generate_at_k(results, 5)
    expected = 100 * (1 - (1 - p) ** 5)
    se = 100 * (expected / 100 * (1 - expected / 100) / n) ** 0.5
    assert abs(observed - expected) <= 3 * se


def test_error_histogram_orders_and_buckets():
    results = [
        result_of("a", [False] * 3),
        ev.ProblemResult(
            problem_id="b",
            generation_verdicts=(
                fail_verdict("b/0", "syntax error"),
                fail_verdict("b/1", "syntax error"),
                fail_verdict("b/2", "hole in term"),
            ),
            repair_verdicts=(fail_verdict("b/r0", "identifier not found"),),
            solved_stage=ev.SolvedStage.UNSOLVED,
        ),
    ]
    hist = ev.error_histogram(results)
    assert hist == (
        ("type mismatch", 3),
        ("syntax error", 2),
        ("hole in term", 1),
        ("identifier not found", 1),
    )
    assert ev.error_histogram(results, top_n=2) == (
        ("type mismatch", 3),
        ("syntax error", 2),
        ("other", 2),
    )
    assert ev.error_histogram(results, top_n=10) == hist


# --- running protocols ------------------------------------------------------


def test_gen5rep5_repair_rescues_unsolved():
    problems = [ctx_of(i) for i in range(4)]
    ledger = UsageLedger()
    report = ev.run_protocol(
        problems,
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
        backend=failing_backend(),
        repair_backend=passing_backend(),
        checker=MiniSpecBackend(),
        seed=11,
        ledger=ledger,
    )
    assert report.generate_at_k == 0.0
    assert report.repair_at_k == 100.0
    assert report.gen_plus_rep == 100.0
    assert report.generate_at_10 is None
    assert ledger.total_samples(ev.GENERATE_STAGE) == 20
    assert ledger.total_samples(ev.REPAIR_STAGE) == 20
    for result in report.results:
        assert result.solved_stage is ev.SolvedStage.REPAIR
        assert result.generation_calls == 5
        assert result.repair_calls == 5
        assert result.chosen_failed_index in range(5)


def test_solved_at_gen_skips_repair():
    ledger = UsageLedger()
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
        backend=passing_backend(),
        checker=MiniSpecBackend(),
        ledger=ledger,
    )
    assert report.generate_at_k == 100.0
    assert report.repair_at_k == 0.0
    assert ledger.total_samples(ev.REPAIR_STAGE) == 0
    assert report.results[0].solved_stage is ev.SolvedStage.GEN
    assert report.results[0].repair_calls == 0


def test_sample1on5_repairs_each_distinct_failure_once():
    # samples 0,1,2 share one wrong body; 3,4 share another
    def gen(req, i):
        name = name_in(req)
        return (
            f"let {name} x = x + true" if i < 3 else f"let {name} x = x - true"
        )

    ledger = UsageLedger()
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.SAMPLE1_ON5),
        backend=FnBackend(gen),
        repair_backend=passing_backend(),
        checker=MiniSpecBackend(),
        ledger=ledger,
    )
    assert ledger.total_samples(ev.REPAIR_STAGE) == 2
    assert ledger.total_requests(ev.REPAIR_STAGE) == 2
    result = report.results[0]
    assert result.repair_calls == 2
    assert result.solved_stage is ev.SolvedStage.REPAIR
    assert report.repair_at_k == 100.0


def test_gen10_never_repairs():
    ledger = UsageLedger()
    report = ev.run_protocol(
        [ctx_of(0), ctx_of(1)],
        ev.EvalProtocol(ev.ProtocolKind.GEN10),
        backend=failing_backend(),
        checker=MiniSpecBackend(),
        ledger=ledger,
    )
    assert ledger.total_samples(ev.GENERATE_STAGE) == 20
    assert ledger.total_samples(ev.REPAIR_STAGE) == 0
    assert report.generate_at_10 == 0.0
    assert all(r.repair_calls == 0 for r in report.results)


def test_func_gen_repair1_accounting():
    ledger = UsageLedger()
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.FUNC_GEN_REPAIR1),
        backend=failing_backend(),
        repair_backend=passing_backend(),
        checker=MiniSpecBackend(),
        ledger=ledger,
    )
    assert ledger.total_samples(ev.GENERATE_STAGE) == 1
    assert ledger.total_samples(ev.REPAIR_STAGE) == 1
    assert report.results[0].solved_stage is ev.SolvedStage.REPAIR
    assert report.results[0].chosen_failed_index == 0


def test_func_gen_repair1_timeout_skips_repair():
    ledger = UsageLedger()
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.FUNC_GEN_REPAIR1),
        backend=failing_backend(),
        checker=TimeoutChecker(),
        ledger=ledger,
    )
    result = report.results[0]
    assert result.generation_verdicts[0].status is Status.TIMEOUT
    assert result.repair_calls == 0
    assert ledger.total_samples(ev.REPAIR_STAGE) == 0


def test_no_code_response_becomes_synthesized_fail():
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.GEN10),
        backend=FnBackend(lambda req, i: "I am not sure how to prove this."),
        checker=MiniSpecBackend(),
    )
    verdict = report.results[0].generation_verdicts[0]
    assert verdict.status is Status.FAIL
    assert verdict.error_log == ev.NO_CODE_LOG
    assert verdict.error_class.label == "unclassified"
    assert report.results[0].generation_codes[0] is None


def test_backend_error_recorded_not_raised():
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
        backend=RaisingBackend(),
        checker=MiniSpecBackend(),
    )
    result = report.results[0]
    assert result.solved_stage is ev.SolvedStage.UNSOLVED
    assert result.generation_verdicts[0].status is Status.CHECKER_ERROR
    assert "backend offline" in result.generation_verdicts[0].error_log
    assert report.generate_at_k == 0.0


def test_checker_crash_recorded_per_problem():
    report = ev.run_protocol(
        [ctx_of(0), ctx_of(1)],
        ev.EvalProtocol(ev.ProtocolKind.GEN10),
        backend=passing_backend(),
        checker=RaisingChecker(),
    )
    assert len(report.results) == 2
    for result in report.results:
        assert result.generation_verdicts[0].status is Status.CHECKER_ERROR
        assert "checker crashed" in result.generation_verdicts[0].error_log


def test_repair_stage_error_appends_checker_error():
    report = ev.run_protocol(
        [ctx_of(0)],
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
        backend=failing_backend(),
        repair_backend=RaisingBackend(),
        checker=MiniSpecBackend(),
    )
    result = report.results[0]
    assert result.solved_stage is ev.SolvedStage.UNSOLVED
    assert result.generation_calls == 5
    assert result.repair_verdicts[-1].status is Status.CHECKER_ERROR


def test_run_protocol_rejects_duplicates_and_cross_kind():
    with pytest.raises(ValueError, match="duplicate problem ids"):
        ev.run_protocol(
            [ctx_of(0), ctx_of(0)],
            ev.EvalProtocol(ev.ProtocolKind.GEN10),
            backend=passing_backend(),
            checker=MiniSpecBackend(),
        )
    with pytest.raises(ValueError, match="cross_model_repair"):
        ev.run_protocol(
            [ctx_of(0)],
            ev.EvalProtocol(ev.ProtocolKind.CROSS_MODEL_REPAIR),
            backend=passing_backend(),
            checker=MiniSpecBackend(),
        )


def scrub(row):
    if isinstance(row, dict):
        return {k: scrub(v) for k, v in row.items() if k != "duration_ms"}
    if isinstance(row, list):
        return [scrub(v) for v in row]
    return row


def test_run_protocol_deterministic_across_runs_and_parallelism():
    problems = [ctx_of(i) for i in range(6)]

    def run(parallelism):
        return ev.run_protocol(
            problems,
            ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
            backend=failing_backend(),
            repair_backend=failing_backend(),
            checker=MiniSpecBackend(),
            seed=3,
            parallelism=parallelism,
        )

    first = scrub(run(4).to_row())
    second = scrub(run(4).to_row())
    serial = scrub(run(1).to_row())
    assert first == second == serial


def test_chosen_failed_index_depends_on_seed():
    problems = [ctx_of(0)]

    # five distinct failing bodies so the choice is visible
    def gen(req, i):
        name = name_in(req)
        return f"let {name} x = x + true + {i}"

    chosen = set()
    for seed in range(12):
        report = ev.run_protocol(
            problems,
            ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
            backend=FnBackend(gen),
            repair_backend=failing_backend(),
            checker=MiniSpecBackend(),
            seed=seed,
        )
        chosen.add(report.results[0].chosen_failed_index)
    assert len(chosen) > 1
    assert chosen <= set(range(5))


# --- report shape -----------------------------------------------------------


def test_report_round_trips_through_json():
    report = ev.run_protocol(
        [ctx_of(0), ctx_of(1)],
        ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5),
        backend=failing_backend(),
        repair_backend=passing_backend(),
        checker=MiniSpecBackend(),
        seed=5,
    )
    row = json.loads(json.dumps(report.to_row()))
    rebuilt = ev.EvalReport.from_row(row)
    assert rebuilt.generate_at_k == report.generate_at_k
    assert rebuilt.gen_plus_rep == report.gen_plus_rep
    assert rebuilt.error_histogram == report.error_histogram
    assert [r.problem_id for r in rebuilt.results] == [
        r.problem_id for r in report.results
    ]


def test_render_table_merges_runs_and_aligns():
    results5 = [
        result_of("a", [True] * 5),
        result_of("b", [False] * 5, [True] * 5),
    ]
    results10 = [
        result_of("a", [False] * 9 + [True]),
        result_of("b", [False] * 10),
    ]
    five = ev.build_report(ev.EvalProtocol(ev.ProtocolKind.GEN5_REP5), 0, results5)
    ten = ev.build_report(ev.EvalProtocol(ev.ProtocolKind.GEN10), 0, results10)
    merged = ev.merge_column_values(five, ten)
    assert merged["Generate@5"] == 50.0
    assert merged["Repair@5"] == 50.0
    assert merged["Gen+Rep (Total 10)"] == 100.0
    assert merged["Generate@10"] == 50.0

    table = ev.render_table(
        [("model-a", merged), ("model-b", ten.column_values())]
    )
    lines = table.splitlines()
    assert "Generate@5" in lines[0]
    assert "Gen+Rep (Total 10)" in lines[0]
    assert len({len(line) for line in lines[:2]}) == 1
    assert lines[-1].startswith("model-b")
    assert lines[-1].count("-") >= 3  # absent columns render as -


def test_problem_result_stage_invariants():
    with pytest.raises(ValueError, match="solved_stage"):
        ev.ProblemResult(
            problem_id="x",
            generation_verdicts=(fail_verdict("x/0"),),
            solved_stage=ev.SolvedStage.GEN,
        )
    with pytest.raises(ValueError, match="solved_stage"):
        ev.ProblemResult(
            problem_id="x",
            generation_verdicts=(pass_verdict("x/0"),),
            solved_stage=ev.SolvedStage.UNSOLVED,
        )
    with pytest.raises(ValueError, match="chosen_failed_index"):
        ev.ProblemResult(
            problem_id="x",
            generation_verdicts=(fail_verdict("x/0"),),
            chosen_failed_index=3,
            solved_stage=ev.SolvedStage.UNSOLVED,
        )


def test_problem_result_round_trip():
    result = result_of("p", [False, True], [])
    assert ev.ProblemResult.from_row(result.to_row()) == result


# --- harvesting ---------------------------------------------------------------


def harvested_result() -> ev.ProblemResult:
    gen_v = (
        fail_verdict("h/0"),
        pass_verdict("h/1"),
        fail_verdict("h/2"),
    )
    return ev.ProblemResult(
        problem_id="h",
        generation_verdicts=gen_v,
        solved_stage=ev.SolvedStage.GEN,
        generation_texts=("let f x = x + true", "let f x = x + x", "no code here"),
        generation_codes=("let f x = x + true", "let f x = x + x", None),
        declaration="val f : int -> int",
        ground_truth="let f x = 2 * x",
    )


def test_harvest_prefers_passing_sibling():
    problems = ev.harvest_repair_problems([harvested_result()])
    assert len(problems) == 2
    assert all(p.correct_solution == "let f x = x + x" for p in problems)
    assert all(p.source == "model" for p in problems)
    assert all(p.context_id == "h" for p in problems)
    assert problems[0].incorrect_solution == "let f x = x + true"
    # extraction failures fall back to the raw response text
    assert problems[1].incorrect_solution == "no code here"


def test_harvest_falls_back_to_ground_truth():
    result = result_of("g", [False, False])
    result = ev.ProblemResult(
        problem_id="g",
        generation_verdicts=result.generation_verdicts,
        solved_stage=ev.SolvedStage.UNSOLVED,
        generation_texts=("bad one", "bad two"),
        generation_codes=(None, None),
        declaration="val g : int -> int",
        ground_truth="let g x = x",
    )
    problems = ev.harvest_repair_problems([result])
    assert [p.correct_solution for p in problems] == ["let g x = x"] * 2


def test_harvest_without_any_solution_is_flagged_empty():
    result = ev.ProblemResult(
        problem_id="n",
        generation_verdicts=(fail_verdict("n/0"),),
        solved_stage=ev.SolvedStage.UNSOLVED,
        generation_texts=("let f x = x + true",),
        generation_codes=("let f x = x + true",),
        declaration="val f : int -> int",
        ground_truth="",
    )
    problems = ev.harvest_repair_problems([result])
    assert len(problems) == 1
    assert problems[0].correct_solution == ""


def test_harvest_skips_blank_responses():
    result = ev.ProblemResult(
        problem_id="b",
        generation_verdicts=(fail_verdict("b/0"),),
        solved_stage=ev.SolvedStage.UNSOLVED,
        generation_texts=("   ",),
        generation_codes=(None,),
        declaration="val f : int -> int",
        ground_truth="let f x = x",
    )
    assert ev.harvest_repair_problems([result]) == []


# --- cross-model repair ---------------------------------------------------------


def repair_problem(i: int, name: str) -> RepairProblem:
    return RepairProblem(
        type_declaration=f"val {name} : int -> int",
        incorrect_solution=f"let {name} x = x + true",
        error_message="type mismatch: expected int, got bool (line 1)",
        correct_solution=f"let {name} x = x + x",
        source="model",
        context_id=f"cm{i}",
    )


def test_cross_model_repair_scores_per_source():
    failures = {
        "model-a": [repair_problem(0, "fa0"), repair_problem(1, "fa1")],
        "model-b": [repair_problem(2, "fb0")],
    }
    ledger = UsageLedger()
    report = ev.cross_model_repair(
        failures,
        passing_backend(),
        MiniSpecBackend(),
        protocol=ev.EvalProtocol(ev.ProtocolKind.CROSS_MODEL_REPAIR, k_repair=2),
        ledger=ledger,
    )
    assert report == {
        "model-a": {"problems": 2, "repaired": 2, "repaired_pct": 100.0},
        "model-b": {"problems": 1, "repaired": 1, "repaired_pct": 100.0},
    }
    assert ledger.total_samples(ev.CROSS_REPAIR_STAGE) == 6


def test_cross_model_repair_counts_failures_and_errors_as_unrepaired():
    failures = {"model-a": [repair_problem(0, "fa0")]}
    unrepaired = ev.cross_model_repair(
        failures, failing_backend(), MiniSpecBackend()
    )
    assert unrepaired["model-a"]["repaired_pct"] == 0.0
    errored = ev.cross_model_repair(
        failures, RaisingBackend(), MiniSpecBackend()
    )
    assert errored["model-a"]["repaired_pct"] == 0.0


def test_cross_model_repair_empty_input():
    assert ev.cross_model_repair({}, passing_backend(), MiniSpecBackend()) == {}
    report = ev.cross_model_repair(
        {"m": []}, passing_backend(), MiniSpecBackend()
    )
    assert report == {"m": {"problems": 0, "repaired": 0, "repaired_pct": 0.0}}
