"""End-to-end pipeline runs through the command line interface.

The scripted backend fixture under tests/fixtures/pipeline replays a fixed
set of completions, so every stage is reproducible and the golden row
counts in golden_counts.json stay meaningful.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from proofforge.cli import main
from proofforge.manifest import RunStore

FIXTURES = Path(__file__).parent / "fixtures" / "pipeline"
CONFIG = FIXTURES / "config.yaml"
CONTEXTS = FIXTURES / "contexts.jsonl"
SRC_TREE = FIXTURES / "src_tree"
GOLDEN_COUNTS = json.loads((FIXTURES / "golden_counts.json").read_text())

SEED = "11"

STAGES = (
    ("ingest", ("--source", str(SRC_TREE))),
    ("synth-func", ()),
    ("synth-project", ("--contexts", str(CONTEXTS))),
    ("validate", ()),
    ("mutate", ()),
    ("dedup", ()),
    ("mix", ()),
    ("eval", ("--contexts", str(CONTEXTS), "--protocol", "Gen10")),
    ("report", ()),
)


def run_stage(store: Path, stage: str, *extra: str, run_id: str = "r1") -> int:
    return main(
        [
            stage,
            "--config",
            str(CONFIG),
            "--store",
            str(store),
            "--run-id",
            run_id,
            "--seed",
            SEED,
            *extra,
        ]
    )


def run_chain(store: Path) -> None:
    for stage, extra in STAGES:
        assert run_stage(store, stage, *extra) == 0, f"stage {stage} failed"


def output_digests(store: Path, run_id: str = "r1") -> dict[str, str]:
    digests: dict[str, str] = {}
    for manifest in RunStore(store).latest_manifests(run_id).values():
        digests.update(manifest.outputs)
    return digests


@pytest.fixture(scope="module")
def golden_store(tmp_path_factory) -> Path:
    store = tmp_path_factory.mktemp("golden-store")
    run_chain(store)
    return store


# Golden chain


def test_stage_counts_match_golden(golden_store):
    run_dir = golden_store / "runs" / "r1"
    counted = {
        ref: sum(1 for _ in (run_dir / ref).open(encoding="utf-8"))
        for ref in GOLDEN_COUNTS
    }
    assert counted == GOLDEN_COUNTS


def test_runs_are_byte_deterministic(golden_store, tmp_path):
    again = tmp_path / "again"
    run_chain(again)
    assert output_digests(again) == output_digests(golden_store)
    first = (golden_store / "runs" / "r1" / "eval" / "report.json").read_bytes()
    second = (again / "runs" / "r1" / "eval" / "report.json").read_bytes()
    assert first == second


def test_usage_ledger_stays_outside_the_manifest(golden_store):
    # request timestamps vary run to run, so the ledger is written for
    # inspection but never digested
    assert (golden_store / "runs" / "r1" / "synth-func" / "usage.jsonl").is_file()
    assert not any(ref.endswith("usage.jsonl") for ref in output_digests(golden_store))


def test_validate_preserves_passing_rows_verbatim(golden_store):
    run_dir = golden_store / "runs" / "r1"
    candidates = set(
        (run_dir / "synth-func" / "candidates.jsonl").read_text().splitlines()
    )
    passing = (run_dir / "validate" / "passing.jsonl").read_text().splitlines()
    assert passing
    assert all(line in candidates for line in passing)


def test_every_manifest_still_verifies(golden_store):
    store = RunStore(golden_store)
    manifests = store.latest_manifests("r1")
    assert len(manifests) == len(STAGES)
    for stage, manifest in manifests.items():
        assert store.verify_outputs("r1", manifest) == [], stage
        current = store.current_input_digests("r1", manifest.inputs)
        assert current == dict(manifest.inputs), stage


def test_report_prints_scores(golden_store, capsys):
    assert run_stage(golden_store, "report") == 0
    out = capsys.readouterr().out
    assert "generate@10" in out
    assert "problems: 4" in out


# Resume


def test_resume_skips_an_unchanged_run(golden_store, tmp_path, capsys):
    store = tmp_path / "copy"
    shutil.copytree(golden_store, store)
    assert run_stage(store, "resume") == 0
    out = capsys.readouterr().out
    assert out.count("skip:") == len(STAGES)
    assert "rerun" not in out


def test_resume_reruns_stages_downstream_of_changed_inputs(tmp_path, capsys):
    contexts = tmp_path / "contexts.jsonl"
    contexts.write_text(CONTEXTS.read_text(), encoding="utf-8")
    store = tmp_path / "store"
    assert run_stage(store, "eval", "--contexts", str(contexts), "--protocol", "Gen10") == 0
    assert run_stage(store, "report") == 0

    lines = contexts.read_text().splitlines(keepends=True)
    contexts.write_text("".join(lines[:-1]), encoding="utf-8")
    capsys.readouterr()
    assert run_stage(store, "resume") == 0
    out = capsys.readouterr().out
    assert "[eval] rerun: inputs changed" in out
    assert "[report] rerun: an earlier stage reruns" in out

    report = json.loads((store / "runs" / "r1" / "eval" / "report.json").read_text())
    assert report["n_problems"] == len(lines) - 1


def test_resume_refuses_a_corrupted_store(golden_store, tmp_path, capsys):
    store = tmp_path / "corrupt"
    shutil.copytree(golden_store, store)
    passing = store / "runs" / "r1" / "validate" / "passing.jsonl"
    passing.write_text(passing.read_text() + '{"task_id": "junk"}\n', encoding="utf-8")
    assert run_stage(store, "resume") == 1
    err = capsys.readouterr().err
    assert "refusing to silently recompute" in err


# Error reporting and exit codes


def test_missing_input_is_a_user_error(tmp_path, capsys):
    assert run_stage(tmp_path / "empty", "validate") == 1
    assert "expected artifact at" in capsys.readouterr().err


def test_bad_config_names_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("similarity_threshold: 1.85\n", encoding="utf-8")
    code = main(["ingest", "--config", str(bad), "--store", str(tmp_path / "s"),
                 "--source", str(SRC_TREE)])
    assert code == 1
    assert "similarity_threshold" in capsys.readouterr().err


def test_unknown_protocol_lists_the_valid_ones(tmp_path, capsys):
    code = run_stage(
        tmp_path / "s", "eval", "--contexts", str(CONTEXTS), "--protocol", "Gen42"
    )
    assert code == 1
    assert "Gen10" in capsys.readouterr().err


def test_unavailable_checker_is_an_environment_error(tmp_path, capsys):
    config = tmp_path / "config.yaml"
    config.write_text(
        "checker:\n"
        "  kind: command\n"
        "  command_template: definitely-not-a-real-binary {file}\n",
        encoding="utf-8",
    )
    store = tmp_path / "s"
    code = main(
        ["validate", "--config", str(config), "--store", str(store), "--run-id", "r1"]
    )
    assert code == 2
    assert "not available" in capsys.readouterr().err


def test_locked_store_refuses_a_second_run(tmp_path, capsys):
    store = tmp_path / "s"
    store.mkdir()
    (store / ".lock").write_text("pid=0\n", encoding="utf-8")
    assert run_stage(store, "ingest", "--source", str(SRC_TREE)) == 1
    assert "locked by another run" in capsys.readouterr().err


def test_dry_run_writes_nothing(tmp_path, capsys):
    store = tmp_path / "s"
    assert run_stage(store, "ingest", "--source", str(SRC_TREE), "--dry-run") == 0
    assert "dry-run" in capsys.readouterr().out
    assert not (store / "runs").exists()
    assert not (store / ".lock").exists()


def test_mix_rejects_unknown_dataset_overrides(golden_store, tmp_path, capsys):
    store = tmp_path / "copy"
    shutil.copytree(golden_store, store)
    code = run_stage(store, "mix", "--dataset", f"ghost={CONTEXTS}")
    assert code == 1
    assert "does not match a mixture component" in capsys.readouterr().err


def test_mix_rejects_malformed_dataset_argument(tmp_path, capsys):
    code = run_stage(tmp_path / "s", "mix", "--dataset", "no-equals-sign")
    assert code == 1
    assert "NAME=PATH" in capsys.readouterr().err


def test_module_entry_point():
    result = subprocess.run(
        [sys.executable, "-m", "proofforge.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0
    assert "ingest" in result.stdout
    assert "resume" in result.stdout
