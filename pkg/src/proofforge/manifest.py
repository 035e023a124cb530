"""Content-addressed run store: stage artifacts, manifests, resume planning.

Layout: <root>/runs/<run_id>/<stage>/ holds that stage's JSONL artifacts
plus a manifest.json; every manifest is also appended to the run's
manifest-chain.jsonl, which is the append-only record resume reads. All
digests are sha256 over file bytes, so "unchanged" means byte-identical.
"""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .jsonl import dumps_row, read_jsonl, sha256_file, sha256_text, write_jsonl

STAGE_ORDER = (
    "ingest",
    "synth-func",
    "synth-project",
    "mutate",
    "validate",
    "dedup",
    "mix",
    "eval",
    "report",
)

CHAIN_FILE = "manifest-chain.jsonl"
MANIFEST_FILE = "manifest.json"
LOCK_FILE = ".lock"


class LockError(RuntimeError):
    """Another run holds the store lock."""


class ResumeError(RuntimeError):
    """The manifest chain and the store contents disagree."""


def tool_versions() -> dict[str, str]:
    return {"proofforge": __version__, "python": platform.python_version()}


def tree_digest(root: Path | str, extensions: Iterable[str] | None = None) -> str:
    """Order-independent digest of a directory's files (path + content)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    wanted = set(extensions) if extensions is not None else None
    entries = []
    for path in sorted(root.rglob("*"), key=lambda p: p.relative_to(root).as_posix()):
        if not path.is_file():
            continue
        if wanted is not None and path.suffix not in wanted:
            continue
        entries.append(f"{path.relative_to(root).as_posix()}\x1f{sha256_file(path)}")
    return sha256_text("\n".join(entries))


@dataclass(frozen=True)
class StageManifest:
    run_id: str
    stage: str
    config_digest: str
    inputs: Mapping[str, str]
    outputs: Mapping[str, str]
    seed: int
    created_at: float
    tool_versions: Mapping[str, str] = field(default_factory=tool_versions)
    argv: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.run_id:
            raise ValueError("run_id is empty")
        if self.stage not in STAGE_ORDER:
            raise ValueError(
                f"unknown stage {self.stage!r} (expected one of {STAGE_ORDER})"
            )

    def to_row(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "config_digest": self.config_digest,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "seed": self.seed,
            "created_at": self.created_at,
            "tool_versions": dict(sorted(self.tool_versions.items())),
            "argv": list(self.argv),
        }

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> StageManifest:
        return cls(
            run_id=row["run_id"],
            stage=row["stage"],
            config_digest=row["config_digest"],
            inputs=dict(row.get("inputs", {})),
            outputs=dict(row.get("outputs", {})),
            seed=int(row.get("seed", 0)),
            created_at=float(row.get("created_at", 0.0)),
            tool_versions=dict(row.get("tool_versions", {})),
            argv=tuple(row.get("argv", ())),
        )


class RunStore:
    """Filesystem layout and digest bookkeeping for pipeline runs."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def stage_dir(self, run_id: str, stage: str) -> Path:
        return self.run_dir(run_id) / stage

    def artifact_path(self, run_id: str, ref: str) -> Path:
        """Resolve an artifact reference: absolute path, or stage/name."""
        candidate = Path(ref)
        if candidate.is_absolute():
            return candidate
        return self.run_dir(run_id) / ref

    def write_rows(
        self, run_id: str, stage: str, name: str, rows: Iterable[Mapping[str, Any]]
    ) -> tuple[Path, str]:
        """Write one JSONL artifact; returns its path and byte digest."""
        path = self.stage_dir(run_id, stage) / name
        write_jsonl(path, rows)
        return path, sha256_file(path)

    def write_text(self, run_id: str, stage: str, name: str, text: str) -> tuple[Path, str]:
        path = self.stage_dir(run_id, stage) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
        return path, sha256_file(path)

    def read_rows(self, run_id: str, ref: str) -> list[dict]:
        path = self.artifact_path(run_id, ref)
        if not path.is_file():
            raise FileNotFoundError(f"expected artifact at {path}")
        return [row for _, row in read_jsonl(path)]

    def write_manifest(self, manifest: StageManifest) -> Path:
        """Write the stage manifest and append it to the run's chain."""
        stage_dir = self.stage_dir(manifest.run_id, manifest.stage)
        stage_dir.mkdir(parents=True, exist_ok=True)
        row = manifest.to_row()
        (stage_dir / MANIFEST_FILE).write_text(
            dumps_row(row) + "\n", encoding="utf-8", newline="\n"
        )
        chain = self.run_dir(manifest.run_id) / CHAIN_FILE
        chain.parent.mkdir(parents=True, exist_ok=True)
        with chain.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_row(row) + "\n")
        return stage_dir / MANIFEST_FILE

    def read_chain(self, run_id: str) -> list[StageManifest]:
        chain = self.run_dir(run_id) / CHAIN_FILE
        if not chain.is_file():
            return []
        return [StageManifest.from_row(row) for _, row in read_jsonl(chain)]

    def latest_manifests(self, run_id: str) -> dict[str, StageManifest]:
        """Last recorded manifest per stage, in first-recorded stage order."""
        latest: dict[str, StageManifest] = {}
        for manifest in self.read_chain(run_id):
            latest[manifest.stage] = manifest
        return latest

    def verify_outputs(self, run_id: str, manifest: StageManifest) -> list[str]:
        """Output refs whose current bytes disagree with the manifest."""
        bad = []
        for ref, digest in manifest.outputs.items():
            path = self.artifact_path(run_id, ref)
            if not path.is_file() or sha256_file(path) != digest:
                bad.append(ref)
        return sorted(bad)

    def current_input_digests(
        self, run_id: str, refs: Mapping[str, str]
    ) -> dict[str, str | None]:
        """Recompute digests for a manifest's input refs; None if missing."""
        out: dict[str, str | None] = {}
        for ref in refs:
            if ref.startswith("tree:"):
                target = Path(ref[len("tree:") :])
                out[ref] = tree_digest(target) if target.is_dir() else None
                continue
            path = self.artifact_path(run_id, ref)
            out[ref] = sha256_file(path) if path.is_file() else None
        return out


class RunLock:
    """One pipeline run per store directory, via an O_EXCL lock file."""

    def __init__(self, store: RunStore):
        self.path = store.root / LOCK_FILE
        self._held = False

    def __enter__(self) -> RunLock:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"store is locked by another run (lock file {self.path}); "
                "remove the file if that run is dead"
            ) from None
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(f"pid={os.getpid()} time={time.time()}\n")
        self._held = True
        return self

    def __exit__(self, *exc_info) -> None:
        if self._held:
            try:
                self.path.unlink()
            except OSError:
                pass
            self._held = False


@dataclass(frozen=True)
class StagePlan:
    stage: str
    action: str  # "skip" | "rerun"
    reason: str
    argv: tuple[str, ...] = ()


def plan_resume(store: RunStore, run_id: str) -> list[StagePlan]:
    """Decide, stage by stage, what a resumed run must redo.

    A stage is skipped when its recorded inputs and outputs are all still
    byte-identical. Changed inputs mark the stage and everything after it
    for rerun. Matching inputs with missing or altered outputs mean the
    store was corrupted; that is a refusal, not a recompute.
    """
    manifests = store.latest_manifests(run_id)
    if not manifests:
        raise ResumeError(f"run {run_id!r} has no manifest chain to resume from")
    plans: list[StagePlan] = []
    upstream_rerun = False
    for stage, manifest in manifests.items():
        if upstream_rerun:
            plans.append(
                StagePlan(stage, "rerun", "an earlier stage reruns", manifest.argv)
            )
            continue
        current = store.current_input_digests(run_id, manifest.inputs)
        changed = sorted(
            ref
            for ref, digest in manifest.inputs.items()
            if current.get(ref) != digest
        )
        if changed:
            upstream_rerun = True
            plans.append(
                StagePlan(
                    stage,
                    "rerun",
                    f"inputs changed: {', '.join(changed)}",
                    manifest.argv,
                )
            )
            continue
        bad_outputs = store.verify_outputs(run_id, manifest)
        if bad_outputs:
            raise ResumeError(
                f"stage {stage!r} of run {run_id!r} has matching inputs but its "
                f"outputs no longer match the manifest: {', '.join(bad_outputs)}. "
                "The store is corrupted; refusing to silently recompute."
            )
        plans.append(StagePlan(stage, "skip", "inputs and outputs unchanged", manifest.argv))
    return plans
