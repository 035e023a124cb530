"""Checker backends and the check/batch_check entry points.

Two backends share one contract: the built-in MiniSpec verifier (in-process,
total, deterministic) and an external command backend that writes the
candidate to a per-invocation temp file and runs a configured command
template, e.g. ``fstar.exe --lax {file}`` or a test stub.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

from ..jsonl import sha256_text
from .minispec import check_source
from .taxonomy import Taxonomy, classify_error
from .verdicts import ErrorClass, Status, Verdict

DEFAULT_TIMEOUT_MS = 60_000


@dataclass(frozen=True)
class RawOutcome:
    """What a backend reports before classification and invariant handling."""

    status: Status
    log: str
    duration_ms: float


class CheckerBackend(Protocol):
    name: str

    def run(self, program: str, timeout_ms: int | None) -> RawOutcome: ...


class MiniSpecBackend:
    """In-process MiniSpec verification; ignores timeouts because it is total."""

    name = "minispec"

    def run(self, program: str, timeout_ms: int | None) -> RawOutcome:
        start = time.perf_counter()
        diagnostic = check_source(program)
        duration_ms = (time.perf_counter() - start) * 1000.0
        if diagnostic is None:
            return RawOutcome(Status.PASS, "", duration_ms)
        return RawOutcome(Status.FAIL, diagnostic, duration_ms)


@dataclass(frozen=True)
class CheckerConfig:
    """External checker invocation: {command_template, workdir, timeout_ms, env}."""

    command_template: str
    workdir: str | None = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    env: dict[str, str] = field(default_factory=dict)
    file_suffix: str = ".fst"

    def __post_init__(self) -> None:
        if "{file}" not in self.command_template:
            raise ValueError(
                "command_template must contain a {file} placeholder, got "
                f"{self.command_template!r}"
            )
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be > 0, got {self.timeout_ms}")

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> CheckerConfig:
        known = {"command_template", "workdir", "timeout_ms", "env", "file_suffix"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown checker config keys: {sorted(unknown)}")
        if "command_template" not in raw:
            raise ValueError("checker config requires command_template")
        return cls(
            command_template=raw["command_template"],
            workdir=raw.get("workdir"),
            timeout_ms=int(raw.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            env=dict(raw.get("env", {})),
            file_suffix=raw.get("file_suffix", ".fst"),
        )


class CommandBackend:
    """Runs the configured command on a temp file holding the candidate.

    Exit 0 is a Pass; nonzero is a Fail with merged stdout+stderr; a
    wall-clock overrun is a Timeout carrying whatever partial output was
    captured. Failure to spawn at all is a CheckerError, distinct from Fail.
    """

    def __init__(self, config: CheckerConfig) -> None:
        self.config = config
        self.name = f"command:{shlex.split(config.command_template)[0]}"

    def run(self, program: str, timeout_ms: int | None) -> RawOutcome:
        timeout_ms = timeout_ms or self.config.timeout_ms
        env = dict(os.environ)
        env.update(self.config.env)
        fd, path = tempfile.mkstemp(suffix=self.config.file_suffix, text=True)
        start = time.perf_counter()
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(program)
            argv = [
                arg.replace("{file}", path)
                for arg in shlex.split(self.config.command_template)
            ]
            try:
                proc = subprocess.run(
                    argv,
                    cwd=self.config.workdir,
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=timeout_ms / 1000.0,
                )
            except subprocess.TimeoutExpired as exc:
                duration_ms = (time.perf_counter() - start) * 1000.0
                partial = _merge_output(exc.stdout, exc.stderr)
                log = f"checker timed out after {timeout_ms} ms"
                if partial:
                    log = partial.rstrip("\n") + "\n" + log
                return RawOutcome(Status.TIMEOUT, log, duration_ms)
            except OSError as exc:
                duration_ms = (time.perf_counter() - start) * 1000.0
                return RawOutcome(
                    Status.CHECKER_ERROR,
                    f"failed to spawn checker {argv[0]!r}: {exc}",
                    duration_ms,
                )
            duration_ms = (time.perf_counter() - start) * 1000.0
            log = _merge_output(proc.stdout, proc.stderr)
            if proc.returncode == 0:
                return RawOutcome(Status.PASS, "", duration_ms)
            if not log.strip():
                # Nonzero exit with nothing on either stream: keep the Fail
                # but promote the empty log to an explicit note.
                log = (
                    f"CheckerError: checker exited with status {proc.returncode} "
                    "but produced no diagnostics"
                )
            return RawOutcome(Status.FAIL, log, duration_ms)
        finally:
            try:
                os.unlink(path)
            except OSError:
                pass


def _merge_output(stdout: str | bytes | None, stderr: str | bytes | None) -> str:
    parts = []
    for stream in (stdout, stderr):
        if isinstance(stream, bytes):
            stream = stream.decode("utf-8", errors="replace")
        if stream:
            parts.append(stream)
    return "".join(parts)


def assemble_program(code: str, context: Any = None) -> str:
    """Prefix code with the context's module openings, when given."""
    opened = list(getattr(context, "opened_modules", ()) or ())
    if not opened:
        return code
    header = "\n".join(f"open {module}" for module in opened)
    return f"{header}\n\n{code}"


def candidate_digest(program: str) -> str:
    return sha256_text(program)[:16]


def check(
    code: str,
    context: Any = None,
    backend: CheckerBackend | None = None,
    timeout_ms: int | None = None,
    *,
    candidate_id: str | None = None,
    taxonomy: Taxonomy | None = None,
) -> Verdict:
    """Check one candidate and return its classified Verdict.

    `context`, when given, contributes its opened_modules as a header. The
    candidate id defaults to a digest of the assembled program, so equal
    programs get equal ids.
    """
    if backend is None:
        raise ValueError("a checker backend is required")
    if timeout_ms is not None and timeout_ms <= 0:
        raise ValueError(f"timeout_ms must be > 0, got {timeout_ms}")
    program = assemble_program(code, context)
    outcome = backend.run(program, timeout_ms)
    cid = candidate_id or candidate_digest(program)
    if outcome.status is Status.PASS:
        return Verdict(cid, Status.PASS, "", None, outcome.duration_ms)
    log = outcome.log or f"checker reported {outcome.status.value} with no output"
    error_class: ErrorClass = classify_error(log, taxonomy)
    return Verdict(cid, outcome.status, log, error_class, outcome.duration_ms)


def batch_check(
    codes: Sequence[str],
    backend: CheckerBackend,
    *,
    parallelism: int = 4,
    timeout_ms: int | None = None,
    contexts: Sequence[Any] | None = None,
    taxonomy: Taxonomy | None = None,
) -> list[Verdict]:
    """Order-preserving parallel map of check(); at most `parallelism` live checks."""
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    if contexts is not None and len(contexts) != len(codes):
        raise ValueError(
            f"got {len(contexts)} contexts for {len(codes)} codes"
        )
    if not codes:
        return []

    def one(idx: int) -> Verdict:
        ctx = contexts[idx] if contexts is not None else None
        return check(
            codes[idx], ctx, backend, timeout_ms, taxonomy=taxonomy
        )

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, range(len(codes))))


def verify_minispec(program: str, *, candidate_id: str | None = None) -> Verdict:
    """Check a program with the built-in MiniSpec verifier."""
    return check(
        program, backend=MiniSpecBackend(), candidate_id=candidate_id
    )
