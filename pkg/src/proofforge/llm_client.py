"""Completion backends: a chat-completions HTTP client and a scripted stub.

Downstream code consumes Completion values only, so swapping a live endpoint
for the deterministic scripted backend is purely a configuration change.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from .jsonl import JsonlError, dumps_row, read_jsonl, sha256_text
from .tokens import DEFAULT_TOKENIZER, Tokenizer

API_KEY_ENV = "PROOFFORGE_API_KEY"
FINISH_REASONS = ("stop", "length", "error")


class BackendError(RuntimeError):
    """A completion backend failed for good; carries the last HTTP status."""

    def __init__(self, message: str, status: int | None = None) -> None:
        super().__init__(message)
        self.status = status


class UnscriptedPromptError(KeyError):
    """The scripted fixture has no entry for a prompt digest."""


@dataclass(frozen=True)
class CompletionRequest:
    model_name: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    n_samples: int = 1
    max_tokens: int = 1024
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not self.messages:
            raise ValueError("messages must be non-empty")

    @property
    def prompt_text(self) -> str:
        """The exact prompt text that scripted fixtures digest."""
        return "\n".join(content for _, content in self.messages)


def prompt_digest(request: CompletionRequest) -> str:
    """Lowercase hex sha256 of the request's exact prompt text."""
    return sha256_text(request.prompt_text)


@dataclass(frozen=True)
class Completion:
    request_id: str
    sample_index: int
    text: str
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        if self.sample_index < 0:
            raise ValueError(f"sample_index must be >= 0, got {self.sample_index}")
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(
                f"finish_reason must be one of {FINISH_REASONS}, "
                f"got {self.finish_reason!r}"
            )


class CompletionBackend(Protocol):
    name: str

    def generate(self, request: CompletionRequest) -> list[Completion]: ...


class ScriptedBackend:
    """Replays completions from a fixture file; never fabricates.

    The fixture is JSONL of {"digest": hex, "samples": [str]}, keyed by the
    sha256 of the exact prompt text (message contents joined by newlines).
    Sample i of a request returns samples[i % len(samples)], so output is a
    pure function of (digest, sample_index, fixture).
    """

    def __init__(self, fixture_path: str | Path, name: str = "scripted") -> None:
        self.name = name
        self.fixture_path = Path(fixture_path)
        self._samples: dict[str, list[str]] = {}
        for lineno, row in read_jsonl(self.fixture_path):
            for key in ("digest", "samples"):
                if key not in row:
                    raise JsonlError(
                        self.fixture_path, lineno, f"fixture row missing {key!r}"
                    )
            if not row["samples"]:
                raise JsonlError(
                    self.fixture_path, lineno, "fixture row has empty samples"
                )
            self._samples[row["digest"]] = list(row["samples"])

    def __len__(self) -> int:
        return len(self._samples)

    def generate(self, request: CompletionRequest) -> list[Completion]:
        digest = prompt_digest(request)
        samples = self._samples.get(digest)
        if samples is None:
            head = request.prompt_text[:120].replace("\n", "\\n")
            raise UnscriptedPromptError(
                f"unscripted prompt: digest {digest} not in "
                f"{self.fixture_path.name} (prompt starts: {head!r})"
            )
        return [
            Completion(digest, i, samples[i % len(samples)], "stop")
            for i in range(request.n_samples)
        ]


@dataclass(frozen=True)
class HttpBackendConfig:
    endpoint: str
    api_key: str | None = None
    name: str = "http"
    max_attempts: int = 5
    backoff_base_s: float = 1.0
    timeout_s: float = 120.0
    concurrency: int = 4

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {self.concurrency}")


class HttpBackend:
    """Chat-completions over HTTP with bounded concurrency and retries.

    Retries (with 1s·2^k backoff plus jitter) apply to 429s, 5xx responses,
    and transport timeouts only; other client errors fail immediately. The
    API key comes from the config or the PROOFFORGE_API_KEY environment
    variable. `transport` and `sleep` are injectable for tests.
    """

    def __init__(
        self,
        config: HttpBackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.config = config
        self.name = config.name
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore = threading.Semaphore(config.concurrency)
        headers = {}
        api_key = config.api_key
        if api_key is None:
            api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            transport=transport, headers=headers, timeout=config.timeout_s
        )

    def close(self) -> None:
        self._client.close()

    def generate(self, request: CompletionRequest) -> list[Completion]:
        payload: dict[str, Any] = {
            "model": request.model_name,
            "messages": [
                {"role": role, "content": content}
                for role, content in request.messages
            ],
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
        }
        if request.seed_hint is not None:
            payload["seed"] = request.seed_hint

        last_error = "no attempt made"
        last_status: int | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                delay = self.config.backoff_base_s * (2 ** (attempt - 1))
                self._sleep(delay + self._rng.uniform(0, delay / 4))
            try:
                with self._semaphore:
                    response = self._client.post(self.config.endpoint, json=payload)
            except httpx.TimeoutException as exc:
                last_error, last_status = f"timeout: {exc}", None
                continue
            except httpx.TransportError as exc:
                last_error, last_status = f"transport error: {exc}", None
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                last_status = response.status_code
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"completion endpoint rejected the request: "
                    f"HTTP {response.status_code}: {response.text[:200]}",
                    response.status_code,
                )
            return self._parse(request, response)
        raise BackendError(
            f"completion failed after {self.config.max_attempts} attempts; "
            f"last error: {last_error}",
            last_status,
        )

    def _parse(
        self, request: CompletionRequest, response: httpx.Response
    ) -> list[Completion]:
        digest = prompt_digest(request)
        try:
            body = response.json()
            choices = body["choices"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        completions = []
        for idx, choice in enumerate(choices):
            finish = choice.get("finish_reason", "stop")
            if finish not in FINISH_REASONS:
                finish = "error"
            completions.append(
                Completion(
                    digest,
                    int(choice.get("index", idx)),
                    choice.get("message", {}).get("content", ""),
                    finish,
                )
            )
        return completions


@dataclass(frozen=True)
class UsageEntry:
    timestamp: float
    request_id: str
    model_name: str
    backend: str
    n_samples: int
    tokens_in: int
    tokens_out: int
    latency_ms: float
    stage: str | None = None
    problem_id: str | None = None

    def to_row(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "request_id": self.request_id,
            "model": self.model_name,
            "backend": self.backend,
            "n_samples": self.n_samples,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "latency_ms": round(self.latency_ms, 3),
            "stage": self.stage,
            "problem_id": self.problem_id,
        }


class UsageLedger:
    """Append-only call accounting; write failures warn but never block."""

    def __init__(
        self, path: str | Path | None = None, tokenizer: Tokenizer = DEFAULT_TOKENIZER
    ) -> None:
        self.path = Path(path) if path is not None else None
        self.tokenizer = tokenizer
        self.entries: list[UsageEntry] = []
        self._lock = threading.Lock()

    def record_usage(
        self,
        request: CompletionRequest,
        completions: Sequence[Completion],
        *,
        backend: str = "",
        latency_ms: float = 0.0,
        stage: str | None = None,
        problem_id: str | None = None,
    ) -> UsageEntry:
        entry = UsageEntry(
            timestamp=time.time(),
            request_id=prompt_digest(request),
            model_name=request.model_name,
            backend=backend,
            n_samples=len(completions),
            tokens_in=self.tokenizer.count(request.prompt_text),
            tokens_out=sum(self.tokenizer.count(c.text) for c in completions),
            latency_ms=latency_ms,
            stage=stage,
            problem_id=problem_id,
        )
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                        fh.write(dumps_row(entry.to_row()) + "\n")
                except OSError as exc:
                    warnings.warn(
                        f"usage ledger write failed ({exc}); continuing",
                        RuntimeWarning,
                        stacklevel=2,
                    )
        return entry

    def total_samples(self, stage: str | None = None) -> int:
        return sum(
            e.n_samples for e in self.entries if stage is None or e.stage == stage
        )

    def total_requests(self, stage: str | None = None) -> int:
        return sum(1 for e in self.entries if stage is None or e.stage == stage)

    def samples_by_problem(self, stage: str | None = None) -> dict[str, int]:
        out: dict[str, int] = {}
        for entry in self.entries:
            if stage is not None and entry.stage != stage:
                continue
            key = entry.problem_id or ""
            out[key] = out.get(key, 0) + entry.n_samples
        return out


def complete(
    backend: CompletionBackend,
    request: CompletionRequest,
    *,
    ledger: UsageLedger | None = None,
    stage: str | None = None,
    problem_id: str | None = None,
) -> list[Completion]:
    """Run one completion request and optionally account for it."""
    started = time.perf_counter()
    completions = backend.generate(request)
    latency_ms = (time.perf_counter() - started) * 1000.0
    if len(completions) != request.n_samples:
        raise BackendError(
            f"backend {backend.name!r} returned {len(completions)} completions "
            f"for n_samples={request.n_samples}"
        )
    if ledger is not None:
        ledger.record_usage(
            request,
            completions,
            backend=backend.name,
            latency_ms=latency_ms,
            stage=stage,
            problem_id=problem_id,
        )
    return completions
