"""Run configuration: one YAML file, environment variables for secrets only.

The config file never holds credentials. HTTP backends read their API key
from PROOFFORGE_API_KEY at construction time, so rotating a secret never
touches a config digest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .checker import CheckerConfig, CommandBackend, MiniSpecBackend
from .jsonl import sha256_text
from .llm_client import HttpBackend, HttpBackendConfig, ScriptedBackend
from .taskgen import PromptCaps, TaskKind, load_template

BACKEND_KINDS = ("scripted", "http")
CHECKER_KINDS = ("minispec", "command")


class ConfigError(ValueError):
    """Invalid configuration; names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class BackendProfile:
    """One named completion source: a replay fixture or an HTTP endpoint."""

    name: str
    kind: str
    fixture: str | None = None
    endpoint: str | None = None
    model: str | None = None
    concurrency: int = 4
    max_attempts: int = 5
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("backends", "backend profile name is empty")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(
                f"backends.{self.name}.kind",
                f"must be one of {BACKEND_KINDS}, got {self.kind!r}",
            )
        if self.kind == "scripted" and not self.fixture:
            raise ConfigError(
                f"backends.{self.name}.fixture", "scripted backends need a fixture path"
            )
        if self.kind == "http" and not self.endpoint:
            raise ConfigError(
                f"backends.{self.name}.endpoint", "http backends need an endpoint URL"
            )

    def to_row(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "fixture": self.fixture,
            "endpoint": self.endpoint,
            "model": self.model,
            "concurrency": self.concurrency,
            "max_attempts": self.max_attempts,
            "timeout_s": self.timeout_s,
        }


@dataclass(frozen=True)
class TemperatureSettings:
    synth: float = 0.7
    function_eval: float = 0.1
    project_eval: float = 0.7

    def __post_init__(self) -> None:
        for name in ("synth", "function_eval", "project_eval"):
            value = getattr(self, name)
            if not 0.0 <= value <= 2.0:
                raise ConfigError(
                    f"temperatures.{name}", f"must be in [0, 2], got {value}"
                )


@dataclass(frozen=True)
class PerKeyCaps:
    """Repair-dataset bounds: per generation problem and per declaration."""

    per_problem: int = 3
    per_declaration: int = 2

    def __post_init__(self) -> None:
        for name in ("per_problem", "per_declaration"):
            value = getattr(self, name)
            if value < 1:
                raise ConfigError(f"per_key.{name}", f"must be >= 1, got {value}")


@dataclass(frozen=True)
class MutationSettings:
    max_mutants: int = 8
    max_kept: int | None = None
    token_fallback: bool = True

    def __post_init__(self) -> None:
        if self.max_mutants < 1:
            raise ConfigError(
                "mutation.max_mutants", f"must be >= 1, got {self.max_mutants}"
            )
        if self.max_kept is not None and self.max_kept < 1:
            raise ConfigError(
                "mutation.max_kept", f"must be >= 1 or null, got {self.max_kept}"
            )


@dataclass(frozen=True)
class PipelineConfig:
    caps: PromptCaps = PromptCaps()
    temperatures: TemperatureSettings = TemperatureSettings()
    similarity_threshold: float = 0.85
    per_key: PerKeyCaps = PerKeyCaps()
    mutation: MutationSettings = MutationSettings()
    parallelism: int = 4
    synth_samples: int = 1
    backends: tuple[BackendProfile, ...] = ()
    default_backend: str | None = None
    checker: Mapping[str, Any] = field(default_factory=lambda: {"kind": "minispec"})
    templates: Mapping[str, str] = field(default_factory=dict)
    mixture: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        for name in ("premises", "examples", "repair_examples", "budget"):
            value = getattr(self.caps, name)
            if value < 1:
                raise ConfigError(f"caps.{name}", f"must be >= 1, got {value}")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError(
                "similarity_threshold",
                f"must be in [0, 1], got {self.similarity_threshold}",
            )
        if self.parallelism < 1:
            raise ConfigError("parallelism", f"must be >= 1, got {self.parallelism}")
        if self.synth_samples < 1:
            raise ConfigError(
                "synth_samples", f"must be >= 1, got {self.synth_samples}"
            )
        names = [profile.name for profile in self.backends]
        if len(set(names)) != len(names):
            raise ConfigError("backends", f"duplicate profile names in {names}")
        if self.default_backend is not None and self.default_backend not in names:
            raise ConfigError(
                "default_backend",
                f"{self.default_backend!r} is not a configured backend "
                f"(have {names or 'none'})",
            )
        kind = self.checker.get("kind")
        if kind not in CHECKER_KINDS:
            raise ConfigError(
                "checker.kind", f"must be one of {CHECKER_KINDS}, got {kind!r}"
            )
        known_kinds = {k.value for k in TaskKind} | {"new_definition"}
        for task_kind, path in self.templates.items():
            if task_kind not in known_kinds:
                raise ConfigError(
                    f"templates.{task_kind}",
                    f"unknown task kind (have {sorted(known_kinds)})",
                )
            if not Path(path).is_file():
                raise ConfigError(
                    f"templates.{task_kind}", f"template file {path} does not exist"
                )

    def profile(self, name: str | None = None) -> BackendProfile:
        """The named backend profile, or the configured default."""
        wanted = name or self.default_backend
        if wanted is None:
            raise ConfigError(
                "default_backend", "no backend requested and no default configured"
            )
        for profile in self.backends:
            if profile.name == wanted:
                return profile
        raise ConfigError(
            "backends", f"no backend profile named {wanted!r}"
        )

    def template_text(self, task_kind: str) -> str | None:
        """Override template text for a task kind, None for the built-in."""
        path = self.templates.get(task_kind)
        if path is None:
            return None
        return Path(path).read_text(encoding="utf-8")

    def to_row(self) -> dict[str, Any]:
        return {
            "caps": {
                "premises": self.caps.premises,
                "examples": self.caps.examples,
                "repair_examples": self.caps.repair_examples,
                "budget": self.caps.budget,
            },
            "temperatures": {
                "synth": self.temperatures.synth,
                "function_eval": self.temperatures.function_eval,
                "project_eval": self.temperatures.project_eval,
            },
            "similarity_threshold": self.similarity_threshold,
            "per_key": {
                "per_problem": self.per_key.per_problem,
                "per_declaration": self.per_key.per_declaration,
            },
            "mutation": {
                "max_mutants": self.mutation.max_mutants,
                "max_kept": self.mutation.max_kept,
                "token_fallback": self.mutation.token_fallback,
            },
            "parallelism": self.parallelism,
            "synth_samples": self.synth_samples,
            "backends": [profile.to_row() for profile in self.backends],
            "default_backend": self.default_backend,
            "checker": dict(self.checker),
            "templates": dict(self.templates),
            "mixture": dict(self.mixture) if self.mixture is not None else None,
        }


def config_digest(config: PipelineConfig) -> str:
    return sha256_text(json.dumps(config.to_row(), sort_keys=True))


def _section(raw: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, Mapping):
        raise ConfigError(name, f"must be a mapping, got {type(value).__name__}")
    return value


def _build(cls, section_name: str, raw: Mapping[str, Any]):
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"{section_name}.{sorted(unknown)[0]}",
            f"unknown key (allowed: {sorted(allowed)})",
        )
    return cls(**raw)


_TOP_LEVEL = {
    "caps",
    "temperatures",
    "similarity_threshold",
    "per_key",
    "mutation",
    "parallelism",
    "synth_samples",
    "backends",
    "default_backend",
    "checker",
    "templates",
    "mixture",
}


def load_config(path: Path | str) -> PipelineConfig:
    """Parse and validate a YAML config file.

    Relative fixture and template paths resolve against the config file's
    directory, so a config travels with its fixtures.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("<file>", "top level must be a mapping")
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")

    base = path.parent

    def resolve(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else base / candidate)

    backends = []
    raw_backends = _section(raw, "backends")
    for name in raw_backends:
        entry = raw_backends[name]
        if not isinstance(entry, Mapping):
            raise ConfigError(f"backends.{name}", "must be a mapping")
        allowed = {
            "kind",
            "fixture",
            "endpoint",
            "model",
            "concurrency",
            "max_attempts",
            "timeout_s",
        }
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(
                f"backends.{name}.{sorted(unknown)[0]}",
                f"unknown key (allowed: {sorted(allowed)})",
            )
        fixture = entry.get("fixture")
        backends.append(
            BackendProfile(
                name=name,
                kind=entry.get("kind", ""),
                fixture=resolve(fixture) if fixture else None,
                endpoint=entry.get("endpoint"),
                model=entry.get("model"),
                concurrency=int(entry.get("concurrency", 4)),
                max_attempts=int(entry.get("max_attempts", 5)),
                timeout_s=float(entry.get("timeout_s", 120.0)),
            )
        )

    caps_raw = dict(_section(raw, "caps"))
    templates = {
        kind: resolve(p) for kind, p in _section(raw, "templates").items()
    }
    checker = dict(_section(raw, "checker")) or {"kind": "minispec"}
    checker.setdefault("kind", "minispec")

    mixture = raw.get("mixture")
    if mixture is not None and not isinstance(mixture, Mapping):
        raise ConfigError("mixture", "must be a mapping")

    for key, value in caps_raw.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"caps.{key}", f"must be a positive integer, got {value!r}")
    try:
        caps = _build(PromptCaps, "caps", caps_raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("caps", str(exc)) from exc

    return PipelineConfig(
        caps=caps,
        temperatures=_build(
            TemperatureSettings, "temperatures", dict(_section(raw, "temperatures"))
        ),
        similarity_threshold=float(raw.get("similarity_threshold", 0.85)),
        per_key=_build(PerKeyCaps, "per_key", dict(_section(raw, "per_key"))),
        mutation=_build(MutationSettings, "mutation", dict(_section(raw, "mutation"))),
        parallelism=int(raw.get("parallelism", 4)),
        synth_samples=int(raw.get("synth_samples", 1)),
        backends=tuple(backends),
        default_backend=raw.get("default_backend"),
        checker=checker,
        templates=templates,
        mixture=dict(mixture) if mixture is not None else None,
    )


def make_completion_backend(profile: BackendProfile):
    """Instantiate the backend a profile describes."""
    if profile.kind == "scripted":
        return ScriptedBackend(profile.fixture, name=profile.name)
    return HttpBackend(
        HttpBackendConfig(
            endpoint=profile.endpoint,
            name=profile.name,
            max_attempts=profile.max_attempts,
            timeout_s=profile.timeout_s,
            concurrency=profile.concurrency,
        )
    )


def make_checker_backend(settings: Mapping[str, Any]):
    """Instantiate the checker a config's checker section describes."""
    kind = settings.get("kind", "minispec")
    if kind == "minispec":
        return MiniSpecBackend()
    if kind == "command":
        raw = {k: v for k, v in settings.items() if k != "kind"}
        return CommandBackend(CheckerConfig.from_mapping(raw))
    raise ConfigError("checker.kind", f"must be one of {CHECKER_KINDS}, got {kind!r}")


def load_template_override(config: PipelineConfig, task_kind: str, default_file: str) -> str:
    """The template text a stage should use for one task kind."""
    override = config.template_text(task_kind)
    if override is not None:
        return override
    return load_template(default_file)
