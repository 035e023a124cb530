"""Config parsing, validation, digests, and backend factories."""

from __future__ import annotations

import pytest

from proofforge.checker import CommandBackend, MiniSpecBackend
from proofforge.config import (
    ConfigError,
    PipelineConfig,
    config_digest,
    load_config,
    load_template_override,
    make_checker_backend,
    make_completion_backend,
)
from proofforge.jsonl import write_jsonl
from proofforge.llm_client import HttpBackend, ScriptedBackend


def write_config(tmp_path, text: str, name: str = "config.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def scripted_fixture(tmp_path, name: str = "fixture.jsonl"):
    path = tmp_path / name
    write_jsonl(path, [{"digest": "0" * 64, "samples": ["let x = 1"]}])
    return path


# Defaults


def test_defaults_without_a_file():
    config = PipelineConfig()
    assert config.caps.premises == 15
    assert config.caps.examples == 10
    assert config.caps.repair_examples == 3
    assert config.caps.budget == 4096
    assert config.temperatures.synth == 0.7
    assert config.temperatures.function_eval == 0.1
    assert config.temperatures.project_eval == 0.7
    assert config.similarity_threshold == 0.85
    assert config.per_key.per_problem == 3
    assert config.per_key.per_declaration == 2
    assert config.parallelism == 4
    assert config.checker["kind"] == "minispec"


def test_empty_file_gives_defaults(tmp_path):
    path = write_config(tmp_path, "")
    assert load_config(path).to_row() == PipelineConfig().to_row()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="does not exist"):
        load_config(tmp_path / "nope.yaml")


def test_invalid_yaml(tmp_path):
    path = write_config(tmp_path, "caps: [unclosed")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(path)


def test_top_level_must_be_mapping(tmp_path):
    path = write_config(tmp_path, "- just\n- a\n- list\n")
    with pytest.raises(ConfigError, match="top level must be a mapping"):
        load_config(path)


# Field validation names the offending field


def test_unknown_top_level_key(tmp_path):
    path = write_config(tmp_path, "similarty_threshold: 0.9\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "similarty_threshold"


def test_unknown_section_key(tmp_path):
    path = write_config(tmp_path, "caps:\n  premisses: 12\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "caps.premisses"


@pytest.mark.parametrize("bad", ["0", "-3", "true", "'12'", "2.5"])
def test_caps_must_be_positive_integers(tmp_path, bad):
    path = write_config(tmp_path, f"caps:\n  premises: {bad}\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "caps.premises"


def test_similarity_threshold_range(tmp_path):
    path = write_config(tmp_path, "similarity_threshold: 1.85\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "similarity_threshold"
    assert "1.85" in str(err.value)


def test_parallelism_must_be_positive(tmp_path):
    path = write_config(tmp_path, "parallelism: 0\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "parallelism"


def test_mixture_must_be_mapping(tmp_path):
    path = write_config(tmp_path, "mixture: [a, b]\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "mixture"


# Backend profiles


def test_scripted_backend_requires_fixture(tmp_path):
    path = write_config(tmp_path, "backends:\n  main:\n    kind: scripted\n")
    with pytest.raises(ConfigError, match="need a fixture path"):
        load_config(path)


def test_http_backend_requires_endpoint(tmp_path):
    path = write_config(tmp_path, "backends:\n  api:\n    kind: http\n")
    with pytest.raises(ConfigError, match="endpoint"):
        load_config(path)


def test_unknown_backend_kind(tmp_path):
    path = write_config(tmp_path, "backends:\n  odd:\n    kind: carrier_pigeon\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_api_key_never_lives_in_config(tmp_path):
    # credentials come from the environment, not the file
    text = (
        "backends:\n"
        "  api:\n"
        "    kind: http\n"
        "    endpoint: https://example.test/v1\n"
        "    api_key: sk-oops\n"
    )
    path = write_config(tmp_path, text)
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "backends.api.api_key"


def test_default_backend_must_exist(tmp_path):
    fixture = scripted_fixture(tmp_path)
    text = (
        "backends:\n"
        f"  main:\n    kind: scripted\n    fixture: {fixture.name}\n"
        "default_backend: other\n"
    )
    path = write_config(tmp_path, text)
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "default_backend"


def test_relative_fixture_resolves_against_config_dir(tmp_path):
    fixture = scripted_fixture(tmp_path)
    text = (
        "backends:\n"
        f"  main:\n    kind: scripted\n    fixture: {fixture.name}\n"
        "default_backend: main\n"
    )
    config = load_config(write_config(tmp_path, text))
    assert config.profile().fixture == str(fixture)


def test_profile_lookup(tmp_path):
    fixture = scripted_fixture(tmp_path)
    text = (
        "backends:\n"
        f"  main:\n    kind: scripted\n    fixture: {fixture.name}\n"
        f"  alt:\n    kind: scripted\n    fixture: {fixture.name}\n"
        "default_backend: main\n"
    )
    config = load_config(write_config(tmp_path, text))
    assert config.profile().name == "main"
    assert config.profile("alt").name == "alt"
    with pytest.raises(ConfigError, match="no backend profile named 'ghost'"):
        config.profile("ghost")


def test_profile_without_default():
    with pytest.raises(ConfigError, match="no default configured"):
        PipelineConfig().profile()


# Templates


def test_unknown_template_kind(tmp_path):
    tmpl = tmp_path / "t.txt"
    tmpl.write_text("hi", encoding="utf-8")
    path = write_config(tmp_path, f"templates:\n  mystery_kind: {tmpl.name}\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "templates.mystery_kind"


def test_template_file_must_exist(tmp_path):
    path = write_config(tmp_path, "templates:\n  NL2Code: missing.txt\n")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(path)


def test_template_override_wins(tmp_path):
    tmpl = tmp_path / "nl2code.txt"
    tmpl.write_text("custom {snippet}", encoding="utf-8")
    config = load_config(
        write_config(tmp_path, f"templates:\n  NL2Code: {tmpl.name}\n")
    )
    assert config.template_text("NL2Code") == "custom {snippet}"
    assert load_template_override(config, "NL2Code", "nl2code.txt") == "custom {snippet}"
    # unconfigured kinds fall back to the built-in file
    built_in = load_template_override(config, "new_definition", "project_definition.txt")
    assert "{type_declaration}" in built_in


# Checker section


def test_checker_defaults_to_minispec(tmp_path):
    config = load_config(write_config(tmp_path, "checker: {}\n"))
    assert config.checker["kind"] == "minispec"


def test_unknown_checker_kind(tmp_path):
    path = write_config(tmp_path, "checker:\n  kind: oracle9000\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == "checker.kind"


# Digest stability


def test_digest_stable_across_loads(tmp_path):
    fixture = scripted_fixture(tmp_path)
    text = (
        "backends:\n"
        f"  main:\n    kind: scripted\n    fixture: {fixture.name}\n"
        "default_backend: main\n"
        "parallelism: 2\n"
    )
    path = write_config(tmp_path, text)
    assert config_digest(load_config(path)) == config_digest(load_config(path))


def test_digest_changes_with_settings(tmp_path):
    a = load_config(write_config(tmp_path, "parallelism: 2\n", "a.yaml"))
    b = load_config(write_config(tmp_path, "parallelism: 3\n", "b.yaml"))
    assert config_digest(a) != config_digest(b)
    assert config_digest(a) == config_digest(PipelineConfig(parallelism=2))


# Factories


def test_make_scripted_backend(tmp_path):
    fixture = scripted_fixture(tmp_path)
    config = load_config(
        write_config(
            tmp_path,
            "backends:\n"
            f"  main:\n    kind: scripted\n    fixture: {fixture.name}\n"
            "default_backend: main\n",
        )
    )
    backend = make_completion_backend(config.profile())
    assert isinstance(backend, ScriptedBackend)
    assert backend.name == "main"


def test_make_http_backend(tmp_path):
    config = load_config(
        write_config(
            tmp_path,
            "backends:\n"
            "  api:\n"
            "    kind: http\n"
            "    endpoint: https://example.test/v1\n"
            "    concurrency: 2\n",
        )
    )
    backend = make_completion_backend(config.profile("api"))
    assert isinstance(backend, HttpBackend)
    assert backend.config.endpoint == "https://example.test/v1"
    assert backend.config.concurrency == 2
    backend.close()


def test_make_checker_backends():
    assert isinstance(make_checker_backend({"kind": "minispec"}), MiniSpecBackend)
    command = make_checker_backend(
        {"kind": "command", "command_template": "true {file}"}
    )
    assert isinstance(command, CommandBackend)
    with pytest.raises(ConfigError):
        make_checker_backend({"kind": "psychic"})
