"""Tests for configuration module."""

import json
from pathlib import Path

import pytest

from kvsim.config import (
    ConfigError,
    Settings,
    clear_settings_cache,
    experiment_config_schema,
    get_settings,
    load_experiment_config,
    parse_experiment_config,
)


def test_settings_defaults():
    """Test default settings values."""
    settings = Settings()
    assert settings.app_name == "kvsim"
    assert settings.app_version == "0.1.0"
    assert settings.log_level == "WARNING"
    assert settings.effective_log_level == "WARNING"
    assert settings.max_workers == 1
    assert settings.show_progress is True
    assert settings.output_dir == Path("results")


def test_settings_from_environment(monkeypatch):
    """Test that KVSIM_LOG overrides the configured log level."""
    monkeypatch.setenv("KVSIM_LOG", "debug")
    monkeypatch.setenv("KVSIM_MAX_WORKERS", "6")
    settings = Settings()
    assert settings.effective_log_level == "DEBUG"
    assert settings.max_workers == 6


def test_get_settings_cached():
    """Test that get_settings returns cached instance until the cache is cleared."""
    settings1 = get_settings()
    settings2 = get_settings()
    assert settings1 is settings2
    clear_settings_cache()
    assert get_settings() is not settings1


def test_settings_from_yaml(tmp_path):
    """Test loading settings from a YAML file."""
    path = tmp_path / "settings.yaml"
    path.write_text("log_level: INFO\nmax_workers: 3\nshow_progress: false\n", encoding="utf-8")
    settings = Settings.from_yaml(path)
    assert settings.log_level == "INFO"
    assert settings.max_workers == 3
    assert settings.show_progress is False


def test_settings_from_missing_yaml(tmp_path):
    """Test that a missing settings file is reported."""
    with pytest.raises(FileNotFoundError):
        Settings.from_yaml(tmp_path / "absent.yaml")


def test_parse_defaults():
    """Test the defaults of an empty experiment config."""
    config = parse_experiment_config({})
    assert config.instances == 4
    assert config.policy.name == "accellm"
    assert config.sweep_policies() == ["accellm"]
    assert config.resolved_model().num_layers == 80
    assert config.resolved_device().name == "H100"
    assert len(config.cluster()) == 4


@pytest.mark.parametrize(
    "data, message",
    [
        ({"instances": 3}, "even instance count required"),
        ({"instances": 1, "policy": {"name": "splitwise_static"}}, "at least 2 instances"),
        ({"warmup_s": 10.0, "duration_s": 10.0}, "warmup_s"),
        ({"rates": []}, "rates must not be empty"),
        ({"rates": [1.0, -1.0]}, "non-negative"),
        ({"model": "gpt-5"}, "Unknown model preset"),
        ({"device": "A100"}, "Unknown device preset"),
    ],
)
def test_parse_rejects_invalid(data, message):
    """Test cross-field validation of experiment configs."""
    with pytest.raises(ConfigError, match=message) as exc:
        parse_experiment_config(data)
    assert exc.value.details


def test_parse_accepts_odd_cluster_for_baselines():
    """Test that an odd instance count is fine without the paired policy."""
    config = parse_experiment_config({"instances": 3, "policy": {"name": "unified"}})
    assert config.instances == 3


def test_parse_rejects_unknown_keys():
    """Test that unknown keys are reported with their location."""
    with pytest.raises(ConfigError) as exc:
        parse_experiment_config({"instances": 2, "engine": {"budget": 10}})
    detail = exc.value.details[0]
    assert detail["loc"] == "engine.budget"
    assert detail["type"] == "extra_forbidden"


def test_config_hash():
    """Test that the config hash is stable and sensitive to every field."""
    first = parse_experiment_config({"seed": 1})
    again = parse_experiment_config({"seed": 1, "model": "llama-2-70b"})
    other = parse_experiment_config({"seed": 2})
    assert first.config_hash() == again.config_hash()
    assert first.config_hash() != other.config_hash()
    assert len(first.config_hash()) == 64


def test_load_json_and_yaml(tmp_path):
    """Test loading the same config from JSON and YAML."""
    data = {"instances": 2, "policy": {"name": "accellm"}, "rates": [1.0, 2.0]}
    json_path = tmp_path / "exp.json"
    json_path.write_text(json.dumps(data), encoding="utf-8")
    yaml_path = tmp_path / "exp.yaml"
    yaml_path.write_text("instances: 2\npolicy:\n  name: accellm\nrates: [1.0, 2.0]\n")

    from_json = load_experiment_config(json_path)
    from_yaml = load_experiment_config(yaml_path)
    assert from_json.config_hash() == from_yaml.config_hash()


@pytest.mark.parametrize(
    "content, message",
    [
        ("{not json", "cannot parse"),
        ("[1, 2]", "config root must be an object"),
    ],
)
def test_load_rejects_bad_files(tmp_path, content, message):
    """Test unreadable config files."""
    path = tmp_path / "exp.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError, match=message):
        load_experiment_config(path)


def test_load_missing_file(tmp_path):
    """Test that a missing config file is a config error."""
    with pytest.raises(ConfigError, match="config file not found"):
        load_experiment_config(tmp_path / "absent.json")


def test_schema():
    """Test the published config schema."""
    schema = experiment_config_schema()
    assert "policy" in schema["properties"]
    assert "rates" in schema["properties"]
    json.dumps(schema)
