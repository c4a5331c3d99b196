"""Tests for CLI commands."""

import json

import pytest
from typer.testing import CliRunner

from kvsim.cli import app
from kvsim.workload import TRACE_HEADER

runner = CliRunner()

try:
    err_runner = CliRunner(mix_stderr=False)
except TypeError:
    # Newer click keeps stderr separate unconditionally
    err_runner = CliRunner()


def error_payload(result):
    """The JSON error object printed as the last stderr line."""
    return json.loads(result.stderr.strip().splitlines()[-1])


@pytest.fixture
def config_file(tmp_path):
    trace = tmp_path / "single.trace"
    trace.write_text(f"{TRACE_HEADER}\n#duration 1.0\n0,0.0,512,10\n", encoding="utf-8")
    path = tmp_path / "smoke.json"
    path.write_text(
        json.dumps(
            {
                "instances": 2,
                "efficiency": {"compute_eff": 0.5, "mem_bw_eff": 1.0, "link_eff": 1.0},
                "policy": {"name": "accellm"},
                "trace_path": str(trace),
                "rates": [1.0],
                "duration_s": 1.0,
                "warmup_s": 0.0,
                "drain_s": 10.0,
                "engine": {"check_invariants": True},
            }
        ),
        encoding="utf-8",
    )
    return path


def write_config(tmp_path, data, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_run_command(tmp_path, config_file):
    """Test the run command on a single-request trace."""
    out = tmp_path / "out"
    result = runner.invoke(app, ["run", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0
    assert "Simulating accellm" in result.stdout
    assert "TTFT mean:" in result.stdout
    assert "Outputs written to" in result.stdout
    assert (out / "summary.csv").exists()
    assert (out / "meta.json").exists()
    assert not (out / "events.jsonl").exists()


def test_run_command_emit_events(tmp_path, config_file):
    """Test that --emit-events writes the event log."""
    out = tmp_path / "out"
    result = runner.invoke(
        app, ["run", "--config", str(config_file), "--out", str(out), "--emit-events"]
    )
    assert result.exit_code == 0
    assert (out / "events.jsonl").exists()


def test_run_command_is_reproducible(tmp_path, config_file):
    """Test that the same seed gives byte-identical summaries."""
    for name in ("a", "b"):
        result = runner.invoke(
            app,
            ["run", "--config", str(config_file), "--seed", "7", "--out", str(tmp_path / name)],
        )
        assert result.exit_code == 0
    first = (tmp_path / "a" / "summary.csv").read_bytes()
    second = (tmp_path / "b" / "summary.csv").read_bytes()
    assert first == second
    meta = json.loads((tmp_path / "a" / "meta.json").read_text(encoding="utf-8"))
    assert meta["seed"] == 7


def test_run_command_missing_config(tmp_path):
    """Test the run command with a non-existent config."""
    result = err_runner.invoke(app, ["run", "--config", str(tmp_path / "absent.json")])
    assert result.exit_code == 1
    payload = error_payload(result)
    assert payload["error"] == "config_error"
    assert "config file not found" in payload["message"]


def test_run_command_bad_trace(tmp_path):
    """Test that a malformed trace is reported with its line."""
    trace = tmp_path / "bad.trace"
    trace.write_text("0,0.0,10,10\n", encoding="utf-8")
    config = write_config(
        tmp_path, {"instances": 2, "trace_path": str(trace), "duration_s": 1.0, "warmup_s": 0.0}
    )
    result = err_runner.invoke(app, ["run", "--config", str(config), "--out", str(tmp_path)])
    assert result.exit_code == 1
    payload = error_payload(result)
    assert payload["error"] == "trace_format_error"
    assert payload["details"] == [{"line": 1}]


def test_sweep_command(tmp_path, config_file):
    """Test a single-point sweep."""
    out = tmp_path / "sweep"
    result = runner.invoke(
        app, ["sweep", "--config", str(config_file), "--out", str(out), "--workers", "1"]
    )
    assert result.exit_code == 0
    assert "Saturation points" in result.stdout
    assert (out / "sweep_long.csv").exists()
    assert (out / "points" / "accellm_1.json").exists()


def test_curves_command(tmp_path, config_file):
    """Test the curves command."""
    out = tmp_path / "curves"
    result = runner.invoke(app, ["curves", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0
    assert (out / "curves_prefill.csv").exists()
    assert (out / "curves_decode.csv").exists()


def test_resource_sweep_without_section(tmp_path, config_file):
    """Test that resource-sweep needs its config section."""
    result = err_runner.invoke(
        app, ["resource-sweep", "--config", str(config_file), "--out", str(tmp_path)]
    )
    assert result.exit_code == 1
    assert error_payload(result)["error"] == "config_error"


def test_validate_config(config_file):
    """Test validation of a good config."""
    result = runner.invoke(app, ["validate-config", "--config", str(config_file)])
    assert result.exit_code == 0
    assert "is valid" in result.stdout


def test_validate_config_invalid(tmp_path):
    """Test that an odd cluster under the paired policy is rejected."""
    config = write_config(tmp_path, {"instances": 3, "policy": {"name": "accellm"}})
    result = err_runner.invoke(app, ["validate-config", "--config", str(config)])
    assert result.exit_code == 1
    payload = error_payload(result)
    assert payload["error"] == "config_error"
    assert "even instance count required" in payload["message"]
    assert payload["details"]


def test_validate_config_schema():
    """Test printing the config schema."""
    result = runner.invoke(app, ["validate-config", "--schema"])
    assert result.exit_code == 0
    schema = json.loads(result.stdout)
    assert "policy" in schema["properties"]


def test_validate_config_needs_an_argument():
    """Test validate-config without --config or --schema."""
    result = err_runner.invoke(app, ["validate-config"])
    assert result.exit_code == 1
    assert error_payload(result)["error"] == "usage_error"


def test_profile_option(config_file):
    """Test loading a settings profile that does not exist."""
    result = err_runner.invoke(
        app, ["--profile", "nonexistent", "validate-config", "--config", str(config_file)]
    )
    assert result.exit_code == 1
    assert error_payload(result)["error"] == "file_not_found"
