"""Tests for experiment orchestration and output files."""

import csv
import json
from types import SimpleNamespace

import pytest

from kvsim.config import ConfigError, parse_experiment_config
from kvsim.engine import RawResults
from kvsim.experiments import (
    SUMMARY_COLUMNS,
    find_knee,
    resource_sweep,
    run_experiment,
    sweep,
    write_csv,
    write_curves,
)
from kvsim.workload import TRACE_HEADER


@pytest.fixture
def trace_file(tmp_path):
    path = tmp_path / "single.trace"
    path.write_text(f"{TRACE_HEADER}\n#duration 1.0\n0,0.0,512,10\n", encoding="utf-8")
    return path


@pytest.fixture
def smoke_config(trace_file):
    return parse_experiment_config(
        {
            "device": "H100",
            "instances": 2,
            "efficiency": {"compute_eff": 0.5, "mem_bw_eff": 1.0, "link_eff": 1.0},
            "policy": {"name": "accellm"},
            "trace_path": str(trace_file),
            "rates": [1.0],
            "duration_s": 1.0,
            "warmup_s": 0.0,
            "drain_s": 10.0,
            "engine": {"check_invariants": True},
        }
    )


@pytest.fixture
def small_sweep_config():
    return parse_experiment_config(
        {
            "device": "H100",
            "instances": 2,
            "workload": "light",
            "policies": ["accellm", "splitwise_static"],
            "rates": [1.0],
            "duration_s": 4.0,
            "warmup_s": 1.0,
            "drain_s": 60.0,
            "seed": 3,
        }
    )


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_run_experiment_writes_outputs(tmp_path, smoke_config):
    """Test that a single run writes report, summary, meta and raw results."""
    files = run_experiment(smoke_config, tmp_path / "out", emit_events=True)

    for key in ("report", "summary", "meta", "raw", "events"):
        assert files[key].exists()

    rows = read_rows(files["summary"])
    assert len(rows) == 1
    assert list(rows[0]) == SUMMARY_COLUMNS
    assert rows[0]["policy"] == "accellm"
    assert float(rows[0]["ttft_mean"]) > 0

    meta = json.loads(files["meta"].read_text(encoding="utf-8"))
    assert meta["config_hash"] == smoke_config.config_hash()
    assert meta["seed"] == 0
    assert meta["config"]["model"]["num_layers"] == 80

    report = json.loads(files["report"].read_text(encoding="utf-8"))
    assert report["report"]["completed"] == 1

    raw = RawResults.from_json(files["raw"].read_text(encoding="utf-8"))
    assert raw.requests[0].tokens_emitted == 10

    lines = files["events"].read_text(encoding="utf-8").splitlines()
    events = [json.loads(line) for line in lines]
    names = [e["event"] for e in events]
    startup = names.index("arrival")
    assert set(names[:startup]) <= {"set_role"}
    assert {"job_start", "job_done", "complete"} <= set(names)
    job_kinds = {e["kind"] for e in events if e["event"] == "job_start"}
    assert "prefill" in job_kinds


def test_run_experiment_is_reproducible(tmp_path, smoke_config):
    """Test that two runs of one config produce byte-identical tables."""
    first = run_experiment(smoke_config, tmp_path / "a")
    second = run_experiment(smoke_config, tmp_path / "b")
    assert first["summary"].read_bytes() == second["summary"].read_bytes()
    assert first["raw"].read_bytes() == second["raw"].read_bytes()


def test_sweep_writes_tables(tmp_path, small_sweep_config):
    """Test a two-policy sweep at one rate."""
    result = sweep(small_sweep_config, tmp_path, max_workers=1, show_progress=False)

    assert [(p.policy, p.rate) for p in result.points] == [
        ("accellm", 1.0),
        ("splitwise_static", 1.0),
    ]
    assert all(p.report is not None for p in result.points)
    for key in ("long", "summary", "comparison", "saturation", "meta"):
        assert result.files[key].exists()
    assert (tmp_path / "points" / "accellm_1.json").exists()

    comparison = read_rows(result.files["comparison"])
    assert {row["metric"] for row in comparison} >= {"ttft_mean", "cost_eff"}
    assert all(float(row["accellm_ratio"]) == 1.0 for row in comparison if row["accellm_ratio"])

    saturation = {row["policy"]: row for row in read_rows(result.files["saturation"])}
    assert saturation["accellm"]["saturation_rate"] == "1.0"
    assert result.saturation["accellm"][0] == 1.0


def test_sweep_is_reproducible(tmp_path, small_sweep_config):
    """Test that a sweep gives identical tables on a rerun."""
    first = sweep(small_sweep_config, tmp_path / "a", max_workers=1, show_progress=False)
    second = sweep(small_sweep_config, tmp_path / "b", max_workers=1, show_progress=False)
    for key in ("long", "summary", "comparison", "saturation"):
        assert first.files[key].read_bytes() == second.files[key].read_bytes()


def point(value, jct, cost_eff):
    report = SimpleNamespace(jct=SimpleNamespace(mean=jct), cost_efficiency=cost_eff)
    return SimpleNamespace(value=value, report=report)


def test_find_knee():
    """Test that the knee is the smallest value close to the best point."""
    points = [
        point(4.0, 10.0, 100.0),
        point(1.0, 30.0, 60.0),
        point(2.0, 10.05, 99.5),
        point(8.0, 10.0, 100.0),
    ]
    assert find_knee(points, tolerance=0.01) == 2.0
    assert find_knee(points, tolerance=0.0) == 4.0


def test_find_knee_without_results():
    """Test that failed points give no knee."""
    failed = SimpleNamespace(value=1.0, report=None)
    assert find_knee([failed]) is None
    assert find_knee([]) is None


def test_resource_sweep_records_failures(tmp_path):
    """Test that a capacity too small for the weights is recorded, not fatal."""
    config = parse_experiment_config(
        {
            "device": "H100",
            "instances": 2,
            "workload": "light",
            "policy": {"name": "accellm"},
            "arrival_process": "fixed-interval",
            "rates": [1.0],
            "duration_s": 2.0,
            "warmup_s": 0.0,
            "drain_s": 60.0,
            "resource_sweep": {"resource": "hbm_capacity", "values": [8e10, 3.6e10]},
        }
    )
    result = resource_sweep(config, tmp_path, show_progress=False)

    points = result["points"]
    assert [p.value for p in points] == [3.6e10, 8e10]
    assert points[0].report is None
    assert "ModelDoesNotFitError" in points[0].error
    assert points[1].report is not None
    assert result["knees"] == {"accellm": 8e10}

    rows = read_rows(result["files"]["sweep"])
    assert rows[0]["error"].startswith("ModelDoesNotFitError")
    assert rows[0]["jct_mean"] == ""


def test_resource_sweep_needs_section(tmp_path, smoke_config):
    """Test that a config without a resource_sweep section is rejected."""
    with pytest.raises(ConfigError, match="resource_sweep"):
        resource_sweep(smoke_config, tmp_path, show_progress=False)


def test_write_curves(tmp_path):
    """Test the curve tables for the configured grid."""
    config = parse_experiment_config(
        {"device": "910B2", "curves": {"lengths": [100, 1000], "batch_sizes": [1, 2, 4]}}
    )
    files = write_curves(config, tmp_path)

    prefill = read_rows(files["prefill"])
    decode = read_rows(files["decode"])
    assert len(prefill) == 6
    assert len(decode) == 6
    assert {row["phase"] for row in decode} == {"decode"}
    assert all(float(row["latency_s"]) > 0 for row in prefill)
    assert files["meta"].exists()


def test_write_csv_empty_fields(tmp_path):
    """Test that None values become empty fields and lines end with a newline."""
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b"], [{"a": 1, "b": None}])
    assert path.read_bytes() == b"a,b\n1,\n"
