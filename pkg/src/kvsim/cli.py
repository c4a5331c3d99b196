"""CLI interface for kvsim using Typer."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import typer

from kvsim.config import (
    ConfigError,
    ExperimentConfig,
    experiment_config_schema,
    get_settings,
    load_experiment_config,
)
from kvsim.engine import SimulationError
from kvsim.experiments import resource_sweep, run_experiment, sweep, write_curves
from kvsim.logger import get_logger
from kvsim.metrics import FingerprintMismatchError
from kvsim.perfmodel import ModelDoesNotFitError
from kvsim.workload import TraceFormatError

app = typer.Typer(
    name="kvsim",
    help="Discrete-event simulator for multi-instance LLM inference clusters.",
    add_completion=False,
)

logger = get_logger(__name__)


def _error(kind: str, message: str, details: Optional[List[Dict[str, Any]]] = None) -> typer.Exit:
    """Print a machine-readable error to stderr and return the exit to raise."""
    typer.echo(
        json.dumps({"error": kind, "message": message, "details": details or []}, sort_keys=True),
        err=True,
    )
    return typer.Exit(1)


def _domain_error(e: Exception) -> typer.Exit:
    if isinstance(e, ConfigError):
        return _error("config_error", str(e), e.details)
    if isinstance(e, TraceFormatError):
        return _error("trace_format_error", str(e), [{"line": e.line_no}])
    if isinstance(e, ModelDoesNotFitError):
        return _error("model_does_not_fit", str(e))
    if isinstance(e, FingerprintMismatchError):
        return _error("fingerprint_mismatch", str(e))
    if isinstance(e, SimulationError):
        return _error("simulation_error", str(e))
    if isinstance(e, FileNotFoundError):
        return _error("file_not_found", str(e))
    return _error("invalid_input", str(e))


DOMAIN_ERRORS = (
    ConfigError,
    TraceFormatError,
    ModelDoesNotFitError,
    FingerprintMismatchError,
    SimulationError,
    FileNotFoundError,
    ValueError,
)


def _load_config(config: Path, seed: Optional[int]) -> ExperimentConfig:
    try:
        experiment = load_experiment_config(config)
    except ConfigError as e:
        raise _domain_error(e)
    if seed is not None:
        experiment = experiment.model_copy(update={"seed": seed})
    logger.info(f"Loaded experiment config {config} (hash {experiment.config_hash()[:12]})")
    return experiment


def _output_dir(out: Optional[Path], experiment: ExperimentConfig) -> Path:
    if out is not None:
        return out
    if experiment.output_dir is not None:
        return experiment.output_dir
    return get_settings().output_dir


def _fmt(value: Optional[float], scale: float = 1.0, unit: str = "") -> str:
    if value is None:
        return "n/a"
    return f"{value * scale:.2f}{unit}"


@app.command()
def run(
    config: Path = typer.Option(..., "--config", "-c", help="Experiment config (JSON or YAML)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    emit_events: bool = typer.Option(False, "--emit-events", help="Write events.jsonl"),
) -> None:
    """
    Simulate the configured policy at the first configured rate.

    Writes report.json, summary.csv, meta.json and raw.json to the output directory.
    """
    experiment = _load_config(config, seed)
    out_dir = _output_dir(out, experiment)
    rate = experiment.rates[0]

    typer.echo(
        f"🚀 Simulating {experiment.policy.name} at {rate:g} req/s "
        f"on {experiment.instances} instances"
    )
    try:
        files = run_experiment(experiment, out_dir, emit_events=emit_events)
    except DOMAIN_ERRORS as e:
        logger.error(f"Run failed: {e}")
        raise _domain_error(e)

    report = json.loads(files["report"].read_text(encoding="utf-8"))["report"]
    typer.echo(f"   TTFT mean: {_fmt(report['ttft']['mean'], 1e3, ' ms')}")
    typer.echo(f"   TBT mean:  {_fmt(report['tbt']['mean'], 1e3, ' ms')}")
    typer.echo(f"   JCT mean:  {_fmt(report['jct']['mean'], 1.0, ' s')}")
    typer.echo(f"   Cost efficiency: {_fmt(report['cost_efficiency'], 1.0, ' tok/s/instance')}")
    if report["incomplete"]:
        typer.echo(f"⚠️  {report['incomplete']} request(s) incomplete at the horizon")
    typer.echo(f"✅ Outputs written to {out_dir}")


@app.command("sweep")
def sweep_cmd(
    config: Path = typer.Option(..., "--config", "-c", help="Experiment config (JSON or YAML)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    workers: Optional[int] = typer.Option(
        None, "--workers", "-w", help="Parallel worker processes"
    ),
) -> None:
    """
    Sweep every configured policy over every configured rate.

    Writes sweep_long.csv, summary.csv, comparison.csv, saturation.csv and one
    JSON file per point under points/.
    """
    experiment = _load_config(config, seed)
    out_dir = _output_dir(out, experiment)
    policies = experiment.sweep_policies()

    typer.echo(f"📈 Sweeping {len(policies)} policy(ies) x {len(experiment.rates)} rate(s)")
    try:
        result = sweep(experiment, out_dir, max_workers=workers)
    except DOMAIN_ERRORS as e:
        logger.error(f"Sweep failed: {e}")
        raise _domain_error(e)

    failed = [p for p in result.points if p.error]
    typer.echo("\n📊 Saturation points:")
    for policy, (rate, value) in result.saturation.items():
        if rate is None:
            typer.echo(f"   {policy}: no successful points")
        else:
            typer.echo(f"   {policy}: {rate:g} req/s ({value:.1f} tok/s/instance)")
    if failed:
        typer.echo(f"⚠️  {len(failed)} point(s) failed; see {out_dir / 'sweep_long.csv'}")
    typer.echo(f"✅ Outputs written to {out_dir}")


@app.command()
def curves(
    config: Path = typer.Option(..., "--config", "-c", help="Experiment config (JSON or YAML)"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
) -> None:
    """
    Emit prefill/decode latency and throughput tables from the performance model.
    """
    experiment = _load_config(config, None)
    out_dir = _output_dir(out, experiment)
    try:
        files = write_curves(experiment, out_dir)
    except DOMAIN_ERRORS as e:
        raise _domain_error(e)
    for name, path in files.items():
        if name != "meta":
            typer.echo(f"📄 {name}: {path}")
    typer.echo(f"✅ Outputs written to {out_dir}")


@app.command("resource-sweep")
def resource_sweep_cmd(
    config: Path = typer.Option(..., "--config", "-c", help="Experiment config (JSON or YAML)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
) -> None:
    """
    Vary HBM capacity or link bandwidth and report each policy's knee.
    """
    experiment = _load_config(config, seed)
    out_dir = _output_dir(out, experiment)
    try:
        result = resource_sweep(experiment, out_dir)
    except DOMAIN_ERRORS as e:
        logger.error(f"Resource sweep failed: {e}")
        raise _domain_error(e)

    resource = experiment.resource_sweep.resource if experiment.resource_sweep else ""
    typer.echo(f"\n🔧 Knees ({resource}):")
    for policy, knee in result["knees"].items():
        typer.echo(f"   {policy}: {'n/a' if knee is None else f'{knee:g}'}")
    typer.echo(f"✅ Outputs written to {out_dir}")


@app.command("validate-config")
def validate_config(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Experiment config to validate"
    ),
    schema: bool = typer.Option(False, "--schema", help="Print the config JSON schema"),
) -> None:
    """
    Validate an experiment config, or print the config schema.
    """
    if schema:
        typer.echo(json.dumps(experiment_config_schema(), indent=2, sort_keys=True))
        return
    if config is None:
        raise _error("usage_error", "either --config or --schema is required")
    experiment = _load_config(config, None)
    typer.echo(f"✅ {config} is valid (config hash {experiment.config_hash()})")


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose output"),
    settings_file: Optional[Path] = typer.Option(
        None, "--settings", "-s", help="Path to settings YAML file"
    ),
    profile: Optional[str] = typer.Option(
        None, "--profile", "-p", help="Settings profile (local, ci, batch)"
    ),
    structured_logs: bool = typer.Option(
        False, "--structured-logs", help="Enable structured JSON logging"
    ),
) -> None:
    """
    kvsim - simulate LLM inference clusters under different scheduling policies.
    """
    from kvsim.config import clear_settings_cache
    from kvsim.logger import setup_logging

    # Clear any cached settings to allow reloading with new config
    clear_settings_cache()

    try:
        if settings_file:
            settings = get_settings(config_path=settings_file)
        elif profile:
            settings = get_settings(profile=profile)
        else:
            settings = get_settings()
    except FileNotFoundError as e:
        raise _error("file_not_found", str(e))

    log_level = "DEBUG" if verbose else settings.effective_log_level
    use_structured = structured_logs or settings.structured_logging
    setup_logging(level=log_level, structured=use_structured)

    if verbose:
        logger.debug("Verbose mode enabled")


if __name__ == "__main__":
    app()
