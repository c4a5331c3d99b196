"""Experiment orchestration: single runs, rate sweeps, resource sweeps and curve tables."""

import csv
import io
import json
import multiprocessing as mp
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from kvsim import __version__
from kvsim.config import ConfigError, ExperimentConfig, get_settings
from kvsim.engine import RawResults, SimulationError, run
from kvsim.logger import get_logger, log_operation
from kvsim.metrics import (
    COMPARE_METRICS,
    SUMMARY_COLUMNS,
    MetricsReport,
    compare,
    compute_report,
    summary_row,
)
from kvsim.perfmodel import DeviceSpec, ModelDoesNotFitError, throughput_curves
from kvsim.policy import create_policy
from kvsim.workload import Trace, generate_trace, load_trace

logger = get_logger(__name__)

REPORT_SCHEMA_VERSION = 1

CURVE_COLUMNS = ["phase", "length", "batch", "latency_s", "tokens_per_s"]
LONG_COLUMNS = ["policy", "rate", "metric", "value"]
SATURATION_COLUMNS = ["policy", "saturation_rate", "cost_eff"]
RESOURCE_COLUMNS = ["policy", "resource", "value", "jct_mean", "cost_eff", "error"]
KNEE_COLUMNS = ["policy", "resource", "knee_value"]

# Failures of a single point that a sweep records and moves past.
POINT_ERRORS = (ModelDoesNotFitError, SimulationError, ValueError)


@dataclass
class PointResult:
    """Outcome of one simulated point of a sweep."""

    policy: str
    rate: float
    report: Optional[MetricsReport] = None
    error: Optional[str] = None
    value: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "policy": self.policy,
            "rate": self.rate,
            "value": self.value,
            "error": self.error,
            "report": self.report.to_dict() if self.report is not None else None,
        }


@dataclass
class SweepResult:
    """Points of a rate sweep in (policy, rate) order, plus saturation points."""

    points: List[PointResult] = field(default_factory=list)
    saturation: Dict[str, Tuple[Optional[float], Optional[float]]] = field(default_factory=dict)
    files: Dict[str, Path] = field(default_factory=dict)


# -- file output -------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    """Write text to path through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, data: Any) -> None:
    write_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    """Write rows as CSV with a header; None becomes an empty field."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    write_atomic(path, buffer.getvalue())


def build_meta(
    config: ExperimentConfig,
    trace_fingerprint: Optional[str] = None,
    **extra: Any,
) -> Dict[str, Any]:
    """Metadata written next to every output: version, config hash, seed, resolved config."""
    meta = {
        "tool_version": __version__,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "config": config.resolved_dump(),
        "trace_fingerprint": trace_fingerprint,
    }
    meta.update(extra)
    return meta


# -- single points -----------------------------------------------------------


def build_trace(config: ExperimentConfig, rate: float) -> Trace:
    """The trace a point simulates: the configured trace file or a generated one."""
    if config.trace_path is not None:
        return load_trace(config.trace_path)
    return generate_trace(config.resolved_workload(), config.arrival_spec(rate))


def simulate(
    config: ExperimentConfig,
    policy_name: str,
    rate: float,
    device: Optional[DeviceSpec] = None,
    emit_events: bool = False,
) -> RawResults:
    """Run one (policy, rate) point and return the raw results."""
    trace = build_trace(config, rate)
    policy = create_policy(config.policy_for(policy_name))
    return run(
        trace,
        config.cluster(device),
        policy,
        config.resolved_model(),
        config.efficiency,
        seed=config.seed,
        engine_config=config.engine,
        duration_s=config.duration_s,
        drain_s=config.drain_s,
        emit_events=emit_events,
    )


def run_point(
    config: ExperimentConfig,
    policy_name: str,
    rate: float,
    device: Optional[DeviceSpec] = None,
    emit_events: bool = False,
) -> Tuple[RawResults, MetricsReport]:
    """Simulate one point and compute its metrics report."""
    raw = simulate(config, policy_name, rate, device=device, emit_events=emit_events)
    return raw, compute_report(raw, config.warmup_s)


def run_experiment(
    config: ExperimentConfig, out_dir: Path, emit_events: bool = False
) -> Dict[str, Path]:
    """
    Run the configured policy at the first configured rate and write its outputs.

    Args:
        config: Validated experiment configuration
        out_dir: Output directory
        emit_events: Also write the event log

    Returns:
        Mapping of output kind to written file
    """
    out_dir = Path(out_dir)
    policy_name = config.policy.name
    rate = config.rates[0]

    with log_operation("run", policy=policy_name, rate=rate):
        raw, report = run_point(config, policy_name, rate, emit_events=emit_events)

    meta = build_meta(config, raw.trace_fingerprint, policy=policy_name, rate=rate)
    files = {
        "report": out_dir / "report.json",
        "summary": out_dir / "summary.csv",
        "meta": out_dir / "meta.json",
        "raw": out_dir / "raw.json",
    }
    write_json(
        files["report"],
        {"schema_version": REPORT_SCHEMA_VERSION, "meta": meta, "report": report.to_dict()},
    )
    write_csv(files["summary"], SUMMARY_COLUMNS, [summary_row(report, rate)])
    write_json(files["meta"], meta)
    write_atomic(files["raw"], raw.to_json() + "\n")
    if emit_events:
        files["events"] = out_dir / "events.jsonl"
        raw.write_event_log(files["events"])
    logger.info(f"Wrote run outputs to {out_dir}")
    return files


# -- rate sweeps -------------------------------------------------------------


def _point_task(args: Tuple[ExperimentConfig, str, float]) -> PointResult:
    config, policy_name, rate = args
    try:
        _raw, report = run_point(config, policy_name, rate)
        return PointResult(policy=policy_name, rate=rate, report=report)
    except POINT_ERRORS as e:
        return PointResult(policy=policy_name, rate=rate, error=f"{type(e).__name__}: {e}")


def _point_filename(policy: str, rate: float) -> str:
    return f"{policy}_{rate:g}.json"


def saturation_points(
    points: Sequence[PointResult],
) -> Dict[str, Tuple[Optional[float], Optional[float]]]:
    """Per policy, the rate with the highest cost efficiency (lowest rate on ties)."""
    best: Dict[str, Tuple[Optional[float], Optional[float]]] = {}
    for point in points:
        best.setdefault(point.policy, (None, None))
        if point.report is None or point.report.cost_efficiency is None:
            continue
        rate, value = best[point.policy]
        ce = point.report.cost_efficiency
        if value is None or ce > value or (ce == value and point.rate < rate):
            best[point.policy] = (point.rate, ce)
    return best


def _run_points(
    tasks: List[Tuple[ExperimentConfig, str, float]],
    workers: int,
    show_progress: bool,
    on_result,
) -> List[PointResult]:
    results: Dict[Tuple[str, float], PointResult] = {}
    with tqdm(total=len(tasks), desc="Simulating", unit="point", disable=not show_progress) as pbar:
        if workers > 1 and len(tasks) > 1:
            with mp.get_context("spawn").Pool(processes=min(workers, len(tasks))) as pool:
                for result in pool.imap_unordered(_point_task, tasks):
                    results[(result.policy, result.rate)] = result
                    on_result(result)
                    pbar.update(1)
        else:
            for task in tasks:
                result = _point_task(task)
                results[(result.policy, result.rate)] = result
                on_result(result)
                pbar.update(1)
    return [results[(policy, rate)] for _config, policy, rate in tasks]


def sweep(
    config: ExperimentConfig,
    out_dir: Path,
    max_workers: Optional[int] = None,
    show_progress: Optional[bool] = None,
) -> SweepResult:
    """
    Simulate every (policy, rate) combination and write the sweep tables.

    Points may run in worker processes; each point file is written atomically as
    soon as it finishes and the tables are merged in (policy, rate) order.

    Args:
        config: Experiment configuration (policies x rates)
        out_dir: Output directory
        max_workers: Worker processes (defaults to settings.max_workers)
        show_progress: Progress bar (defaults to settings.show_progress)

    Returns:
        SweepResult with points in deterministic order
    """
    settings = get_settings()
    workers = max_workers if max_workers is not None else settings.max_workers
    progress = show_progress if show_progress is not None else settings.show_progress
    out_dir = Path(out_dir)
    policies = config.sweep_policies()
    tasks = [(config, policy, rate) for policy in policies for rate in config.rates]

    def write_point(result: PointResult) -> None:
        if result.error:
            logger.warning(f"Point {result.policy}@{result.rate:g} failed: {result.error}")
        path = out_dir / "points" / _point_filename(result.policy, result.rate)
        write_json(path, result.to_dict())

    with log_operation("sweep", points=len(tasks), workers=workers):
        points = _run_points(tasks, workers, progress, write_point)

    result = SweepResult(points=points, saturation=saturation_points(points))
    long_rows: List[Dict[str, Any]] = []
    summary_rows: List[Dict[str, Any]] = []
    for point in points:
        if point.report is None:
            long_rows.append(
                {
                    "policy": point.policy,
                    "rate": point.rate,
                    "metric": "error",
                    "value": point.error,
                }
            )
            continue
        summary_rows.append(summary_row(point.report, point.rate))
        for metric in COMPARE_METRICS:
            long_rows.append(
                {
                    "policy": point.policy,
                    "rate": point.rate,
                    "metric": metric,
                    "value": point.report.metric(metric),
                }
            )

    comparison_columns = ["rate", "metric"]
    for policy in policies:
        comparison_columns += [policy, f"{policy}_ratio"]
    comparison_rows: List[Dict[str, Any]] = []
    if len(policies) > 1:
        for rate in config.rates:
            named = [
                (p.policy, p.report)
                for p in points
                if p.rate == rate and p.report is not None
            ]
            if len(named) < 2:
                continue
            for row in compare(named):
                entry: Dict[str, Any] = {"rate": rate, "metric": row.metric}
                for name, value, ratio in zip(row.names, row.values, row.ratios):
                    entry[name] = value
                    entry[f"{name}_ratio"] = ratio
                comparison_rows.append(entry)

    saturation_rows = [
        {"policy": policy, "saturation_rate": rate, "cost_eff": value}
        for policy, (rate, value) in result.saturation.items()
    ]

    fingerprints = sorted(
        {p.report.trace_fingerprint for p in points if p.report is not None}
    )
    result.files = {
        "long": out_dir / "sweep_long.csv",
        "summary": out_dir / "summary.csv",
        "comparison": out_dir / "comparison.csv",
        "saturation": out_dir / "saturation.csv",
        "meta": out_dir / "meta.json",
    }
    write_csv(result.files["long"], LONG_COLUMNS, long_rows)
    write_csv(result.files["summary"], SUMMARY_COLUMNS, summary_rows)
    write_csv(result.files["comparison"], comparison_columns, comparison_rows)
    write_csv(result.files["saturation"], SATURATION_COLUMNS, saturation_rows)
    write_json(
        result.files["meta"],
        build_meta(config, trace_fingerprints=fingerprints, policies=policies, rates=config.rates),
    )
    return result


# -- resource sweeps ---------------------------------------------------------


def find_knee(
    points: Sequence[PointResult], tolerance: float = 0.01
) -> Optional[float]:
    """
    Smallest resource value within tolerance of the best JCT and cost efficiency.

    Args:
        points: Points of one policy, each carrying its resource value
        tolerance: Relative slack (0.01 = 1%)

    Returns:
        Knee value, or None when no point succeeded
    """
    ok = [
        p
        for p in points
        if p.report is not None
        and p.report.jct.mean is not None
        and p.report.cost_efficiency is not None
    ]
    if not ok:
        return None
    best_jct = min(p.report.jct.mean for p in ok)
    best_ce = max(p.report.cost_efficiency for p in ok)
    for p in sorted(ok, key=lambda p: p.value):
        if (
            p.report.jct.mean <= best_jct * (1.0 + tolerance)
            and p.report.cost_efficiency >= best_ce * (1.0 - tolerance)
        ):
            return p.value
    return None


def resource_sweep(
    config: ExperimentConfig,
    out_dir: Path,
    show_progress: Optional[bool] = None,
) -> Dict[str, Any]:
    """
    Vary one device resource and record JCT and cost efficiency per policy.

    Points whose model does not fit (or that fail otherwise) are recorded with
    their error and the sweep continues.

    Returns:
        {"points": [...], "knees": {policy: value}, "files": {...}}

    Raises:
        ConfigError: If the config has no resource_sweep section
    """
    spec = config.resource_sweep
    if spec is None:
        raise ConfigError("resource-sweep requires a resource_sweep section in the config")
    settings = get_settings()
    progress = show_progress if show_progress is not None else settings.show_progress
    out_dir = Path(out_dir)
    rate = spec.rate if spec.rate is not None else config.rates[0]
    base = config.resolved_device()
    values = sorted(spec.values)
    policies = config.sweep_policies()

    points: List[PointResult] = []
    total = len(values) * len(policies)
    with log_operation("resource_sweep", resource=spec.resource, points=total):
        with tqdm(
            total=total, desc="Resource sweep", disable=not progress
        ) as pbar:
            for policy in policies:
                for value in values:
                    device = base.model_copy(update={spec.resource: value})
                    try:
                        _raw, report = run_point(config, policy, rate, device=device)
                        points.append(PointResult(policy, rate, report=report, value=value))
                    except POINT_ERRORS as e:
                        logger.warning(f"{policy} at {spec.resource}={value:g} failed: {e}")
                        points.append(
                            PointResult(policy, rate, error=f"{type(e).__name__}: {e}", value=value)
                        )
                    pbar.update(1)

    knees = {
        policy: find_knee([p for p in points if p.policy == policy], spec.knee_tolerance)
        for policy in policies
    }
    rows = [
        {
            "policy": p.policy,
            "resource": spec.resource,
            "value": p.value,
            "jct_mean": p.report.jct.mean if p.report else None,
            "cost_eff": p.report.cost_efficiency if p.report else None,
            "error": p.error,
        }
        for p in points
    ]
    files = {
        "sweep": out_dir / "resource_sweep.csv",
        "knees": out_dir / "resource_knees.csv",
        "meta": out_dir / "meta.json",
    }
    write_csv(files["sweep"], RESOURCE_COLUMNS, rows)
    write_csv(
        files["knees"],
        KNEE_COLUMNS,
        [{"policy": p, "resource": spec.resource, "knee_value": k} for p, k in knees.items()],
    )
    write_json(files["meta"], build_meta(config, rate=rate, resource=spec.resource))
    return {"points": points, "knees": knees, "files": files}


# -- curves ------------------------------------------------------------------


def write_curves(config: ExperimentConfig, out_dir: Path) -> Dict[str, Path]:
    """Write the prefill/decode latency and throughput tables; no simulation involved."""
    out_dir = Path(out_dir)
    model = config.resolved_model()
    inst = config.instance_spec()
    files: Dict[str, Path] = {}
    for phase in config.curves.phases:
        rows = throughput_curves(
            model,
            inst,
            config.efficiency,
            config.curves.lengths,
            config.curves.batch_sizes,
            phase,
        )
        path = out_dir / f"curves_{phase.value}.csv"
        write_csv(
            path,
            CURVE_COLUMNS,
            [
                {
                    "phase": row.phase.value,
                    "length": row.length,
                    "batch": row.batch,
                    "latency_s": row.latency_s,
                    "tokens_per_s": row.tokens_per_s,
                }
                for row in rows
            ],
        )
        files[phase.value] = path
    files["meta"] = out_dir / "meta.json"
    write_json(files["meta"], build_meta(config))
    return files
