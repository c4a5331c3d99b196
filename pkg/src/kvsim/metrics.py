"""Latency, throughput and resource metrics computed from raw simulation results."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from kvsim.engine import RawResults, RequestRecord
from kvsim.logger import get_logger
from kvsim.policy import RequestState

logger = get_logger(__name__)

GB = 1e9

SUMMARY_COLUMNS = [
    "policy",
    "rate",
    "ttft_mean",
    "ttft_p95",
    "tbt_mean",
    "tbt_max",
    "jct_mean",
    "jct_p95",
    "cost_eff",
    "idle_frac",
    "peak_kv_gb",
    "link_prefill_gb",
    "link_mirror_gb",
]

# Metrics compared across policies; a larger value is better only for cost_eff.
COMPARE_METRICS = [
    "ttft_mean",
    "ttft_p95",
    "tbt_mean",
    "tbt_max",
    "jct_mean",
    "jct_p95",
    "queue_wait_mean",
    "cost_eff",
    "idle_frac",
    "peak_kv_gb",
    "link_prefill_gb",
    "link_mirror_gb",
]


class FingerprintMismatchError(ValueError):
    """Raised when compared reports were produced from different traces."""


@dataclass
class Summary:
    """Order statistics of a sample; every field is None for an empty sample."""

    count: int = 0
    mean: Optional[float] = None
    median: Optional[float] = None
    p95: Optional[float] = None
    max: Optional[float] = None


def percentile(values: Sequence[float], q: float) -> Optional[float]:
    """Nearest-rank percentile (q in [0, 100]); None for an empty sample."""
    if len(values) == 0:
        return None
    return float(np.percentile(np.asarray(values, dtype=float), q, method="inverted_cdf"))


def summarize(values: Sequence[float]) -> Summary:
    if len(values) == 0:
        return Summary()
    arr = np.asarray(values, dtype=float)
    return Summary(
        count=int(arr.size),
        mean=float(arr.mean()),
        median=percentile(arr, 50),
        p95=percentile(arr, 95),
        max=float(arr.max()),
    )


@dataclass
class RequestMetrics:
    """Latencies of one completed request."""

    id: int
    arrival_time: float
    ttft: float
    queue_wait: float
    jct: float
    tokens_emitted: int
    preemptions: int
    tbt_samples: List[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Aggregated metrics of one run."""

    policy: str
    num_instances: int
    trace_fingerprint: str
    warmup_s: float
    window_s: float
    completed: int
    incomplete: int
    excluded_warmup: int
    ttft: Summary
    tbt: Summary
    jct: Summary
    queue_wait: Summary
    tokens_in_window: int
    cost_efficiency: Optional[float]
    idle_fraction: List[Optional[float]]
    peak_kv_bytes: List[int]
    traffic_bytes: Dict[str, int]
    peak_mirror_fraction: Dict[str, float]
    starved_time_s: List[float]
    queue_depth: List[List[float]]
    preemptions: int
    rejected_decisions: int
    rebalance_moves: int
    policy_stats: Dict[str, float]
    requests: List[RequestMetrics] = field(default_factory=list)

    @property
    def mean_idle_fraction(self) -> Optional[float]:
        known = [f for f in self.idle_fraction if f is not None]
        return sum(known) / len(known) if known else None

    @property
    def max_mirror_fraction(self) -> float:
        return max(self.peak_mirror_fraction.values(), default=0.0)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mean_idle_fraction"] = self.mean_idle_fraction
        data["max_mirror_fraction"] = self.max_mirror_fraction
        return data

    def metric(self, name: str) -> Optional[float]:
        """Scalar metric by its summary/comparison column name."""
        values: Dict[str, Optional[float]] = {
            "ttft_mean": self.ttft.mean,
            "ttft_p95": self.ttft.p95,
            "tbt_mean": self.tbt.mean,
            "tbt_max": self.tbt.max,
            "jct_mean": self.jct.mean,
            "jct_p95": self.jct.p95,
            "queue_wait_mean": self.queue_wait.mean,
            "cost_eff": self.cost_efficiency,
            "idle_frac": self.mean_idle_fraction,
            "peak_kv_gb": max(self.peak_kv_bytes, default=0) / GB,
            "link_prefill_gb": self.traffic_bytes.get("prefill_transfer", 0) / GB,
            "link_mirror_gb": self.traffic_bytes.get("mirror", 0) / GB,
        }
        if name not in values:
            raise KeyError(f"unknown metric: {name}")
        return values[name]


def _request_metrics(record: RequestRecord) -> RequestMetrics:
    times = record.token_times
    return RequestMetrics(
        id=record.id,
        arrival_time=record.arrival_time,
        ttft=record.first_token_time - record.arrival_time,
        queue_wait=record.prefill_start_time - record.arrival_time,
        jct=record.completion_time - record.arrival_time,
        tokens_emitted=record.tokens_emitted,
        preemptions=record.preemptions,
        tbt_samples=[b - a for a, b in zip(times, times[1:])],
    )


def _idle_fractions(raw: RawResults, start: float, end: float) -> List[Optional[float]]:
    window = end - start
    if window <= 0:
        return [None] * raw.num_instances
    busy = [0.0] * raw.num_instances
    for job in raw.jobs:
        overlap = min(job.end, end) - max(job.start, start)
        if overlap > 0:
            busy[job.instance] += overlap
    return [max(0.0, 1.0 - b / window) for b in busy]


def _peak_mirror_fractions(raw: RawResults) -> Dict[str, float]:
    peaks: Dict[Tuple[int, int], int] = {}
    for src, dst, _second, nbytes in raw.mirror_series:
        peaks[(src, dst)] = max(peaks.get((src, dst), 0), nbytes)
    return {
        f"{src}->{dst}": nbytes / raw.link_capacity[src]
        for (src, dst), nbytes in sorted(peaks.items())
    }


def compute_report(raw: RawResults, warmup_s: float = 0.0) -> MetricsReport:
    """
    Turn raw results into a metrics report.

    Requests arriving before warmup_s are left out of the latency aggregates.
    Cost efficiency counts every token emitted inside [warmup_s, duration_s],
    including tokens of requests still running at the end.

    Args:
        raw: Results of a finished run
        warmup_s: Warm-up exclusion in seconds

    Returns:
        MetricsReport (aggregates are None when nothing completed)
    """
    measured: List[RequestMetrics] = []
    incomplete = 0
    excluded = 0
    for record in raw.requests:
        if record.state != RequestState.COMPLETE.value:
            incomplete += 1
            continue
        if record.arrival_time < warmup_s:
            excluded += 1
            continue
        measured.append(_request_metrics(record))

    window = raw.duration_s - warmup_s
    tokens_in_window = sum(
        1 for record in raw.requests for t in record.token_times if warmup_s <= t <= raw.duration_s
    )
    cost_eff = tokens_in_window / (window * raw.num_instances) if window > 0 else None

    tbt_samples = [s for m in measured for s in m.tbt_samples]
    if not measured:
        logger.warning(f"No completed requests to measure for policy {raw.policy}")

    return MetricsReport(
        policy=raw.policy,
        num_instances=raw.num_instances,
        trace_fingerprint=raw.trace_fingerprint,
        warmup_s=warmup_s,
        window_s=window,
        completed=len(measured) + excluded,
        incomplete=incomplete,
        excluded_warmup=excluded,
        ttft=summarize([m.ttft for m in measured]),
        tbt=summarize(tbt_samples),
        jct=summarize([m.jct for m in measured]),
        queue_wait=summarize([m.queue_wait for m in measured]),
        tokens_in_window=tokens_in_window,
        cost_efficiency=cost_eff,
        idle_fraction=_idle_fractions(raw, warmup_s, raw.duration_s),
        peak_kv_bytes=[t * raw.kv_bytes_per_token for t in raw.peak_kv_tokens],
        traffic_bytes=dict(raw.traffic_bytes),
        peak_mirror_fraction=_peak_mirror_fractions(raw),
        starved_time_s=list(raw.starved_time_s),
        queue_depth=[list(row) for row in raw.queue_depth],
        preemptions=raw.preemptions,
        rejected_decisions=raw.rejected_decisions,
        rebalance_moves=raw.rebalance_moves,
        policy_stats=dict(raw.policy_stats),
        requests=measured,
    )


def summary_row(report: MetricsReport, rate: Optional[float]) -> Dict[str, Any]:
    """One summary.csv row; absent values are None."""
    row: Dict[str, Any] = {"policy": report.policy, "rate": rate}
    for column in SUMMARY_COLUMNS[2:]:
        row[column] = report.metric(column)
    return row


@dataclass
class ComparisonRow:
    """One metric across policies, with ratios against the first entry."""

    metric: str
    names: List[str]
    values: List[Optional[float]]
    ratios: List[Optional[float]]


def compare(reports: Sequence[Tuple[str, MetricsReport]]) -> List[ComparisonRow]:
    """
    Compare reports produced from the same trace.

    Args:
        reports: (name, report) pairs; the first is the reference

    Returns:
        One row per metric in COMPARE_METRICS

    Raises:
        ValueError: With fewer than two reports
        FingerprintMismatchError: If the reports come from different traces
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    reference = reports[0][1].trace_fingerprint
    for name, report in reports[1:]:
        if report.trace_fingerprint != reference:
            raise FingerprintMismatchError(
                f"report {name!r} was produced from a different trace "
                f"({report.trace_fingerprint[:12]} != {reference[:12]})"
            )

    names = [name for name, _ in reports]
    rows = []
    for metric in COMPARE_METRICS:
        values = [report.metric(metric) for _, report in reports]
        base = values[0]
        ratios = [
            None if (v is None or base is None or base == 0) else v / base for v in values
        ]
        rows.append(ComparisonRow(metric=metric, names=names, values=values, ratios=ratios))
    return rows
