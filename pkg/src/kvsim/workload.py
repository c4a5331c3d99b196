"""Request trace generation and trace file I/O."""

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from kvsim.logger import get_logger

logger = get_logger(__name__)

TRACE_HEADER = "#kvsim-trace v1"
WORKLOAD_HEADER_PREFIX = "#workload"


class TraceFormatError(ValueError):
    """Raised when a trace file violates the format; names the offending line."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ArrivalProcess(str, Enum):
    """Inter-arrival process."""

    POISSON = "poisson"
    FIXED_INTERVAL = "fixed-interval"


class WorkloadSpec(BaseModel):
    """Uniform prompt/decode length ranges (inclusive)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    prompt_range: Tuple[int, int]
    decode_range: Tuple[int, int]
    distribution: str = "uniform"

    @model_validator(mode="after")
    def _check_ranges(self) -> "WorkloadSpec":
        for label, (low, high) in (("prompt", self.prompt_range), ("decode", self.decode_range)):
            if not 1 <= low <= high:
                raise ValueError(f"{label}_range must satisfy 1 <= min <= max")
        if self.distribution != "uniform":
            raise ValueError("only the uniform distribution is supported")
        return self

    @property
    def mean_prompt(self) -> float:
        return (self.prompt_range[0] + self.prompt_range[1]) / 2.0


class ArrivalSpec(BaseModel):
    """Arrival rate, process, duration and RNG seed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rate: float = Field(ge=0.0, description="requests/s")
    process: ArrivalProcess = ArrivalProcess.POISSON
    duration: float = Field(gt=0.0, description="seconds")
    seed: int = 0


WORKLOAD_PRESETS = {
    "light": WorkloadSpec(name="light", prompt_range=(20, 500), decode_range=(20, 500)),
    "mixed": WorkloadSpec(name="mixed", prompt_range=(20, 1000), decode_range=(20, 1000)),
    "heavy": WorkloadSpec(name="heavy", prompt_range=(500, 1000), decode_range=(500, 1000)),
}


def get_workload(name: str) -> WorkloadSpec:
    """Look up a workload preset by name."""
    try:
        return WORKLOAD_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"Unknown workload preset: {name} (known: {', '.join(sorted(WORKLOAD_PRESETS))})"
        ) from None


@dataclass(frozen=True)
class TraceRequest:
    """One request as it appears in a trace."""

    id: int
    arrival_time: float
    prompt_len: int
    decode_len: int


@dataclass
class Trace:
    """Ordered requests plus the workload bounds they were drawn from, if known."""

    requests: List[TraceRequest] = field(default_factory=list)
    workload: Optional[WorkloadSpec] = None
    duration: Optional[float] = None

    def __len__(self) -> int:
        return len(self.requests)

    def to_lines(self) -> List[str]:
        """Serialize to trace file lines (without trailing newlines)."""
        lines = [TRACE_HEADER]
        if self.workload is not None:
            w = self.workload
            lines.append(
                f"{WORKLOAD_HEADER_PREFIX} name={w.name} "
                f"prompt_range={w.prompt_range[0]}-{w.prompt_range[1]} "
                f"decode_range={w.decode_range[0]}-{w.decode_range[1]}"
            )
        if self.duration is not None:
            lines.append(f"#duration {self.duration!r}")
        for r in self.requests:
            lines.append(f"{r.id},{r.arrival_time!r},{r.prompt_len},{r.decode_len}")
        return lines

    def fingerprint(self) -> str:
        """SHA-256 over the request rows; identical traces share a fingerprint."""
        digest = hashlib.sha256()
        for r in self.requests:
            digest.update(f"{r.id},{r.arrival_time!r},{r.prompt_len},{r.decode_len}\n".encode())
        return digest.hexdigest()

    def save(self, path: Path) -> None:
        """Write the trace file (UTF-8, LF line endings)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(self.to_lines()) + "\n")
        logger.debug(f"Saved trace with {len(self.requests)} requests to {path}")


def _arrival_times(arrival: ArrivalSpec, rng: np.random.Generator) -> np.ndarray:
    if arrival.rate == 0:
        return np.empty(0)
    if arrival.process is ArrivalProcess.FIXED_INTERVAL:
        count = int(np.ceil(arrival.duration * arrival.rate))
        times = np.arange(count, dtype=float) / arrival.rate
        return times[times < arrival.duration]

    mean_gap = 1.0 / arrival.rate
    expected = arrival.duration * arrival.rate
    chunk = int(expected + 6.0 * np.sqrt(expected) + 16)
    gaps: List[np.ndarray] = []
    total = 0.0
    while total < arrival.duration:
        block = rng.exponential(mean_gap, size=chunk)
        gaps.append(block)
        total += float(block.sum())
    times = np.cumsum(np.concatenate(gaps))
    return times[times < arrival.duration]


def generate_trace(workload: WorkloadSpec, arrival: ArrivalSpec) -> Trace:
    """
    Draw a trace from a workload and arrival specification.

    Uses numpy's PCG64 bit generator seeded with arrival.seed. Arrival times are
    drawn first, then all prompt lengths, then all decode lengths, so the trace is a
    pure function of (workload, arrival).

    Args:
        workload: Length ranges
        arrival: Rate, process, duration and seed

    Returns:
        Trace with ids 0..n-1 in arrival order
    """
    rng = np.random.Generator(np.random.PCG64(arrival.seed))
    times = _arrival_times(arrival, rng)
    n = len(times)
    p_lo, p_hi = workload.prompt_range
    d_lo, d_hi = workload.decode_range
    prompts = rng.integers(p_lo, p_hi, size=n, endpoint=True)
    decodes = rng.integers(d_lo, d_hi, size=n, endpoint=True)
    requests = [
        TraceRequest(
            id=i,
            arrival_time=float(times[i]),
            prompt_len=int(prompts[i]),
            decode_len=int(decodes[i]),
        )
        for i in range(n)
    ]
    logger.debug(
        f"Generated {n} requests for workload {workload.name} at {arrival.rate} req/s "
        f"over {arrival.duration} s (seed {arrival.seed})"
    )
    return Trace(requests=requests, workload=workload, duration=arrival.duration)


def _parse_range(value: str, line_no: int) -> Tuple[int, int]:
    try:
        low, high = value.split("-")
        return int(low), int(high)
    except ValueError:
        raise TraceFormatError(line_no, f"malformed range {value!r}") from None


def _parse_workload_header(line: str, line_no: int) -> WorkloadSpec:
    fields = {}
    for token in line[len(WORKLOAD_HEADER_PREFIX):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise TraceFormatError(line_no, f"malformed workload header field {token!r}")
        fields[key] = value
    try:
        return WorkloadSpec(
            name=fields.get("name", "custom"),
            prompt_range=_parse_range(fields["prompt_range"], line_no),
            decode_range=_parse_range(fields["decode_range"], line_no),
        )
    except KeyError as e:
        raise TraceFormatError(line_no, f"workload header missing {e.args[0]}") from None
    except ValueError as e:
        if isinstance(e, TraceFormatError):
            raise
        raise TraceFormatError(line_no, f"invalid workload header: {e}") from None


def load_trace(path: Path) -> Trace:
    """
    Read and validate a trace file.

    Args:
        path: Trace file path

    Returns:
        Parsed trace

    Raises:
        FileNotFoundError: If the file does not exist
        TraceFormatError: On any format or invariant violation, naming the line
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    if not lines or lines[0].strip() != TRACE_HEADER:
        raise TraceFormatError(1, f"expected header {TRACE_HEADER!r}")

    workload: Optional[WorkloadSpec] = None
    duration: Optional[float] = None
    requests: List[TraceRequest] = []
    seen_ids = set()
    last_arrival = float("-inf")

    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(WORKLOAD_HEADER_PREFIX):
            workload = _parse_workload_header(line, line_no)
            continue
        if line.startswith("#duration"):
            try:
                duration = float(line.split()[1])
            except (IndexError, ValueError):
                raise TraceFormatError(line_no, "malformed duration header") from None
            if not math.isfinite(duration):
                raise TraceFormatError(line_no, "duration must be finite")
            continue
        if line.startswith("#"):
            continue

        parts = line.split(",")
        if len(parts) != 4:
            raise TraceFormatError(line_no, f"expected 4 columns, got {len(parts)}")
        try:
            req = TraceRequest(
                id=int(parts[0]),
                arrival_time=float(parts[1]),
                prompt_len=int(parts[2]),
                decode_len=int(parts[3]),
            )
        except ValueError:
            raise TraceFormatError(line_no, f"unparseable row {line!r}") from None

        if not math.isfinite(req.arrival_time):
            raise TraceFormatError(line_no, f"arrival time {parts[1].strip()!r} is not finite")
        if req.id in seen_ids:
            raise TraceFormatError(line_no, f"duplicate request id {req.id}")
        if req.arrival_time < last_arrival:
            raise TraceFormatError(
                line_no, f"arrival time {req.arrival_time} decreases (previous {last_arrival})"
            )
        if req.prompt_len < 1 or req.decode_len < 1:
            raise TraceFormatError(line_no, "lengths must be at least 1")
        if workload is not None:
            lo, hi = workload.prompt_range
            if not lo <= req.prompt_len <= hi:
                raise TraceFormatError(line_no, f"prompt_len {req.prompt_len} outside {lo}-{hi}")
            lo, hi = workload.decode_range
            if not lo <= req.decode_len <= hi:
                raise TraceFormatError(line_no, f"decode_len {req.decode_len} outside {lo}-{hi}")

        seen_ids.add(req.id)
        last_arrival = req.arrival_time
        requests.append(req)

    logger.info(f"Loaded trace with {len(requests)} requests from {path}")
    return Trace(requests=requests, workload=workload, duration=duration)
