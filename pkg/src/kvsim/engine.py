"""Deterministic discrete-event simulation of a multi-instance inference cluster.

The engine owns all mutable state: requests, per-instance memory ledgers, the
directed-link ledger and the event heap. It prices every job with `perfmodel`,
asks the active policy what to do at each decision point, and applies the
decisions it gets back after checking that they are legal.
"""

import heapq
import json
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from kvsim.config import EngineConfig
from kvsim.ledger import (
    KVRole,
    LinkLedger,
    MemoryLedger,
    SimulationError,
    TrafficCategory,
)
from kvsim.logger import get_logger
from kvsim.perfmodel import (
    EfficiencyFactors,
    InstanceSpec,
    ModelSpec,
    decode_step_latency,
    kv_bytes_per_token,
    kv_capacity_tokens,
    prefill_latency,
    transfer_latency,
)
from kvsim.policy import (
    AddToBatch,
    AssignPrefill,
    CreateRedundant,
    Decision,
    EvictRedundant,
    InstanceRole,
    Policy,
    RebalanceMove,
    RequestState,
    RequestView,
    SetRole,
)
from kvsim.workload import Trace

__all__ = [
    "ClusterView",
    "EventKind",
    "JobKind",
    "JobRecord",
    "RawResults",
    "RequestRecord",
    "SimulationError",
    "Simulator",
    "run",
]

logger = get_logger(__name__)

RAW_SCHEMA_VERSION = 1


class EventKind(IntEnum):
    """Event kinds; the integer value is the tie-break priority at equal times."""

    ARRIVAL = 0
    TRANSFER_DONE = 1
    PREFILL_DONE = 2
    DECODE_STEP_DONE = 3
    POLICY_TIMER = 4


class JobKind(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    MIXED = "mixed"


@dataclass
class Request:
    """Runtime form of a trace request. Only the engine sees decode_len."""

    id: int
    arrival_time: float
    prompt_len: int
    decode_len: int
    state: RequestState = RequestState.QUEUED
    tokens_emitted: int = 0
    first_token_time: Optional[float] = None
    token_times: List[float] = field(default_factory=list)
    completion_time: Optional[float] = None
    prefill_start_time: Optional[float] = None
    prefill_instance: Optional[int] = None
    primary: Optional[int] = None
    batch_instance: Optional[int] = None
    queued_on: Optional[int] = None
    in_transit: bool = False
    waiting: bool = False
    epoch: int = 0
    preemptions: int = 0
    holders: Set[int] = field(default_factory=set)


@dataclass
class _MirrorGroup:
    """Mirror lines for one decode step bound for one destination."""

    src: int
    dst: int
    landing: float
    items: List[Tuple[int, int, int]]  # (request id, target tokens, epoch)


@dataclass
class _PrefillLanding:
    request_id: int
    src: int
    dst: int
    tokens: int
    epoch: int


@dataclass
class _CopyLanding:
    request_id: int
    src: int
    dst: int
    tokens: int
    epoch: int


@dataclass
class _Job:
    seq: int
    instance: int
    kind: JobKind
    start: float
    end: float
    prefill: List[Tuple[int, Optional[int], int]]  # (request id, destination, tokens)
    decode_ids: List[int]
    mirrors: List[_MirrorGroup] = field(default_factory=list)


@dataclass
class _Instance:
    id: int
    spec: InstanceSpec
    ledger: MemoryLedger
    role: InstanceRole = InstanceRole.IDLE
    batch: Dict[int, None] = field(default_factory=dict)
    queue: List[int] = field(default_factory=list)
    job: Optional[_Job] = None

    @property
    def pair_id(self) -> int:
        return self.id // 2


@dataclass
class RequestRecord:
    """Per-request outcome."""

    id: int
    arrival_time: float
    prompt_len: int
    decode_len: int
    state: str
    tokens_emitted: int
    first_token_time: Optional[float]
    completion_time: Optional[float]
    prefill_start_time: Optional[float]
    prefill_instance: Optional[int]
    preemptions: int
    token_times: List[float]


@dataclass
class JobRecord:
    """One executed job (prefill, decode step or co-batched iteration)."""

    instance: int
    kind: str
    start: float
    end: float
    prefill_requests: int
    prefill_tokens: int
    decode_batch: int
    mirror_bytes: int


@dataclass
class RawResults:
    """Everything a run produced; the input of metrics."""

    policy: str
    seed: int
    num_instances: int
    capacity_tokens: List[int]
    kv_bytes_per_token: int
    link_capacity: List[float]
    duration_s: float
    horizon_s: float
    end_time: float
    trace_fingerprint: str
    first_token_mode: str
    requests: List[RequestRecord]
    jobs: List[JobRecord]
    traffic_bytes: Dict[str, int]
    mirror_series: List[List[int]]
    peak_kv_tokens: List[int]
    starved_time_s: List[float]
    queue_depth: List[List[float]]
    rejected_decisions: int = 0
    preemptions: int = 0
    rebalance_moves: int = 0
    policy_stats: Dict[str, float] = field(default_factory=dict)
    schema_version: int = RAW_SCHEMA_VERSION
    event_log: List[Dict[str, Any]] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("event_log")
        return data

    def to_json(self) -> str:
        """Canonical serialization; identical runs give identical strings."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RawResults":
        if data.get("schema_version") != RAW_SCHEMA_VERSION:
            raise ValueError(f"unsupported raw results schema: {data.get('schema_version')}")
        payload = dict(data)
        payload["requests"] = [RequestRecord(**r) for r in data["requests"]]
        payload["jobs"] = [JobRecord(**j) for j in data["jobs"]]
        return cls(**payload)

    @classmethod
    def from_json(cls, text: str) -> "RawResults":
        return cls.from_dict(json.loads(text))

    def write_event_log(self, path: Path) -> None:
        """Write the event log as JSON lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for event in self.event_log:
                f.write(json.dumps(event, sort_keys=True) + "\n")


class ClusterView:
    """Read-only window onto simulation state handed to policies."""

    def __init__(self, sim: "Simulator"):
        self._sim = sim

    @property
    def now(self) -> float:
        return self._sim.now

    @property
    def num_instances(self) -> int:
        return len(self._sim.instances)

    @property
    def kv_bytes_per_token(self) -> int:
        return self._sim.kvb

    def role(self, instance_id: int) -> InstanceRole:
        return self._sim.instances[instance_id].role

    def is_busy(self, instance_id: int) -> bool:
        return self._sim.instances[instance_id].job is not None

    def busy_until(self, instance_id: int) -> float:
        """End of the running job, or now when idle. A request moved onto an instance
        whose job ends now joins its next step without waiting."""
        job = self._sim.instances[instance_id].job
        return job.end if job is not None else self._sim.now

    def batch(self, instance_id: int) -> Tuple[int, ...]:
        return tuple(self._sim.instances[instance_id].batch)

    def queue(self, instance_id: int) -> Tuple[int, ...]:
        return tuple(self._sim.instances[instance_id].queue)

    def free_tokens(self, instance_id: int) -> int:
        return self._sim.instances[instance_id].ledger.free_tokens

    def capacity_tokens(self, instance_id: int) -> int:
        return self._sim.instances[instance_id].ledger.capacity_tokens

    def kv_tokens(self, request_id: int) -> int:
        """Tokens of the primary copy (0 before prefill)."""
        return self._sim.primary_tokens(request_id)

    def decode_tokens(self, instance_id: int) -> int:
        """KV tokens read by the instance's decode batch."""
        return sum(self._sim.primary_tokens(rid) for rid in self._sim.instances[instance_id].batch)

    def pending_prefill_tokens(self, instance_id: int) -> int:
        inst = self._sim.instances[instance_id]
        return sum(self._sim.context_len(self._sim.requests[rid]) for rid in inst.queue)

    def request(self, request_id: int) -> RequestView:
        req = self._sim.requests[request_id]
        return RequestView(
            id=req.id,
            arrival_time=req.arrival_time,
            prompt_len=req.prompt_len,
            context_len=self._sim.context_len(req),
            tokens_emitted=req.tokens_emitted,
            state=req.state,
            primary=req.primary,
            batch_instance=req.batch_instance,
            queued_on=req.queued_on,
            in_transit=req.in_transit,
        )

    def holders(self, request_id: int) -> Dict[int, KVRole]:
        req = self._sim.requests[request_id]
        result = {}
        for h in sorted(req.holders):
            entry = self._sim.instances[h].ledger.entry(request_id)
            if entry is not None:
                result[h] = entry.role
        return result

    def is_fresh_copy(self, request_id: int, instance_id: int) -> bool:
        return self._sim.is_fresh(request_id, instance_id)

    def fresh_holders(self, request_id: int) -> List[int]:
        req = self._sim.requests[request_id]
        return [h for h in sorted(req.holders) if self._sim.is_fresh(request_id, h)]

    def can_move(self, request_id: int, src: int, dst: int) -> bool:
        return self._sim.can_move(request_id, src, dst)

    def in_running_job(self, request_id: int) -> bool:
        return request_id in self._sim.running

    def redundant_copies(self, instance_id: int) -> List[Tuple[int, int]]:
        """(request id, tokens) of landed redundant copies on the instance."""
        ledger = self._sim.instances[instance_id].ledger
        return [(e.request_id, e.allocated) for e in ledger.redundant_entries() if not e.incoming]

    def primaries(self, instance_id: int) -> List[int]:
        ledger = self._sim.instances[instance_id].ledger
        return [
            e.request_id
            for e in ledger.entries()
            if e.role is KVRole.PRIMARY
            and self._sim.requests[e.request_id].state is RequestState.DECODING
        ]

    def waiting_requests(self) -> List[int]:
        """Requests waiting for a prefill, oldest first."""
        reqs = self._sim.requests
        return sorted(self._sim.waiting, key=lambda rid: (reqs[rid].arrival_time, rid))

    def link_busy_until(self, src: int, dst: int) -> float:
        return self._sim.links.busy_until(src, dst)

    def link_capacity(self, instance_id: int) -> float:
        return self._sim.instances[instance_id].spec.link_capacity


class Simulator:
    """
    One simulation run.

    Args:
        trace: Requests to serve
        cluster: One InstanceSpec per instance
        policy: Scheduling policy
        model: Model served by every instance
        eff: Efficiency factors
        engine_config: Engine knobs (defaults if None)
        seed: Recorded in the results; the engine itself draws no random numbers
        duration_s: Measurement duration; defaults to the trace's duration
        drain_s: Extra simulated time after duration_s before the run is cut off
        emit_events: Keep an event log in the results

    Raises:
        ValueError: Empty cluster, or the policy rejects the cluster size
        ModelDoesNotFitError: The model does not fit in an instance
    """

    def __init__(
        self,
        trace: Trace,
        cluster: Sequence[InstanceSpec],
        policy: Policy,
        model: ModelSpec,
        eff: EfficiencyFactors,
        engine_config: Optional[EngineConfig] = None,
        seed: int = 0,
        duration_s: Optional[float] = None,
        drain_s: float = 120.0,
        emit_events: bool = False,
    ):
        if not cluster:
            raise ValueError("cluster must contain at least one instance")
        policy.validate_cluster(len(cluster))

        self.trace = trace
        self.policy = policy
        self.model = model
        self.eff = eff
        self.config = engine_config or EngineConfig()
        self.seed = seed
        self.kvb = kv_bytes_per_token(model)
        self.kvb_layer = self.kvb // model.num_layers

        self.instances: List[_Instance] = [
            _Instance(id=i, spec=spec, ledger=MemoryLedger(i, kv_capacity_tokens(model, spec)))
            for i, spec in enumerate(cluster)
        ]
        self.links = LinkLedger(
            lambda src, nbytes: transfer_latency(nbytes, self.instances[src].spec, self.eff)
        )

        self.requests: Dict[int, Request] = {
            r.id: Request(
                id=r.id,
                arrival_time=r.arrival_time,
                prompt_len=r.prompt_len,
                decode_len=r.decode_len,
            )
            for r in trace.requests
        }
        last_arrival = trace.requests[-1].arrival_time if trace.requests else 0.0
        self.duration_s = duration_s if duration_s is not None else (trace.duration or last_arrival)
        self.horizon_s = self.duration_s + drain_s

        self.view = ClusterView(self)
        self.now = 0.0
        self.waiting: Dict[int, None] = {}
        self.running: Dict[int, int] = {}
        self._heap: List[Tuple[float, int, int, int, Any]] = []
        self._seq = 0
        self._job_seq = 0
        self._unfinished = len(self.requests)
        self._starved = [0.0] * len(self.instances)
        self._queue_depth: List[List[float]] = []
        self._jobs: List[JobRecord] = []
        self._events: Optional[List[Dict[str, Any]]] = [] if emit_events else None
        self.rejected_decisions = 0
        self.preemptions = 0
        self.rebalance_moves = 0
        self._preempted: List[int] = []

    # -- helpers used by the view -------------------------------------------

    def context_len(self, req: Request) -> int:
        """KV length a (re-)prefill of the request computes."""
        if req.tokens_emitted == 0:
            return req.prompt_len
        if self.config.first_token_mode == "prefill":
            return req.prompt_len + req.tokens_emitted - 1
        return req.prompt_len + req.tokens_emitted

    def primary_tokens(self, request_id: int) -> int:
        req = self.requests[request_id]
        if req.primary is None:
            return 0
        entry = self.instances[req.primary].ledger.entry(request_id)
        return entry.tokens_present if entry is not None else 0

    def is_fresh(self, request_id: int, instance_id: int) -> bool:
        req = self.requests[request_id]
        if req.primary is None or instance_id == req.primary:
            return False
        entry = self.instances[instance_id].ledger.entry(request_id)
        if entry is None or entry.role is not KVRole.REDUNDANT or entry.incoming:
            return False
        return entry.tokens_present == self.primary_tokens(request_id)

    def can_move(self, request_id: int, src: int, dst: int) -> bool:
        req = self.requests.get(request_id)
        if req is None or req.state is not RequestState.DECODING or req.waiting:
            return False
        if req.primary != src or req.in_transit or request_id in self.running:
            return False
        return self.is_fresh(request_id, dst)

    # -- event plumbing -----------------------------------------------------

    def _push(self, time: float, kind: EventKind, key: int, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, int(kind), key, self._seq, payload))

    def _log_event(self, event_name: str, **fields: Any) -> None:
        if self._events is not None:
            self._events.append({"t": self.now, "event": event_name, **fields})

    def _advance(self, time: float) -> None:
        if time < self.now:
            raise SimulationError(f"clock moved backwards: {time} < {self.now}")
        dt = time - self.now
        if dt > 0 and self.waiting:
            for inst in self.instances:
                if inst.job is None:
                    self._starved[inst.id] += dt
        self.now = time

    def _note_queue(self) -> None:
        depth = float(len(self.waiting))
        if self._queue_depth and self._queue_depth[-1][0] == self.now:
            self._queue_depth[-1][1] = depth
        elif not self._queue_depth or self._queue_depth[-1][1] != depth:
            self._queue_depth.append([self.now, depth])

    def _work_remains(self) -> bool:
        return self._unfinished > 0

    # -- main loop ----------------------------------------------------------

    def run(self) -> RawResults:
        """Simulate until every request completes or the horizon is reached."""
        logger.info(
            f"Simulating {len(self.requests)} requests on {len(self.instances)} instances "
            f"with policy {self.policy.name} (horizon {self.horizon_s:.1f}s)"
        )
        for req in self.requests.values():
            self._push(req.arrival_time, EventKind.ARRIVAL, req.id, req.id)

        self._apply(self.policy.on_start(self.view))
        period = self.policy.timer_period_s
        if period and self._work_remains():
            self._push(period, EventKind.POLICY_TIMER, 0)

        while self._heap:
            time, kind, key, _seq, payload = heapq.heappop(self._heap)
            if time > self.horizon_s:
                self._advance(self.horizon_s)
                break
            self._advance(time)

            if kind == EventKind.ARRIVAL:
                arrivals = [payload]
                while self._heap and self._heap[0][0] == time and self._heap[0][1] == kind:
                    arrivals.append(heapq.heappop(self._heap)[4])
                self._on_arrival(arrivals)
            elif kind == EventKind.TRANSFER_DONE:
                self._on_transfer_done(payload)
            elif kind in (EventKind.PREFILL_DONE, EventKind.DECODE_STEP_DONE):
                self._on_job_done(key, payload)
            elif kind == EventKind.POLICY_TIMER:
                self._log_event("policy_timer")
                self._apply(self.policy.on_timer(self.view))
                if period and self._work_remains():
                    self._push(self.now + period, EventKind.POLICY_TIMER, 0)

            self._dispatch()
            if self.config.check_invariants:
                self.check_invariants()

        results = self._results()
        incomplete = sum(1 for r in results.requests if r.state != RequestState.COMPLETE.value)
        logger.info(
            f"Simulation finished at t={self.now:.3f}s: "
            f"{len(results.requests) - incomplete} complete, {incomplete} incomplete"
        )
        return results

    def _on_arrival(self, request_ids: List[int]) -> None:
        for rid in request_ids:
            req = self.requests[rid]
            req.waiting = True
            self.waiting[rid] = None
        self._note_queue()
        self._log_event("arrival", requests=request_ids)
        self._apply(self.policy.on_arrival(self.view, request_ids))

    # -- dispatch -----------------------------------------------------------

    def _dispatch(self) -> None:
        while True:
            started = False
            for inst in self.instances:
                if inst.job is not None:
                    continue
                if self._try_start(inst):
                    started = True
                    continue
                decisions = self.policy.on_idle(self.view, inst.id)
                if decisions:
                    self._apply(decisions)
                    if inst.job is None and self._try_start(inst):
                        started = True
            if not started:
                return

    def _try_start(self, inst: _Instance) -> bool:
        has_batch = bool(inst.batch)
        if inst.role is InstanceRole.PREFILL:
            prefill = self._collect_prefill(inst)
            if prefill:
                self._start_job(inst, prefill, [])
                return True
            if has_batch:
                return self._start_decode(inst)
            return False

        if inst.queue and self.policy.cobatch_prefill:
            prefill = self._collect_prefill(inst)
            if prefill:
                self._start_job(inst, prefill, list(inst.batch))
                return True
            if has_batch:
                return self._start_decode(inst)
            return False
        if has_batch:
            return self._start_decode(inst)
        prefill = self._collect_prefill(inst)
        if prefill:
            self._start_job(inst, prefill, [])
            return True
        return False

    def _start_decode(self, inst: _Instance) -> bool:
        """
        Start a decode step, in step with the instance's synchronized peers.

        Idle peers with a batch start together with the instance and all of them end
        at the slowest member's step end. A step started while a peer is mid-step ends
        with the peer's step when it fits. Otherwise the instance waits for the peer
        if none of its requests has emitted a token yet or the wait is at most half a
        step, unless prompts are waiting for an instance. Otherwise it runs out of step.
        A peer whose job ends at this very instant is always waited for, so both begin
        together.
        """
        peers = [self.instances[p] for p in self.policy.synchronized_peers(self.view, inst.id)]
        if any(p.job is not None and p.job.end <= self.now for p in peers):
            return False
        group = [inst] + [
            p
            for p in peers
            if p.job is None
            and p.batch
            and p.role is InstanceRole.DECODE
            and not (p.queue and self.policy.cobatch_prefill)
        ]
        latency = max(self._decode_latency(member, list(member.batch)) for member in group)
        end = self.now + latency
        running = [p.job.end for p in peers if p.job is not None and p.job.kind is JobKind.DECODE]
        if running:
            peer_end = max(running)
            if end <= peer_end:
                end = peer_end
            elif not self.waiting and (
                peer_end - self.now <= latency / 2 or not self._has_emitted(inst)
            ):
                return False
        for member in group:
            self._start_job(member, [], list(member.batch), not_before=end)
        return True

    def _has_emitted(self, inst: _Instance) -> bool:
        return any(self.requests[rid].tokens_emitted > 0 for rid in inst.batch)

    def _decode_latency(self, inst: _Instance, decode_ids: List[int]) -> float:
        kv_lengths = [inst.ledger.entry(rid).tokens_present for rid in decode_ids]
        return decode_step_latency(self.model, inst.spec, self.eff, kv_lengths)

    def _collect_prefill(self, inst: _Instance) -> List[Tuple[int, Optional[int], int]]:
        """Reserve memory for queued prompts, FCFS, up to the token budget."""
        selected: List[Tuple[int, Optional[int], int]] = []
        total = 0
        for rid in list(inst.queue):
            req = self.requests[rid]
            length = self.context_len(req)
            if selected and total + length > self.config.prefill_token_budget:
                break
            dest = self.policy.select_destination(self.view, inst.id, rid)
            if dest == inst.id:
                dest = None
            if dest is not None and not 0 <= dest < len(self.instances):
                raise SimulationError(f"policy chose invalid destination {dest}")
            if not self._reserve_prefill(inst, req, length, dest):
                break
            selected.append((rid, dest, length))
            total += length
        return selected

    def _allocate(
        self, instance_id: int, req: Request, tokens: int, role: KVRole, incoming: bool = False
    ) -> bool:
        ledger = self.instances[instance_id].ledger
        entry = ledger.allocate_kv(req.id, tokens, role, incoming=incoming)
        if entry is None:
            shortfall = tokens - ledger.free_tokens
            self._apply(self.policy.on_memory_pressure(self.view, instance_id, shortfall))
            entry = ledger.allocate_kv(req.id, tokens, role, incoming=incoming)
        if entry is None:
            return False
        req.holders.add(instance_id)
        return True

    def _reserve_prefill(
        self, inst: _Instance, req: Request, length: int, dest: Optional[int]
    ) -> bool:
        if not self._allocate(inst.id, req, length, KVRole.PRIMARY):
            return False
        if dest is not None and not self._allocate(
            dest, req, length, KVRole.REDUNDANT, incoming=True
        ):
            inst.ledger.release(req.id)
            req.holders.discard(inst.id)
            return False
        req.primary = inst.id
        return True

    def _start_job(
        self,
        inst: _Instance,
        prefill: List[Tuple[int, Optional[int], int]],
        decode_ids: List[int],
        not_before: float = 0.0,
    ) -> None:
        if prefill and decode_ids:
            kind = JobKind.MIXED
            if not self.policy.cobatch_prefill:
                raise SimulationError(
                    f"instance {inst.id} would co-batch prefill and decode under {self.policy.name}"
                )
        elif prefill:
            kind = JobKind.PREFILL
        else:
            kind = JobKind.DECODE

        latency = 0.0
        if prefill:
            latency += prefill_latency(
                self.model, inst.spec, self.eff, [length for _rid, _dest, length in prefill]
            )
        if decode_ids:
            latency += self._decode_latency(inst, decode_ids)
        end = max(self.now + latency, not_before)

        self._job_seq += 1
        job = _Job(
            seq=self._job_seq,
            instance=inst.id,
            kind=kind,
            start=self.now,
            end=end,
            prefill=prefill,
            decode_ids=decode_ids,
        )

        for rid, dest, length in prefill:
            req = self.requests[rid]
            inst.queue.remove(rid)
            req.queued_on = None
            req.waiting = False
            del self.waiting[rid]
            if req.state is RequestState.QUEUED:
                req.state = RequestState.PREFILLING
            if req.prefill_start_time is None:
                req.prefill_start_time = self.now
                req.prefill_instance = inst.id
            self.running[rid] = inst.id
            if dest is not None:
                req.in_transit = True
                nbytes = length * self.kvb
                transfer = self.links.enqueue(
                    inst.id, dest, nbytes, TrafficCategory.PREFILL_TRANSFER, self.now
                )
                tail = transfer_latency(length * self.kvb_layer, inst.spec, self.eff)
                landing = max(transfer.finish_time, end + tail)
                self._push(
                    landing,
                    EventKind.TRANSFER_DONE,
                    rid,
                    _PrefillLanding(rid, inst.id, dest, length, req.epoch),
                )
        if prefill:
            self._note_queue()

        mirror_bytes = 0
        if decode_ids:
            for rid in decode_ids:
                self.running[rid] = inst.id
            job.mirrors, mirror_bytes = self._enqueue_mirrors(inst, decode_ids, end)

        inst.job = job
        self._jobs.append(
            JobRecord(
                instance=inst.id,
                kind=kind.value,
                start=self.now,
                end=end,
                prefill_requests=len(prefill),
                prefill_tokens=sum(length for _r, _d, length in prefill),
                decode_batch=len(decode_ids),
                mirror_bytes=mirror_bytes,
            )
        )
        if kind is JobKind.PREFILL:
            self._push(end, EventKind.PREFILL_DONE, inst.id, job.seq)
        else:
            self._push(end, EventKind.DECODE_STEP_DONE, inst.id, job.seq)
        self._log_event(
            "job_start",
            instance=inst.id,
            kind=kind.value,
            end=end,
            prefill=[rid for rid, _d, _l in prefill],
            decode_batch=len(decode_ids),
        )

    def _enqueue_mirrors(
        self, inst: _Instance, decode_ids: List[int], end: float
    ) -> Tuple[List[_MirrorGroup], int]:
        """Queue the KV lines this step will produce for every redundant holder."""
        items: Dict[int, List[Tuple[int, int, int]]] = {}
        nbytes: Dict[int, int] = {}
        for rid in decode_ids:
            req = self.requests[rid]
            target = inst.ledger.entry(rid).tokens_present + 1
            for h in sorted(req.holders):
                if h == inst.id:
                    continue
                entry = self.instances[h].ledger.entry(rid)
                if entry is None or entry.role is not KVRole.REDUNDANT:
                    continue
                delta = target - entry.target
                if delta <= 0:
                    continue
                entry.target = target
                items.setdefault(h, []).append((rid, target, req.epoch))
                nbytes[h] = nbytes.get(h, 0) + delta * self.kvb

        groups = []
        for h in sorted(items):
            transfer = self.links.enqueue(inst.id, h, nbytes[h], TrafficCategory.MIRROR, self.now)
            groups.append(
                _MirrorGroup(
                    src=inst.id, dst=h, landing=max(transfer.finish_time, end), items=items[h]
                )
            )
        return groups, sum(nbytes.values())

    # -- completions --------------------------------------------------------

    def _on_job_done(self, instance_id: int, seq: int) -> None:
        inst = self.instances[instance_id]
        job = inst.job
        if job is None or job.seq != seq:
            raise SimulationError(f"stale job completion on instance {instance_id}")
        inst.job = None
        for rid in job.decode_ids:
            self.running.pop(rid, None)
        for rid, _dest, _length in job.prefill:
            self.running.pop(rid, None)
        self._log_event("job_done", instance=instance_id, kind=job.kind.value)

        completed: List[int] = []
        for rid, _dest, length in job.prefill:
            if self._finish_prefill(inst, rid, length):
                completed.append(rid)
        if job.decode_ids:
            completed.extend(self._finish_decode(inst, job))

        preempted, self._preempted = self._preempted, []
        for rid in preempted:
            self._apply(self.policy.on_preempted(self.view, rid))

        if job.prefill:
            self._apply(
                self.policy.on_prefill_complete(
                    self.view, inst.id, [rid for rid, _d, _l in job.prefill]
                )
            )
        if job.decode_ids:
            self._apply(self.policy.on_step_boundary(self.view, inst.id))
        for rid in completed:
            self._apply(self.policy.on_request_complete(self.view, rid))

    def _finish_prefill(self, inst: _Instance, rid: int, length: int) -> bool:
        """Returns True when the request completed with its first token."""
        req = self.requests[rid]
        entry = inst.ledger.entry(rid)
        entry.tokens_present = length
        entry.target = length
        if req.state is RequestState.PREFILLING:
            req.state = RequestState.DECODING
        if req.tokens_emitted == 0 and self.config.first_token_mode == "prefill":
            self._emit(req)
        if req.tokens_emitted >= req.decode_len:
            self._complete(req)
            return True
        return False

    def _finish_decode(self, inst: _Instance, job: _Job) -> List[int]:
        active = [
            rid
            for rid in job.decode_ids
            if self.requests[rid].state is RequestState.DECODING
            and self.requests[rid].primary == inst.id
        ]
        finished = []
        for rid in active:
            req = self.requests[rid]
            self._emit(req)
            if req.tokens_emitted >= req.decode_len:
                finished.append(rid)
        for rid in finished:
            self._complete(self.requests[rid])
        for rid in active:
            req = self.requests[rid]
            if req.state is RequestState.DECODING and req.primary == inst.id:
                self._grow(inst, req)

        for group in job.mirrors:
            if group.landing <= self.now:
                self._land_mirror(group)
            else:
                self._push(group.landing, EventKind.TRANSFER_DONE, group.dst, group)
        return finished

    def _emit(self, req: Request) -> None:
        req.tokens_emitted += 1
        req.token_times.append(self.now)
        if req.first_token_time is None:
            req.first_token_time = self.now

    def _release_all(self, req: Request) -> None:
        for h in sorted(req.holders):
            self.instances[h].ledger.release(req.id)
        req.holders.clear()
        req.primary = None
        if req.batch_instance is not None:
            self.instances[req.batch_instance].batch.pop(req.id, None)
            req.batch_instance = None
        req.in_transit = False

    def _complete(self, req: Request) -> None:
        req.state = RequestState.COMPLETE
        req.completion_time = self.now
        self._release_all(req)
        self._unfinished -= 1
        self._log_event("complete", request=req.id)

    def _grow(self, inst: _Instance, req: Request) -> None:
        """Add the KV of the token just produced, evicting or preempting if needed."""
        if inst.ledger.grow_kv(req.id):
            return
        self._apply(self.policy.on_memory_pressure(self.view, inst.id, 1))
        while not inst.ledger.grow_kv(req.id):
            victim = self._pick_victim(inst, exclude=req.id)
            if victim is None:
                raise SimulationError(
                    f"capacity violation on instance {inst.id}: request {req.id} cannot grow "
                    f"({inst.ledger.used_tokens}/{inst.ledger.capacity_tokens} tokens used)"
                )
            self._preempt(victim)

    def _pick_victim(self, inst: _Instance, exclude: int) -> Optional[Request]:
        candidates = [
            self.requests[rid]
            for rid in inst.batch
            if rid != exclude and rid not in self.running
        ]
        if not candidates:
            return None
        return max(candidates, key=lambda r: (r.arrival_time, r.id))

    def _preempt(self, req: Request) -> None:
        logger.debug(f"Preempting request {req.id} at t={self.now:.6f}s for recompute")
        self._release_all(req)
        req.epoch += 1
        req.preemptions += 1
        self.preemptions += 1
        req.waiting = True
        self.waiting[req.id] = None
        self._note_queue()
        self._log_event("preempt", request=req.id)
        self._preempted.append(req.id)

    # -- transfers ----------------------------------------------------------

    def _on_transfer_done(
        self, payload: Union[_PrefillLanding, _CopyLanding, _MirrorGroup]
    ) -> None:
        if isinstance(payload, _MirrorGroup):
            self._land_mirror(payload)
        elif isinstance(payload, _PrefillLanding):
            self._land_prefill(payload)
        else:
            self._land_copy(payload)

    def _land_prefill(self, landing: _PrefillLanding) -> None:
        req = self.requests[landing.request_id]
        if req.epoch != landing.epoch or req.state is RequestState.COMPLETE:
            return
        dst_entry = self.instances[landing.dst].ledger.entry(req.id)
        src_entry = self.instances[landing.src].ledger.entry(req.id)
        if dst_entry is None or src_entry is None:
            raise SimulationError(f"prefill transfer of request {req.id} lost its KV entries")
        dst_entry.tokens_present = landing.tokens
        dst_entry.target = landing.tokens
        dst_entry.incoming = False
        dst_entry.role = KVRole.PRIMARY
        src_entry.role = KVRole.REDUNDANT
        src_entry.target = src_entry.tokens_present
        req.primary = landing.dst
        req.in_transit = False
        if not self.policy.retain_prefill_copy(self.view, landing.src, landing.dst, req.id):
            self.instances[landing.src].ledger.release(req.id)
            req.holders.discard(landing.src)
        if req.batch_instance is None:
            self.instances[landing.dst].batch[req.id] = None
            req.batch_instance = landing.dst
        self._log_event("transfer_done", request=req.id, src=landing.src, dst=landing.dst)

    def _land_copy(self, landing: _CopyLanding) -> None:
        req = self.requests[landing.request_id]
        if req.epoch != landing.epoch or req.state is RequestState.COMPLETE:
            return
        entry = self.instances[landing.dst].ledger.entry(req.id)
        if entry is None:
            return
        entry.tokens_present = max(entry.tokens_present, landing.tokens)
        entry.incoming = False

    def _land_mirror(self, group: _MirrorGroup) -> None:
        ledger = self.instances[group.dst].ledger
        for rid, target, epoch in group.items:
            req = self.requests[rid]
            if req.epoch != epoch or req.state is RequestState.COMPLETE:
                continue
            entry = ledger.entry(rid)
            if entry is None or entry.role is not KVRole.REDUNDANT:
                continue
            if not ledger.reserve(rid, target):
                ledger.release(rid)
                req.holders.discard(group.dst)
                logger.debug(f"Dropped redundant copy of request {rid} on instance {group.dst}")
                continue
            entry.tokens_present = max(entry.tokens_present, target)

    # -- decisions ----------------------------------------------------------

    def _apply(self, decisions: Optional[Iterable[Decision]]) -> None:
        for decision in decisions or ():
            if not self._apply_one(decision):
                self.rejected_decisions += 1
                logger.debug(f"Rejected decision at t={self.now:.6f}s: {decision}")

    def _valid_instance(self, instance_id: int) -> bool:
        return 0 <= instance_id < len(self.instances)

    def _apply_one(self, d: Decision) -> bool:
        if isinstance(d, AssignPrefill):
            return self._assign_prefill(d)
        if isinstance(d, SetRole):
            if not self._valid_instance(d.instance):
                return False
            inst = self.instances[d.instance]
            if inst.role is not d.role:
                self._log_event("set_role", instance=d.instance, role=d.role.value)
            inst.role = d.role
            return True
        if isinstance(d, AddToBatch):
            req = self.requests.get(d.request_id)
            if req is None or not self._valid_instance(d.instance):
                return False
            if req.state is not RequestState.DECODING or req.waiting or req.in_transit:
                return False
            if req.primary != d.instance:
                return False
            if req.batch_instance == d.instance:
                return True
            if req.batch_instance is not None:
                return False
            self.instances[d.instance].batch[req.id] = None
            req.batch_instance = d.instance
            return True
        if isinstance(d, RebalanceMove):
            return self._move(d)
        if isinstance(d, CreateRedundant):
            return self._create_redundant(d)
        if isinstance(d, EvictRedundant):
            req = self.requests.get(d.request_id)
            if req is None or not self._valid_instance(d.instance):
                return False
            ledger = self.instances[d.instance].ledger
            if d.request_id not in ledger:
                return False
            if ledger.evict_redundant(d.request_id) == 0:
                return False
            req.holders.discard(d.instance)
            return True
        raise SimulationError(f"unknown decision {d!r}")

    def _assign_prefill(self, d: AssignPrefill) -> bool:
        if not self._valid_instance(d.instance):
            return False
        inst = self.instances[d.instance]
        ok = True
        for rid in d.request_ids:
            req = self.requests.get(rid)
            if req is None or not req.waiting:
                ok = False
                continue
            if req.queued_on == inst.id:
                continue
            if req.queued_on is not None:
                self.instances[req.queued_on].queue.remove(rid)
            inst.queue.append(rid)
            req.queued_on = inst.id
        return ok

    def _move(self, d: RebalanceMove) -> bool:
        if not (self._valid_instance(d.src) and self._valid_instance(d.dst)):
            return False
        if not self.can_move(d.request_id, d.src, d.dst):
            return False
        req = self.requests[d.request_id]
        src_entry = self.instances[d.src].ledger.entry(req.id)
        dst_entry = self.instances[d.dst].ledger.entry(req.id)
        src_entry.role = KVRole.REDUNDANT
        dst_entry.role = KVRole.PRIMARY
        src_entry.target = src_entry.tokens_present
        dst_entry.target = dst_entry.tokens_present
        req.primary = d.dst
        if req.batch_instance is not None:
            self.instances[req.batch_instance].batch.pop(req.id, None)
        self.instances[d.dst].batch[req.id] = None
        req.batch_instance = d.dst
        self.rebalance_moves += 1
        return True

    def _create_redundant(self, d: CreateRedundant) -> bool:
        req = self.requests.get(d.request_id)
        if req is None or not self._valid_instance(d.instance):
            return False
        if req.state is not RequestState.DECODING or req.waiting or req.in_transit:
            return False
        if req.primary is None or req.primary == d.instance:
            return False
        if d.request_id in self.instances[d.instance].ledger:
            return False
        tokens = self.primary_tokens(req.id)
        if tokens <= 0:
            return False
        entry = self.instances[d.instance].ledger.allocate_kv(
            req.id, tokens, KVRole.REDUNDANT, incoming=True
        )
        if entry is None:
            return False
        req.holders.add(d.instance)
        transfer = self.links.enqueue(
            req.primary, d.instance, tokens * self.kvb, TrafficCategory.LEVELING, self.now
        )
        self._push(
            transfer.finish_time,
            EventKind.TRANSFER_DONE,
            req.id,
            _CopyLanding(req.id, req.primary, d.instance, tokens, req.epoch),
        )
        return True

    # -- invariants and results ---------------------------------------------

    def check_invariants(self) -> None:
        """
        Check memory safety, residency and token bookkeeping.

        Raises:
            SimulationError: On the first violation found
        """
        for inst in self.instances:
            ledger = inst.ledger
            allocated = 0
            for entry in ledger.entries():
                allocated += entry.allocated
                if entry.tokens_present > entry.allocated:
                    raise SimulationError(
                        f"request {entry.request_id} on instance {inst.id} holds more tokens "
                        f"than allocated"
                    )
            if allocated != ledger.used_tokens:
                raise SimulationError(f"ledger of instance {inst.id} is inconsistent")
            if ledger.used_tokens > ledger.capacity_tokens:
                raise SimulationError(f"instance {inst.id} exceeds its KV capacity")
            for rid in inst.batch:
                req = self.requests[rid]
                if req.primary != inst.id or req.in_transit or req.batch_instance != inst.id:
                    raise SimulationError(f"request {rid} batched on {inst.id} without its KV")

        for req in self.requests.values():
            if req.tokens_emitted > req.decode_len:
                raise SimulationError(f"request {req.id} emitted past its decode length")
            if any(b <= a for a, b in zip(req.token_times, req.token_times[1:])):
                raise SimulationError(f"token times of request {req.id} not increasing")
            if req.state is RequestState.COMPLETE:
                if req.holders:
                    raise SimulationError(f"completed request {req.id} still holds KV")
                continue
            roles = []
            for h in req.holders:
                entry = self.instances[h].ledger.entry(req.id)
                if entry is None:
                    raise SimulationError(f"request {req.id} lists holder {h} without an entry")
                roles.append(entry.role)
            primaries = roles.count(KVRole.PRIMARY)
            if req.holders and primaries != 1:
                raise SimulationError(f"request {req.id} has {primaries} primary copies")
            if req.state is RequestState.DECODING and not req.waiting:
                primary_tokens = self.primary_tokens(req.id)
                if not req.in_transit and req.id not in self.running:
                    expected = self.context_len(req)
                    if primary_tokens != expected:
                        raise SimulationError(
                            f"request {req.id} primary holds {primary_tokens} tokens, "
                            f"expected {expected}"
                        )
                for h in req.holders:
                    entry = self.instances[h].ledger.entry(req.id)
                    if entry.role is KVRole.REDUNDANT and entry.tokens_present > primary_tokens:
                        if not req.in_transit:
                            raise SimulationError(
                                f"redundant copy of request {req.id} on {h} is ahead of primary"
                            )

    def _results(self) -> RawResults:
        requests = [
            RequestRecord(
                id=req.id,
                arrival_time=req.arrival_time,
                prompt_len=req.prompt_len,
                decode_len=req.decode_len,
                state=req.state.value,
                tokens_emitted=req.tokens_emitted,
                first_token_time=req.first_token_time,
                completion_time=req.completion_time,
                prefill_start_time=req.prefill_start_time,
                prefill_instance=req.prefill_instance,
                preemptions=req.preemptions,
                token_times=list(req.token_times),
            )
            for req in sorted(self.requests.values(), key=lambda r: r.id)
        ]
        return RawResults(
            policy=self.policy.name,
            seed=self.seed,
            num_instances=len(self.instances),
            capacity_tokens=[inst.ledger.capacity_tokens for inst in self.instances],
            kv_bytes_per_token=self.kvb,
            link_capacity=[inst.spec.link_capacity for inst in self.instances],
            duration_s=self.duration_s,
            horizon_s=self.horizon_s,
            end_time=self.now,
            trace_fingerprint=self.trace.fingerprint(),
            first_token_mode=self.config.first_token_mode,
            requests=requests,
            jobs=list(self._jobs),
            traffic_bytes=dict(self.links.bytes_by_category),
            mirror_series=[list(row) for row in self.links.mirror_series()],
            peak_kv_tokens=[inst.ledger.peak_tokens for inst in self.instances],
            starved_time_s=list(self._starved),
            queue_depth=[list(row) for row in self._queue_depth],
            rejected_decisions=self.rejected_decisions,
            preemptions=self.preemptions,
            rebalance_moves=self.rebalance_moves,
            policy_stats=dict(sorted(self.policy.stats().items())),
            event_log=list(self._events or []),
        )


def run(
    trace: Trace,
    cluster: Sequence[InstanceSpec],
    policy: Policy,
    model: ModelSpec,
    eff: EfficiencyFactors,
    seed: int = 0,
    engine_config: Optional[EngineConfig] = None,
    duration_s: Optional[float] = None,
    drain_s: float = 120.0,
    emit_events: bool = False,
) -> RawResults:
    """
    Simulate a trace on a cluster under a policy.

    Args:
        trace: Requests to serve
        cluster: One InstanceSpec per instance
        policy: Scheduling policy (fresh instance per run)
        model: Model served
        eff: Efficiency factors
        seed: Recorded in the results
        engine_config: Engine knobs
        duration_s: Measurement duration (defaults to the trace's)
        drain_s: Extra time allowed after duration_s
        emit_events: Keep an event log

    Returns:
        RawResults of the run
    """
    return Simulator(
        trace,
        cluster,
        policy,
        model,
        eff,
        engine_config=engine_config,
        seed=seed,
        duration_s=duration_s,
        drain_s=drain_s,
        emit_events=emit_events,
    ).run()
